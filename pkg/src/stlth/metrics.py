"""Stylization error metrics and the differentiable training loss.

All feature-space comparisons are judged by a *fixed reference encoder*: a
frozen ParameterRegistry whose encoder defines the feature space in which
content and style distances are measured. Using one shared judge keeps error
numbers comparable across subnetworks whose own encoders differ.

Distances are unsquared Euclidean norms of flattened tensors, averaged over
the batch. The style term compares per-channel feature means and standard
deviations at every encoder level; the content term compares deepest-level
features against a target (the statistics-matched content feature for the
normalization model; the attention-transformed reference features, plus
pixel- and feature-identity terms, for the attention model).

The test error is content + style with every term unweighted; the training
loss applies the LossWeights multipliers.
"""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .models import ModelKind, adain_transform, decode, encode, sanet_transform, stylize
from .ops import channel_stats, l2norm_rows
from .tensor import Tensor, add, mean_all, mul_scalar, sub

LossWeights = namedtuple("LossWeights", ("style", "identity_pixel", "identity_feature"))
LossWeights.__new__.__defaults__ = (10.0, 50.0, 1.0)


@dataclass(frozen=True)
class ErrorReport:
    """Mean stylization error over a set of content/style pairs."""

    content_error: float
    style_error: float
    total: float
    pairs: int

    @classmethod
    def build(cls, content_error, style_error, pairs):
        return cls(content_error, style_error, content_error + style_error, pairs)


CSV_HEADER = ("sparsity", "content_error", "style_error", "total", "seed", "strategy")


def report_csv_fields(report, sparsity, seed, strategy):
    """One CSV row per report: sparsity, errors, seed, strategy."""
    return (f"{sparsity:.6f}", f"{report.content_error:.8f}",
            f"{report.style_error:.8f}", f"{report.total:.8f}",
            str(seed), strategy)


def _style_rows(levels_a, levels_b):
    """Per-sample sum over levels of ||mean diff|| + ||std diff|| — shape (B,)."""
    rows = None
    for fa, fb in zip(levels_a, levels_b):
        ma, sa = channel_stats(fa)
        mb, sb = channel_stats(fb)
        term = add(l2norm_rows(sub(ma, mb)), l2norm_rows(sub(sa, sb)))
        rows = term if rows is None else add(rows, term)
    return rows


def _feature_rows(levels_a, levels_b):
    """Per-sample sum over levels of ||feature diff||ₑ — shape (B,)."""
    rows = None
    for fa, fb in zip(levels_a, levels_b):
        term = l2norm_rows(sub(fa, fb))
        rows = term if rows is None else add(rows, term)
    return rows


def _sanet_targets(judge_content, judge_style, params, mask):
    """Attention-transformed judge features: the content targets at both levels."""
    _, (t4, t5) = sanet_transform(judge_content.levels[3], judge_style.levels[3],
                                  judge_content.levels[4], judge_style.levels[4],
                                  params, mask, with_levels=True)
    return t4, t5


def _sanet_content_rows(judge_t, targets, stylized_cc, stylized_ss,
                        contents, styles, judge_cc, judge_ss,
                        judge_c, judge_s, weights):
    """Content rows for the attention model: transformed-feature distances plus
    pixel- and feature-identity penalties (weighted per `weights`)."""
    t4, t5 = targets
    rows = add(l2norm_rows(sub(judge_t.levels[3], t4)),
               l2norm_rows(sub(judge_t.levels[4], t5)))
    pixel = add(l2norm_rows(sub(stylized_cc, contents)),
                l2norm_rows(sub(stylized_ss, styles)))
    feat = add(_feature_rows(judge_cc.levels, judge_c.levels),
               _feature_rows(judge_ss.levels, judge_s.levels))
    rows = add(rows, mul_scalar(pixel, weights.identity_pixel))
    rows = add(rows, mul_scalar(feat, weights.identity_feature))
    return rows


def style_error(stylized, styles, judge):
    """Mean over the batch of the per-level statistics distance."""
    jt = encode(_as_tensor(stylized), judge)
    js = encode(_as_tensor(styles), judge)
    return float(_style_rows(jt.levels, js.levels).data.mean(dtype=np.float64))


def content_error_adain(stylized, contents, styles, judge):
    """Mean distance between stylized deepest features and the
    statistics-matched target computed in the judge's feature space."""
    jc = encode(_as_tensor(contents), judge)
    js = encode(_as_tensor(styles), judge)
    jt = encode(_as_tensor(stylized), judge)
    target = adain_transform(jc.deepest, js.deepest)
    rows = l2norm_rows(sub(jt.deepest, target))
    return float(rows.data.mean(dtype=np.float64))


def content_error_sanet(stylized, contents, styles, identity_cc, identity_ss,
                        params, mask, judge, weights=LossWeights(1.0, 1.0, 1.0)):
    """Mean attention-model content error (transformed-feature + identity terms)."""
    ct, st = _as_tensor(contents), _as_tensor(styles)
    jc, js = encode(ct, judge), encode(st, judge)
    jt = encode(_as_tensor(stylized), judge)
    icc, iss = _as_tensor(identity_cc), _as_tensor(identity_ss)
    jcc, jss = encode(icc, judge), encode(iss, judge)
    targets = _sanet_targets(jc, js, params, mask)
    rows = _sanet_content_rows(jt, targets, icc, iss, ct, st, jcc, jss,
                               jc, js, weights)
    return float(rows.data.mean(dtype=np.float64))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def average_test_error(params, mask, judge, batches):
    """Mean content/style error of ``params`` ⊙ ``mask`` over test pair batches.

    ``batches`` yields (contents, styles) arrays of matching batch size. The
    identity terms of the attention model are evaluated unweighted, matching
    the reported test-error definition.
    """
    content_sum = 0.0
    style_sum = 0.0
    pairs = 0
    identity_weights = LossWeights(1.0, 1.0, 1.0)
    for contents, styles in batches:
        ct, st = _as_tensor(contents), _as_tensor(styles)
        n = ct.shape[0]
        stylized = stylize(ct, st, params, mask)
        jc, js = encode(ct, judge), encode(st, judge)
        jt = encode(stylized, judge)
        style_rows = _style_rows(jt.levels, js.levels)
        if params.kind is ModelKind.ADAIN:
            target = adain_transform(jc.deepest, js.deepest)
            content_rows = l2norm_rows(sub(jt.deepest, target))
        else:
            icc = stylize(ct, ct, params, mask)
            iss = stylize(st, st, params, mask)
            jcc, jss = encode(icc, judge), encode(iss, judge)
            targets = _sanet_targets(jc, js, params, mask)
            content_rows = _sanet_content_rows(jt, targets, icc, iss, ct, st,
                                               jcc, jss, jc, js, identity_weights)
        content_sum += float(content_rows.data.sum(dtype=np.float64))
        style_sum += float(style_rows.data.sum(dtype=np.float64))
        pairs += n
    if pairs == 0:
        raise ValueError("test set is empty: no pairs to evaluate")
    return ErrorReport.build(content_sum / pairs, style_sum / pairs, pairs)


def training_loss(params, mask, judge, contents, styles, weights=LossWeights()):
    """Differentiable scalar loss for one batch, judged by the fixed encoder.

    The generation path (encode → transform → decode) runs through the model
    parameters; the outputs are then re-encoded by the frozen judge and scored
    against judge-space targets, so degenerate model encoders cannot hide a
    bad stylization from the loss.
    """
    for w in weights:
        if not (np.isfinite(w) and w >= 0):
            raise ValueError(f"loss weights must be finite and >= 0, got {weights}")
    ct, st = _as_tensor(contents), _as_tensor(styles)
    jc, js = encode(ct, judge), encode(st, judge)

    if params.kind is ModelKind.ADAIN:
        target = adain_transform(jc.deepest, js.deepest)
        ec, es = encode(ct, params, mask), encode(st, params, mask)
        stylized = decode(adain_transform(ec.deepest, es.deepest), params, mask)
        jt = encode(stylized, judge)
        content = mean_all(l2norm_rows(sub(jt.deepest, target)))
        style = mean_all(_style_rows(jt.levels, js.levels))
        return add(content, mul_scalar(style, weights.style))

    targets = _sanet_targets(jc, js, params, mask)
    ec, es = encode(ct, params, mask), encode(st, params, mask)
    merged = sanet_transform(ec.levels[3], es.levels[3], ec.levels[4], es.levels[4],
                             params, mask)
    stylized = decode(merged, params, mask)
    jt = encode(stylized, judge)
    icc = decode(sanet_transform(ec.levels[3], ec.levels[3], ec.levels[4],
                                 ec.levels[4], params, mask), params, mask)
    iss = decode(sanet_transform(es.levels[3], es.levels[3], es.levels[4],
                                 es.levels[4], params, mask), params, mask)
    jcc, jss = encode(icc, judge), encode(iss, judge)

    content = mean_all(add(l2norm_rows(sub(jt.levels[3], targets[0])),
                           l2norm_rows(sub(jt.levels[4], targets[1]))))
    style = mean_all(_style_rows(jt.levels, js.levels))
    pixel = mean_all(add(l2norm_rows(sub(icc, ct)), l2norm_rows(sub(iss, st))))
    feat = mean_all(add(_feature_rows(jcc.levels, jc.levels),
                        _feature_rows(jss.levels, js.levels)))
    loss = add(content, mul_scalar(style, weights.style))
    loss = add(loss, mul_scalar(pixel, weights.identity_pixel))
    return add(loss, mul_scalar(feat, weights.identity_feature))
