"""Shared test helpers: finite-difference gradient checking and tiny fixtures.

The gradient checker re-runs a forward closure under central differences and
compares against one taped backward pass. All checks run in float64 so the
numeric differentiation itself contributes ~1e-9 relative error, leaving the
1e-3 acceptance tolerance entirely for genuine backward-pass mistakes.
"""

import zlib

import numpy as np

from stlth import ops
from stlth.tensor import (ComputationTape, Tensor, add, add_scalar, mean_all, mul,
                          mul_scalar, neg, reciprocal, reshape, sub, sum_all)

FD_TOL = 1e-3

# One line per end-to-end guarantee exercised by test_acceptance.py; printed
# as a dedicated section after the test summary (print() inside passing tests
# is swallowed by capture, a terminal-summary section is not).
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def fd_check(build, tensors, eps=1e-6, sample=None, seed=0, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    `build` must recompute the scalar loss from the tensors' current buffers.
    Every entry of every tensor is probed unless `sample` caps the number of
    probed entries per tensor (chosen with a seeded generator). `floor` is the
    denominator's absolute floor: derivatives whose true value is exactly zero
    (e.g. parameters the loss is invariant to) measure pure floating-point
    cancellation noise under differencing, so entries below the floor compare
    against it rather than against ~1e-16/eps noise.
    """
    with ComputationTape() as tape:
        loss = build()
    for t in tensors:
        t.zero_grad()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for t, an in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        if sample is None or flat.size <= sample:
            indices = range(flat.size)
        else:
            indices = rng.choice(flat.size, size=sample, replace=False)
        for i in indices:
            orig = flat[i]
            step = eps * max(1.0, abs(orig))
            flat[i] = orig + step
            hi = float(build().data)
            flat[i] = orig - step
            lo = float(build().data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(fd - an_flat[i]) / max(abs(fd), abs(an_flat[i]), floor)
            worst = max(worst, err)
    return worst


def _t(rng, *shape, scale=1.0, requires_grad=True):
    data = rng.normal(0.0, scale, size=shape)
    return Tensor(data, requires_grad=requires_grad, dtype=np.float64)


def _away_from_zero(rng, *shape, low=0.1, high=1.0):
    """Random values with |x| in [low, high]: safe for relu/reciprocal kinks."""
    mag = rng.uniform(low, high, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(mag * sign, requires_grad=True, dtype=np.float64)


def _check_conv2d(padding, stride, bias):
    rng = np.random.Generator(np.random.PCG64(11))
    x = _t(rng, 2, 3, 6, 7)
    w = _t(rng, 4, 3, 3, 3, scale=0.5)
    b = _t(rng, 4) if bias else None
    tensors = [x, w] + ([b] if bias else [])

    def build():
        out = ops.conv2d(x, w, b, stride=stride, padding=padding)
        gen = np.random.Generator(np.random.PCG64(12))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, tensors)


def _check_masked_conv2d():
    rng = np.random.Generator(np.random.PCG64(13))
    x = _t(rng, 1, 2, 5, 5)
    w = _t(rng, 3, 2, 3, 3, scale=0.5)
    bits = (rng.uniform(size=w.shape) > 0.5).astype(np.uint8)
    keep = Tensor(bits.astype(np.float64))
    np.multiply(w.data, bits, out=w.data)

    def build():
        out = ops.conv2d(x, mul(w, keep), weight_mask=bits)
        gen = np.random.Generator(np.random.PCG64(14))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, [x, w])


def _check_unary(op_name, make_input, **kwargs):
    rng = np.random.Generator(np.random.PCG64(zlib.crc32(op_name.encode())))
    x = make_input(rng)
    op = getattr(ops, op_name)

    def build():
        out = op(x, **kwargs)
        gen = np.random.Generator(np.random.PCG64(15))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, [x])


def _check_channel_stats():
    rng = np.random.Generator(np.random.PCG64(16))
    x = _t(rng, 2, 3, 4, 5)

    def build():
        mu, std = ops.channel_stats(x)
        gen = np.random.Generator(np.random.PCG64(17))
        wm = Tensor(gen.normal(size=mu.shape), dtype=np.float64)
        ws = Tensor(gen.normal(size=std.shape), dtype=np.float64)
        return add(sum_all(mul(mu, wm)), sum_all(mul(std, ws)))

    return fd_check(build, [x])


def _check_scale_shift():
    rng = np.random.Generator(np.random.PCG64(18))
    x = _t(rng, 2, 3, 4, 4)
    scale = _t(rng, 2, 3)
    shift = _t(rng, 2, 3)

    def build():
        out = ops.scale_shift_channels(x, scale, shift)
        gen = np.random.Generator(np.random.PCG64(19))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, [x, scale, shift])


def _check_bmm():
    rng = np.random.Generator(np.random.PCG64(20))
    a = _t(rng, 3, 4, 5)
    b = _t(rng, 3, 5, 6)

    def build():
        out = ops.bmm(a, b)
        gen = np.random.Generator(np.random.PCG64(21))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, [a, b])


def _check_binary(fn):
    rng = np.random.Generator(np.random.PCG64(22))
    a = _t(rng, 3, 4)
    b = _t(rng, 3, 4)

    def build():
        out = fn(a, b)
        gen = np.random.Generator(np.random.PCG64(23))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, [a, b])


def _check_elementwise(fn, away=False):
    rng = np.random.Generator(np.random.PCG64(24))
    x = _away_from_zero(rng, 3, 4, low=0.5) if away else _t(rng, 3, 4)

    def build():
        out = fn(x)
        gen = np.random.Generator(np.random.PCG64(25))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, [x])


def _check_scalar_reduction(fn):
    rng = np.random.Generator(np.random.PCG64(28))
    x = _t(rng, 3, 4)
    return fd_check(lambda: fn(x), [x])


def _check_reshape():
    rng = np.random.Generator(np.random.PCG64(26))
    x = _t(rng, 2, 3, 4)

    def build():
        out = reshape(x, (4, 6))
        gen = np.random.Generator(np.random.PCG64(27))
        wgt = Tensor(gen.normal(size=out.shape), dtype=np.float64)
        return sum_all(mul(out, wgt))

    return fd_check(build, [x])


# Every differentiable operation, each mapped to a closure returning the
# worst finite-difference relative error on a random small instance.
GRADIENT_CHECKS = {
    "conv2d_reflect": lambda: _check_conv2d("reflect", 1, True),
    "conv2d_zero": lambda: _check_conv2d("zero", 1, True),
    "conv2d_stride2": lambda: _check_conv2d("zero", 2, True),
    "conv2d_nobias": lambda: _check_conv2d("reflect", 1, False),
    "conv2d_masked": _check_masked_conv2d,
    "relu": lambda: _check_unary(
        "relu", lambda rng: _away_from_zero(rng, 2, 3, 4, 4)),
    "sigmoid": lambda: _check_unary("sigmoid", lambda rng: _t(rng, 2, 3, 4, 4)),
    "upsample_nearest": lambda: _check_unary(
        "upsample_nearest", lambda rng: _t(rng, 2, 3, 4, 4), factor=2),
    "upsample_nearest_x3": lambda: _check_unary(
        "upsample_nearest", lambda rng: _t(rng, 1, 2, 3, 3), factor=3),
    "avg_pool2x2": lambda: _check_unary(
        "avg_pool2x2", lambda rng: _t(rng, 2, 3, 4, 6)),
    "channel_stats": _check_channel_stats,
    "normalize_channels": lambda: _check_unary(
        "normalize_channels", lambda rng: _t(rng, 2, 3, 4, 5)),
    "scale_shift_channels": _check_scale_shift,
    "softmax_over_positions": lambda: _check_unary(
        "softmax_over_positions", lambda rng: Tensor(
            rng.normal(size=(2, 4, 5)), requires_grad=True, dtype=np.float64)),
    "bmm": _check_bmm,
    "transpose_last2": lambda: _check_unary(
        "transpose_last2", lambda rng: Tensor(
            rng.normal(size=(2, 3, 4)), requires_grad=True, dtype=np.float64)),
    "l2norm_rows": lambda: _check_unary(
        "l2norm_rows", lambda rng: _t(rng, 4, 3, 2, 2)),
    "add": lambda: _check_binary(add),
    "sub": lambda: _check_binary(sub),
    "mul": lambda: _check_binary(mul),
    "add_scalar": lambda: _check_elementwise(lambda t: add_scalar(t, 2.5)),
    "mul_scalar": lambda: _check_elementwise(lambda t: mul_scalar(t, -1.75)),
    "neg": lambda: _check_elementwise(neg),
    "reciprocal": lambda: _check_elementwise(reciprocal, away=True),
    "sum_all": lambda: _check_scalar_reduction(sum_all),
    "mean_all": lambda: _check_scalar_reduction(mean_all),
    "reshape": _check_reshape,
}


def fd_training_loss(kind, image_size, batch, sample, seed=0, masked=False):
    """Worst FD relative error of the composite training loss wrt all params."""
    from stlth.data import DatasetStream
    from stlth.lottery import derive_seed
    from stlth.metrics import training_loss
    from stlth.models import init_parameters
    from stlth.pruning import PruningMask, global_magnitude_prune

    params = init_parameters(kind, derive_seed(seed, 2), dtype=np.float64)
    judge = init_parameters(kind, derive_seed(seed, 1), dtype=np.float64)
    judge.set_trainable(False)
    data = DatasetStream("synthetic", "train", image_size, seed)
    contents, styles = data.next_batch(batch)
    contents = Tensor(contents.astype(np.float64))
    styles = Tensor(styles.astype(np.float64))

    mask = None
    if masked:
        mask = global_magnitude_prune(
            params, PruningMask.ones_like(params, seed=seed), 0.36)

    tensors = [e.tensor for e in params]

    def build():
        return training_loss(params, mask, judge, contents, styles)

    # small step: a larger one pushes relu pre-activations across their kinks,
    # where central differences measure subgradient mixtures. The floor absorbs
    # the ~1e-16*|loss|/eps differencing noise on derivatives that are exactly
    # zero (attention-key biases under softmax shift invariance): entries under
    # it are held to |fd - analytic| <= floor*tolerance instead of a ratio.
    return fd_check(build, tensors, eps=1e-6, sample=sample, seed=seed,
                    floor=1e-3)


def make_registry(seed, min_weights=100, max_weights=10_000):
    """Random small parameter registry with deliberately tied magnitudes.

    Values are quantized to a 0.1 grid so global pruning regularly hits exact
    magnitude ties and the declared tie-break order actually decides survival.
    Includes one non-prunable bias per submodule, which masks must ignore.
    """
    from stlth.models import ModelKind, ParameterRegistry

    rng = np.random.Generator(np.random.PCG64(seed))
    reg = ParameterRegistry(ModelKind.ADAIN)
    budget = int(rng.integers(min_weights, max_weights + 1))
    tags = ("encoder", "transform", "decoder")
    total = 0
    index = 0
    while total < budget:
        tag = tags[int(rng.integers(0, len(tags)))]
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(s) for s in rng.integers(1, 7, size=ndim))
        values = np.round(rng.normal(size=shape), 1).astype(np.float32)
        reg.add(f"{tag}.t{index}.weight", tag, Tensor(values, requires_grad=True),
                prunable=True)
        total += values.size
        index += 1
    for tag in tags:
        bias = rng.normal(size=3).astype(np.float32)
        reg.add(f"{tag}.t{index}.bias", tag, Tensor(bias, requires_grad=True),
                prunable=False)
        index += 1
    return reg


def brute_force_prune(reg, fields, fraction, scope=("encoder", "transform",
                                                    "decoder")):
    """Full-sort reference pruner: clear the k smallest surviving magnitudes.

    Ties break by (|value|, parameter name, flat index), all ascending; k is
    floor(fraction * survivors). Runs entirely in Python as an independent
    check on the vectorized implementation.
    """
    import math

    rows = []
    for e in sorted(reg.prunable_entries(), key=lambda e: e.name):
        if e.tag not in scope:
            continue
        flat = e.tensor.data.reshape(-1)
        bits = fields[e.name].reshape(-1)
        rows.extend((abs(float(flat[pos])), e.name, pos)
                    for pos in range(flat.size) if bits[pos])
    rows.sort()
    k = math.floor(fraction * len(rows))
    out = {name: arr.copy() for name, arr in fields.items()}
    for _, name, pos in rows[:k]:
        out[name].reshape(-1)[pos] = 0
    return out
