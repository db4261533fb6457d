"""Command-line experiment harness.

Subcommands
    train         one dense training run (encoder trainable or frozen)
    imp           iterative pruning ladder across trials
    compare       pruning-strategy comparison on a shared dense round
    rewind-sweep  the pruning ladder at five rewind ratios
    stylize       apply a saved model (and optional mask) to one image pair

Every experiment writes a self-describing output directory: the resolved
configuration, a seed manifest, fixed-schema CSV results, and binary
artifacts (checkpoints, masks) in their versioned container formats. All
numbers in the CSVs are deterministic functions of the configuration; only
the wall-clock columns vary between identical runs.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (non-finite
values during training), 4 I/O failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .data import DatasetStream, load_image, write_ppm
from .lottery import (STRATEGIES, IMPConfig, compare_strategies, derive_seed,
                      imp_run, load_checkpoint, save_checkpoint,
                      test_pair_batches, train)
from .metrics import LossWeights, average_test_error
from .models import (ENCODER_LEVELS, ModelKind, init_parameters,
                     pretrain_encoder_reconstruction)
from .pruning import ALL_SCOPES, apply_mask, load_mask, save_mask

log = logging.getLogger("stlth.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

SCOPE_FLAGS = {"pt": ALL_SCOPES, "nopt": ("encoder", "decoder")}
REWIND_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4)

ROUND_COLUMNS = ("trial", "round", "sparsity", "content_error", "style_error",
                 "total", "matching_verdict", "wall_seconds")
STRATEGY_COLUMNS = ("trial", "strategy", "round", "sparsity",
                    "rewind_iteration", "seed", "content_error", "style_error",
                    "total", "matching_verdict", "wall_seconds")
CURVE_COLUMNS = ("round", "sparsity", "content_error", "style_error", "total",
                 "matching_verdict")
SUMMARY_COLUMNS = ("trial", "e_best", "best_sparsity", "s_extreme",
                   "e_best_formatted")
TABLE_COLUMNS = ("strategy", "rewind_iteration", "e_best_formatted",
                 "s_extreme")
SWEEP_COLUMNS = ("rewind_fraction", "rewind_iteration", "trial", "e_best",
                 "best_sparsity", "s_extreme", "e_best_formatted")
TRAIN_COLUMNS = ("model", "mode", "iterations", "seed", "sparsity",
                 "content_error", "style_error", "total", "wall_seconds")


class ConfigError(ValueError):
    """A rejected configuration value or key."""


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common_flags(sub, dests):
    for name, kwargs in (
        ("--verbose", dict(action="store_true",
                           help="log per-round progress")),
        ("--config", dict(default=None,
                          help="JSON file of flag values, keyed by flag name "
                               "with dashes as underscores; explicit flags "
                               "override it, unknown keys are rejected")),
    ):
        action = sub.add_argument(name, **kwargs)
        dests.add(action.dest)


def _experiment_flags(sub, dests):
    flags = (
        ("--model", dict(choices=("adain", "sanet"), default="adain",
                         help="architecture family")),
        ("--mode", dict(choices=("plus", "frozen"), default="plus",
                        help="train all submodules, or hold a reconstruction-"
                             "pretrained encoder fixed")),
        ("--scope", dict(choices=("pt", "nopt"), default="pt",
                         help="pruning scope: with or without the transform")),
        ("--strategy", dict(default="imp,omp,rp,rt,fp",
                            help="comma-separated pruning strategies")),
        ("--iters", dict(type=int, default=2000,
                         help="training iterations per round")),
        ("--rewind-frac", dict(type=float, default=0.0,
                               help="rewind point as a fraction of --iters")),
        ("--prune-frac", dict(type=float, default=0.2,
                              help="fraction of survivors pruned per round")),
        ("--target-sparsity", dict(type=float, default=0.892)),
        ("--trials", dict(type=int, default=3)),
        ("--seed", dict(type=int, default=0)),
        ("--data", dict(default="synthetic",
                        help="'synthetic' or an image folder with content/ "
                             "and style/ subdirectories")),
        ("--size", dict(type=int, default=64, help="training image size")),
        ("--batch-size", dict(type=int, default=8)),
        ("--learning-rate", dict(type=float, default=1e-4)),
        ("--pretrain-iters", dict(type=int, default=400)),
        ("--eval-pairs", dict(type=int, default=200)),
        ("--eval-batch-size", dict(type=int, default=10)),
        ("--style-weight", dict(type=float, default=10.0)),
        ("--pixel-weight", dict(type=float, default=50.0)),
        ("--feature-weight", dict(type=float, default=1.0)),
        ("--svg", dict(action="store_true",
                       help="also draw an error-vs-remaining-weights chart")),
        ("--out", dict(default=None, help="output directory (required)")),
    )
    for name, kwargs in flags:
        action = sub.add_argument(name, **kwargs)
        dests.add(action.dest)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stlth",
        description="Lottery-ticket experiments on miniature style-transfer "
                    "models.")
    subs = parser.add_subparsers(dest="command", required=True)
    by_name = {}
    dests = {}

    for command in ("train", "imp", "compare", "rewind-sweep"):
        sub = subs.add_parser(command)
        by_name[command] = sub
        dests[command] = set()
        _common_flags(sub, dests[command])
        _experiment_flags(sub, dests[command])

    sub = subs.add_parser("stylize")
    by_name["stylize"] = sub
    dests["stylize"] = set()
    _common_flags(sub, dests["stylize"])
    for name, kwargs in (
        ("--checkpoint", dict(default=None, help="model file (required)")),
        ("--mask", dict(default=None)),
        ("--content", dict(default=None, help="content image (required)")),
        ("--style", dict(default=None, help="style image (required)")),
        ("--out", dict(default=None, help="output directory (required)")),
        ("--format", dict(choices=("ppm", "png"), default="ppm")),
        ("--size", dict(type=int, default=0,
                        help="stylization size (0 = largest compatible size "
                             "of the content image)")),
    ):
        action = sub.add_argument(name, **kwargs)
        dests["stylize"].add(action.dest)
    return parser, by_name, dests


def _apply_config_file(by_name, dests, argv):
    """Merge a --config JSON file as subcommand defaults; flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    command = next((a for a in argv if not a.startswith("-")), None)
    if command not in by_name:
        return
    try:
        with open(known.config) as fh:
            values = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config file {known.config} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config file {known.config} must hold an object")
    unknown = set(values) - dests[command]
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; "
                          f"valid keys: {sorted(dests[command])}")
    by_name[command].set_defaults(**values)


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _strategies(args):
    raw = args.strategy
    if isinstance(raw, (list, tuple)):
        names = tuple(raw)
    else:
        names = tuple(s.strip() for s in str(raw).split(",") if s.strip())
    unknown = set(names) - set(STRATEGIES)
    if unknown:
        raise ConfigError(f"unknown strategies {sorted(unknown)}; "
                          f"valid: {list(STRATEGIES)}")
    if not names:
        raise ConfigError("at least one strategy is required")
    return names


def _experiment_config(args):
    # config files bypass argparse type conversion, so coerce here
    try:
        iters = int(args.iters)
        rewind_frac = float(args.rewind_frac)
        weights = LossWeights(float(args.style_weight),
                              float(args.pixel_weight),
                              float(args.feature_weight))
        if not 0.0 <= rewind_frac <= 1.0:
            raise ConfigError(
                f"--rewind-frac must be in [0,1], got {rewind_frac}")
        return IMPConfig(
            kind=ModelKind(str(args.model)),
            iterations=iters,
            batch_size=int(args.batch_size),
            learning_rate=float(args.learning_rate),
            rewind_iteration=round(rewind_frac * iters),
            prune_fraction=float(args.prune_frac),
            target_sparsity=float(args.target_sparsity),
            scope=SCOPE_FLAGS[str(args.scope)],
            seed=int(args.seed),
            trials=int(args.trials),
            pretrain_iterations=int(args.pretrain_iters),
            loss_weights=weights,
            eval_pairs=int(args.eval_pairs),
            eval_batch_size=int(args.eval_batch_size),
            image_size=int(args.size),
        )
    except KeyError as exc:
        raise ConfigError(f"unknown scope {args.scope!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _check_data(args):
    if args.data != "synthetic" and not os.path.isdir(args.data):
        raise FileNotFoundError(f"data folder does not exist: {args.data}")


def _stream(args, seed, size):
    if args.data == "synthetic":
        return DatasetStream("synthetic", "train", size, seed)
    return DatasetStream("folder", "train", size, seed, folder=args.data)


def _worker_cap():
    raw = os.environ.get("STLTH_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"STLTH_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError(f"STLTH_THREADS must be >= 1, got {cap}")
    return cap


# ---------------------------------------------------------------------------
# Output directory plumbing
# ---------------------------------------------------------------------------


def _prepare_out(args, dests):
    os.makedirs(args.out, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k in dests[args.command] or k == "command"}
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return args.out


def _write_seed_manifest(out, base_seed, trials):
    manifest = {
        "base_seed": base_seed,
        "trial_seeds": [derive_seed(base_seed, 100, t) for t in range(trials)],
        "derivations": {
            "trial": "derive_seed(base, 100, trial)",
            "pretrain_encoder": "derive_seed(trial_seed, 1)",
            "model_init": "derive_seed(trial_seed, 2)",
            "random_reinit": "derive_seed(trial_seed, 3, round)",
            "random_prune": "derive_seed(trial_seed, 4, round)",
        },
    }
    with open(os.path.join(out, "seeds.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


def _fmt(value, decimals=8):
    return f"{value:.{decimals}f}"


def _fmt_percent(sparsity):
    return f"{sparsity * 100:.4f}"


def _verdict(matching):
    return "matching" if matching else "not_matching"


def _e_best_formatted(e_best, best_sparsity):
    return f"{e_best:.4f}({best_sparsity * 100:.1f}%)"


# ---------------------------------------------------------------------------
# Shared record shaping
# ---------------------------------------------------------------------------


def _record_rows(trial, result):
    """Round-indexed rows (dense baseline as round 0) from one ladder run."""
    rows = [{
        "trial": trial, "round": 0, "sparsity": 0.0,
        "content_error": result.baseline.content_error,
        "style_error": result.baseline.style_error,
        "total": result.baseline.total, "matching": True,
        "wall_seconds": result.dense_wall_seconds,
    }]
    for record in result.records:
        rows.append({
            "trial": trial, "round": record.round_index,
            "sparsity": record.sparsity,
            "content_error": record.report.content_error,
            "style_error": record.report.style_error,
            "total": record.report.total, "matching": record.matching,
            "wall_seconds": record.wall_seconds,
        })
    return rows


def _summarize(rows):
    """Best sparse error and the largest matching sparsity of one curve."""
    sparse = [r for r in rows if r["round"] > 0]
    if not sparse:
        raise ValueError("no pruning rounds to summarize")
    best = min(sparse, key=lambda r: r["total"])
    matched = [r["sparsity"] for r in sparse if r["matching"]]
    return {
        "e_best": best["total"],
        "best_sparsity": best["sparsity"],
        "s_extreme": max(matched) if matched else 0.0,
    }


def _mean_curve(all_rows, trials):
    """Per-round mean errors across trials; the verdict compares means."""
    rounds = sorted({r["round"] for r in all_rows})
    baseline_mean = np.mean([r["total"] for r in all_rows if r["round"] == 0])
    curve = []
    for i in rounds:
        batch = [r for r in all_rows if r["round"] == i]
        if len(batch) != trials:
            raise ValueError(f"round {i} has {len(batch)} rows, "
                             f"expected one per trial ({trials})")
        mean_total = float(np.mean([r["total"] for r in batch]))
        curve.append({
            "round": i,
            "sparsity": float(np.mean([r["sparsity"] for r in batch])),
            "content_error": float(np.mean([r["content_error"] for r in batch])),
            "style_error": float(np.mean([r["style_error"] for r in batch])),
            "total": mean_total,
            "matching": bool(mean_total <= baseline_mean),
        })
    return curve


def _curve_summary_rows(curve):
    return [{"round": c["round"], "total": c["total"],
             "sparsity": c["sparsity"], "matching": c["matching"]}
            for c in curve]


def _summary_csv_row(label, summary):
    return {
        "trial": label,
        "e_best": _fmt(summary["e_best"]),
        "best_sparsity": _fmt_percent(summary["best_sparsity"]),
        "s_extreme": _fmt_percent(summary["s_extreme"]),
        "e_best_formatted": _e_best_formatted(summary["e_best"],
                                              summary["best_sparsity"]),
    }


def _format_round_rows(rows):
    return [{
        "trial": r["trial"], "round": r["round"],
        "sparsity": _fmt_percent(r["sparsity"]),
        "content_error": _fmt(r["content_error"]),
        "style_error": _fmt(r["style_error"]),
        "total": _fmt(r["total"]),
        "matching_verdict": _verdict(r["matching"]),
        "wall_seconds": _fmt(r["wall_seconds"], 3),
    } for r in rows]


# ---------------------------------------------------------------------------
# Trial workers (top-level so they can cross process boundaries)
# ---------------------------------------------------------------------------


def _trial_stream(config, data_path):
    if data_path == "synthetic":
        return None  # the run builds its own synthetic stream
    return DatasetStream("folder", "train", config.image_size, config.seed,
                         folder=data_path)


def _imp_trial(trial, config, data_path, masks_dir):
    trial_config = replace(config, seed=derive_seed(config.seed, 100, trial))
    result = imp_run(trial_config, _trial_stream(trial_config, data_path))
    if masks_dir:
        for record in result.records:
            save_mask(record.mask, os.path.join(
                masks_dir, f"trial{trial}_round{record.round_index}.mask"))
    return _record_rows(trial, result)


def _compare_trial(trial, config, strategies, data_path, masks_dir):
    trial_config = replace(config, seed=derive_seed(config.seed, 100, trial))
    result = compare_strategies(trial_config,
                                _trial_stream(trial_config, data_path),
                                strategies=strategies)
    rows = [{
        "trial": trial, "strategy": "dense", "round": 0, "sparsity": 0.0,
        "rewind_iteration": "n/a", "seed": trial_config.seed,
        "content_error": result.baseline.content_error,
        "style_error": result.baseline.style_error,
        "total": result.baseline.total, "matching": True,
        "wall_seconds": result.dense_wall_seconds,
    }]
    for record in result.records:
        rows.append({
            "trial": trial, "strategy": record.strategy,
            "round": record.round_index, "sparsity": record.sparsity,
            "rewind_iteration": ("n/a" if record.strategy == "fp"
                                 else trial_config.rewind_iteration),
            "seed": record.seed,
            "content_error": record.report.content_error,
            "style_error": record.report.style_error,
            "total": record.report.total, "matching": record.matching,
            "wall_seconds": record.wall_seconds,
        })
        if masks_dir:
            save_mask(record.mask, os.path.join(
                masks_dir,
                f"trial{trial}_{record.strategy}_round{record.round_index}.mask"))
    return rows


def _fan_out(worker, n_trials, *args):
    cap = _worker_cap()
    if cap == 1 or n_trials == 1:
        return [worker(t, *args) for t in range(n_trials)]
    with ProcessPoolExecutor(max_workers=min(cap, n_trials)) as pool:
        futures = [pool.submit(worker, t, *args) for t in range(n_trials)]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, dests):
    _require(args, "out")
    config = _experiment_config(args)
    _check_data(args)
    out = _prepare_out(args, dests)
    _write_seed_manifest(out, config.seed, trials=1)
    data = _stream(args, config.seed, config.image_size)

    judge = pretrain_encoder_reconstruction(
        data, config.pretrain_iterations, derive_seed(config.seed, 1),
        kind=config.kind, batch_size=config.batch_size,
        learning_rate=config.learning_rate)
    judge.set_trainable(False)

    params = init_parameters(config.kind, derive_seed(config.seed, 2))
    if args.mode == "frozen":
        # reuse the reconstruction-pretrained encoder and keep it fixed
        for e in judge:
            if e.tag == "encoder":
                params.get(e.name).data[...] = e.tensor.data
        params.set_trainable(False, tag="encoder")

    start = time.perf_counter()
    checkpoints = train(params, data, config.iterations,
                        checkpoint_at={config.iterations}, judge=judge,
                        weights=config.loss_weights,
                        batch_size=config.batch_size,
                        learning_rate=config.learning_rate)
    wall = time.perf_counter() - start

    yardstick = params.copy()
    yardstick.set_trainable(False)
    report = average_test_error(
        params, None, yardstick,
        test_pair_batches(data, config.eval_pairs, config.eval_batch_size,
                          config.seed))
    save_checkpoint(checkpoints[0], os.path.join(out, "model.ckpt"))
    _write_csv(os.path.join(out, "train.csv"), TRAIN_COLUMNS, [{
        "model": config.kind.value, "mode": args.mode,
        "iterations": config.iterations, "seed": config.seed,
        "sparsity": _fmt_percent(0.0),
        "content_error": _fmt(report.content_error),
        "style_error": _fmt(report.style_error),
        "total": _fmt(report.total),
        "wall_seconds": _fmt(wall, 3),
    }])
    log.info("dense %s/%s: total=%.4f (%.1fs)", config.kind.value, args.mode,
             report.total, wall)
    return EXIT_OK


def cmd_imp(args, dests):
    _require(args, "out")
    config = _experiment_config(args)
    _check_data(args)
    out = _prepare_out(args, dests)
    _write_seed_manifest(out, config.seed, config.trials)
    masks_dir = os.path.join(out, "masks")
    os.makedirs(masks_dir, exist_ok=True)

    per_trial = _fan_out(_imp_trial, config.trials, config, args.data,
                         masks_dir)
    all_rows = [row for rows in per_trial for row in rows]
    _write_csv(os.path.join(out, "rounds.csv"), ROUND_COLUMNS,
               _format_round_rows(all_rows))

    summaries = [_summary_csv_row(str(trial), _summarize(rows))
                 for trial, rows in enumerate(per_trial)]
    curve = _mean_curve(all_rows, config.trials)
    mean_summary = _summarize(_curve_summary_rows(curve))
    summaries.append(_summary_csv_row("mean", mean_summary))
    _write_csv(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, summaries)
    _write_csv(os.path.join(out, "mean_curve.csv"), CURVE_COLUMNS, [{
        "round": c["round"], "sparsity": _fmt_percent(c["sparsity"]),
        "content_error": _fmt(c["content_error"]),
        "style_error": _fmt(c["style_error"]), "total": _fmt(c["total"]),
        "matching_verdict": _verdict(c["matching"]),
    } for c in curve])
    if args.svg:
        _write_svg(os.path.join(out, "curves.svg"), {"imp": curve})
    log.info("extreme matching sparsity (mean curve): %s%%",
             _fmt_percent(mean_summary["s_extreme"]))
    return EXIT_OK


def cmd_compare(args, dests):
    _require(args, "out")
    config = _experiment_config(args)
    strategies = _strategies(args)
    _check_data(args)
    out = _prepare_out(args, dests)
    _write_seed_manifest(out, config.seed, config.trials)
    masks_dir = os.path.join(out, "masks")
    os.makedirs(masks_dir, exist_ok=True)

    per_trial = _fan_out(_compare_trial, config.trials, config, strategies,
                         args.data, masks_dir)
    all_rows = [row for rows in per_trial for row in rows]

    def fmt_rows(rows):
        return [{
            "trial": r["trial"], "strategy": r["strategy"],
            "round": r["round"], "sparsity": _fmt_percent(r["sparsity"]),
            "rewind_iteration": r["rewind_iteration"], "seed": r["seed"],
            "content_error": _fmt(r["content_error"]),
            "style_error": _fmt(r["style_error"]), "total": _fmt(r["total"]),
            "matching_verdict": _verdict(r["matching"]),
            "wall_seconds": _fmt(r["wall_seconds"], 3),
        } for r in rows]

    for name in strategies:
        rows = [r for r in all_rows if r["strategy"] == name]
        _write_csv(os.path.join(out, f"strategy_{name}.csv"), STRATEGY_COLUMNS,
                   fmt_rows(rows))
    merged = sorted(all_rows,
                    key=lambda r: (r["trial"], r["strategy"] != "dense",
                                   r["strategy"], r["round"]))
    _write_csv(os.path.join(out, "merged.csv"), STRATEGY_COLUMNS,
               fmt_rows(merged))

    table = [{
        "strategy": "dense", "rewind_iteration": "n/a",
        "e_best_formatted": _e_best_formatted(
            float(np.mean([r["total"] for r in all_rows if r["round"] == 0])),
            0.0),
        "s_extreme": "n/a",
    }]
    curves = {}
    for name in strategies:
        rows = [r for r in all_rows if r["strategy"] in (name, "dense")]
        curve = _mean_curve(rows, config.trials)
        curves[name] = curve
        summary = _summarize(_curve_summary_rows(curve))
        table.append({
            "strategy": name,
            "rewind_iteration": ("n/a" if name == "fp"
                                 else config.rewind_iteration),
            "e_best_formatted": _e_best_formatted(summary["e_best"],
                                                  summary["best_sparsity"]),
            "s_extreme": _fmt_percent(summary["s_extreme"]),
        })
    _write_csv(os.path.join(out, "table.csv"), TABLE_COLUMNS, table)
    if args.svg:
        _write_svg(os.path.join(out, "curves.svg"), curves)
    return EXIT_OK


def cmd_rewind_sweep(args, dests):
    _require(args, "out")
    config = _experiment_config(args)
    _check_data(args)
    out = _prepare_out(args, dests)
    _write_seed_manifest(out, config.seed, config.trials)

    sweep_rows = []
    extremes = {}
    for fraction in REWIND_FRACTIONS:
        iteration = round(fraction * config.iterations)
        ratio_config = replace(config, rewind_iteration=iteration)
        masks_dir = os.path.join(out, "masks", f"rewind{int(fraction * 100)}")
        os.makedirs(masks_dir, exist_ok=True)
        per_trial = _fan_out(_imp_trial, config.trials, ratio_config,
                             args.data, masks_dir)
        all_rows = [row for rows in per_trial for row in rows]
        for trial, rows in enumerate(per_trial):
            row = _summary_csv_row(str(trial), _summarize(rows))
            row.update({"rewind_fraction": f"{fraction:.1f}",
                        "rewind_iteration": iteration})
            sweep_rows.append(row)
        curve = _mean_curve(all_rows, config.trials)
        mean_summary = _summarize(_curve_summary_rows(curve))
        extremes[fraction] = mean_summary["s_extreme"]
        row = _summary_csv_row("mean", mean_summary)
        row.update({"rewind_fraction": f"{fraction:.1f}",
                    "rewind_iteration": iteration})
        sweep_rows.append(row)
        log.info("rewind %.0f%%: extreme matching sparsity %s%%",
                 fraction * 100, _fmt_percent(mean_summary["s_extreme"]))
    _write_csv(os.path.join(out, "sweep.csv"), SWEEP_COLUMNS, sweep_rows)

    spread = max(extremes.values()) - min(extremes.values())
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump({"s_extreme_by_fraction":
                   {f"{k:.1f}": v for k, v in extremes.items()},
                   "s_extreme_spread": spread}, fh, indent=2)
        fh.write("\n")
    log.info("extreme-sparsity spread across rewind ratios: %.4f", spread)
    return EXIT_OK


def _compatible_size(path, levels):
    """Largest model-compatible square size for an image file."""
    div = 2 ** (levels - 1)
    if path.lower().endswith(".ppm"):
        from .data import _read_ppm
        h, w = _read_ppm(path).shape[:2]
    elif path.lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:
            raise ConfigError(f"cannot measure {path}: PNG support needs "
                              "Pillow; pass --size explicitly") from exc
        with Image.open(path) as im:
            w, h = im.size
    else:
        raise ConfigError(f"unsupported image format: {path}")
    side = (min(h, w) // div) * div
    if side < 2 * div:
        raise ConfigError(f"content image {path} is too small: needs at "
                          f"least {2 * div}x{2 * div} pixels")
    return side


def cmd_stylize(args, dests):
    _require(args, "out", "checkpoint", "content", "style")
    try:
        checkpoint = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    kind = ModelKind(checkpoint.kind)
    params = init_parameters(kind, 0)
    try:
        params.load_state(checkpoint.params_state)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not fit a {kind.value} model: "
                          f"{exc}") from exc
    if args.mask:
        # hard-zero the pruned weights; also validates mask/model agreement
        apply_mask(params, load_mask(args.mask))

    size = int(args.size) or _compatible_size(args.content,
                                              len(ENCODER_LEVELS[kind]))
    content = load_image(args.content, size)
    style = load_image(args.style, size)

    from .models import stylize as run_stylize
    from .tensor import Tensor
    out_image = run_stylize(Tensor(content[None]), Tensor(style[None]), params)

    out = _prepare_out(args, dests)
    target = os.path.join(out, f"stylized.{args.format}")
    image = out_image.data[0]
    if args.format == "ppm":
        write_ppm(target, image)
    else:
        try:
            from PIL import Image
        except ImportError as exc:
            raise ConfigError("writing PNG needs Pillow; "
                              "use --format ppm") from exc
        pixels = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        Image.fromarray(pixels.transpose(1, 2, 0)).save(target)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump({"checkpoint": args.checkpoint, "mask": args.mask,
                   "content": args.content, "style": args.style,
                   "size": size, "output": target}, fh, indent=2)
        fh.write("\n")
    log.info("wrote %s (%dx%d)", target, size, size)
    return EXIT_OK


# ---------------------------------------------------------------------------
# SVG chart (error vs remaining weights, no external tooling)
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _write_svg(path, curves):
    """Line chart of mean total error vs percent of remaining weights."""
    width, height, pad = 640, 420, 56
    points = [(100.0 * (1.0 - c["sparsity"]), c["total"])
              for curve in curves.values() for c in curve]
    if not points:
        return
    ymin = min(p[1] for p in points)
    ymax = max(p[1] for p in points)
    if ymax - ymin < 1e-12:
        ymax = ymin + 1.0

    def sx(remaining):  # x axis runs 100% -> 0%, the pruning direction
        return pad + (100.0 - remaining) / 100.0 * (width - 2 * pad)

    def sy(err):
        return height - pad - (err - ymin) / (ymax - ymin) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13">remaining weights (%)</text>',
        f'<text x="16" y="{height / 2:.0f}" font-size="13" '
        f'transform="rotate(-90 16 {height / 2:.0f})" '
        f'text-anchor="middle">mean total error</text>',
    ]
    for tick in (100, 80, 60, 40, 20, 0):
        x = sx(tick)
        parts.append(f'<line x1="{x:.1f}" y1="{height - pad}" x2="{x:.1f}" '
                     f'y2="{height - pad + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{height - pad + 20}" '
                     f'text-anchor="middle" font-size="11">{tick}</text>')
    for frac in (0.0, 0.5, 1.0):
        value = ymin + frac * (ymax - ymin)
        y = sy(value)
        parts.append(f'<line x1="{pad - 5}" y1="{y:.1f}" x2="{pad}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{pad - 8}" y="{y + 4:.1f}" '
                     f'text-anchor="end" font-size="11">{value:.3f}</text>')
    for i, (name, curve) in enumerate(sorted(curves.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(
            f"{sx(100.0 * (1.0 - c['sparsity'])):.1f},{sy(c['total']):.1f}"
            for c in curve)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 16 * i + 4}" '
                     f'font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "train": cmd_train,
    "imp": cmd_imp,
    "compare": cmd_compare,
    "rewind-sweep": cmd_rewind_sweep,
    "stylize": cmd_stylize,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, by_name, dests = build_parser()
    try:
        _apply_config_file(by_name, dests, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(asctime)s %(name)s %(message)s")
        return _HANDLERS[args.command](args, dests)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
