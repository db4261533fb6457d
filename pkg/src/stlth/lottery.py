"""Subnetwork search by iterative magnitude pruning with weight rewinding.

The experiment loop: train the dense model while snapshotting early-iteration
checkpoints, then repeatedly (1) prune the smallest surviving weights
globally, (2) rewind the survivors to their checkpoint values, and (3) retrain
for the full budget and score the result on held-out pairs. Controls reuse the
same dense round: one-shot pruning to a grid sparsity, random masks of equal
size, re-initialized winners, and pruning with finetuning instead of rewind.

Two frozen registries accompany every run: the *judge* (a reconstruction-
pretrained encoder that anchors the training loss) and the *yardstick* (a copy
of the trained dense encoder that defines the error metric's feature space for
every subnetwork in the run).
"""

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetStream, test_pair_images, test_pair_indices
from .metrics import ErrorReport, LossWeights, average_test_error, training_loss
from .models import ModelKind, init_parameters, pretrain_encoder_reconstruction
from .pruning import (ALL_SCOPES, PruningMask, apply_mask, global_magnitude_prune,
                      one_shot_prune, random_prune, schedule_sparsity)
from .tensor import ComputationTape

CHECKPOINT_MAGIC = b"STLTH-CKPT"
CHECKPOINT_VERSION = 1
STRATEGIES = ("imp", "omp", "rp", "rt", "fp")

log = logging.getLogger(__name__)


def derive_seed(*parts):
    """Deterministic 63-bit child seed from integer parts."""
    ss = np.random.SeedSequence(list(parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class Adam:
    """Adam with bias correction; moments live on the optimizer, not the tensors.

    A weight whose gradient is exactly zero every step (a pruned weight under
    an in-graph mask) accumulates exactly-zero moments and receives an
    exactly-zero update, so pruned weights cannot drift.
    """

    def __init__(self, tensors, learning_rate=1e-4, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.tensors = list(tensors)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.moment1 = [np.zeros_like(t.data) for t in self.tensors]
        self.moment2 = [np.zeros_like(t.data) for t in self.tensors]
        self.step_count = 0
        self._slot = {id(t): i for i, t in enumerate(self.tensors)}

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for i, t in enumerate(self.tensors):
            g = t.grad
            if g is None:
                continue
            m, v = self.moment1[i], self.moment2[i]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            t.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def scale_moments(self, tensor, keep):
        """Multiply moment entries by a {0,1} pattern (defensive re-zeroing:
        survivors multiply by 1.0 bit-exactly, pruned entries land on +0.0)."""
        i = self._slot.get(id(tensor))
        if i is None:
            return
        np.multiply(self.moment1[i], keep, out=self.moment1[i])
        np.multiply(self.moment2[i], keep, out=self.moment2[i])

    def state(self, names):
        """Moment arrays keyed by parameter name (parallel to the ctor list)."""
        if len(names) != len(self.tensors):
            raise ValueError("names list does not match optimizer tensors")
        out = {"step": self.step_count, "moment1": {}, "moment2": {}}
        for name, m, v in zip(names, self.moment1, self.moment2):
            out["moment1"][name] = m.copy()
            out["moment2"][name] = v.copy()
        return out

    def load_state(self, state, names):
        self.step_count = int(state["step"])
        for i, name in enumerate(names):
            self.moment1[i][...] = state["moment1"][name]
            self.moment2[i][...] = state["moment2"][name]


@dataclass
class Checkpoint:
    """Everything needed to resume (or rewind to) iteration `iteration`."""

    kind: str
    iteration: int
    params_state: dict
    optimizer_step: int
    moment1: dict
    moment2: dict
    data_state: dict


def _capture(iteration, params, opt, names, data):
    opt_state = opt.state(names)
    return Checkpoint(kind=params.kind.value, iteration=iteration,
                      params_state=params.state(),
                      optimizer_step=opt_state["step"],
                      moment1=opt_state["moment1"], moment2=opt_state["moment2"],
                      data_state=data.state())


def train(params, data, iterations, mask=None, checkpoint_at=(), *, judge,
          weights=LossWeights(), batch_size=8, learning_rate=1e-4,
          progress=None, audit=None):
    """Adam on the stylization loss for `iterations` batches, in place.

    A checkpoint at index r snapshots parameters, optimizer moments, and the
    data cursor immediately before batch r is drawn (index `iterations` means
    after the final step). When a mask is given, masked weights are re-zeroed
    and their optimizer moments cleared after every step, so the subnetwork
    structure is invariant under training. A non-finite loss or gradient
    aborts with the failing iteration in the message.

    `audit`, when given, is called as audit(i, params, optimizer) after each
    completed update so per-step invariants can be checked from outside;
    `progress` is called as progress(i, loss_value).
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    want = set(checkpoint_at)
    bad = sorted(r for r in want if not 0 <= r <= iterations)
    if bad:
        raise ValueError(f"checkpoint indices {bad} outside [0, {iterations}]")

    trainable = [e for e in params if e.tensor.requires_grad]
    tensors = [e.tensor for e in trainable]
    names = [e.name for e in trainable]
    opt = Adam(tensors, learning_rate)

    masked_fields = None
    if mask is not None:
        apply_mask(params, mask)
        masked_fields = [(e.tensor, mask.get(e.name).astype(e.tensor.dtype))
                         for e in params.prunable_entries()]

    checkpoints = []
    for i in range(iterations):
        if i in want:
            checkpoints.append(_capture(i, params, opt, names, data))
        contents, styles = data.next_batch(batch_size)
        try:
            with ComputationTape() as tape:
                loss = training_loss(params, mask, judge, contents, styles, weights)
            for t in tensors:
                t.zero_grad()
            tape.backward(loss)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"training aborted at iteration {i}: {exc}") from exc
        opt.step()
        if masked_fields is not None:
            for t, keep in masked_fields:
                np.multiply(t.data, keep, out=t.data)
                opt.scale_moments(t, keep)
        if audit is not None:
            audit(i, params, opt)
        if progress is not None:
            progress(i, float(loss.data))
    if iterations in want:
        checkpoints.append(_capture(iterations, params, opt, names, data))
    return checkpoints


def rewind(params, checkpoint, mask):
    """Restore surviving weights to their checkpoint values, pruned ones to 0.

    Optimizer state is deliberately not restored: a rewound subnetwork trains
    under a freshly initialized optimizer.
    """
    if ModelKind(checkpoint.kind) is not params.kind:
        raise ValueError(f"checkpoint is for a {checkpoint.kind!r} model, "
                         f"registry is {params.kind.value!r}")
    params.load_state(checkpoint.params_state)
    apply_mask(params, mask)


# ---------------------------------------------------------------------------
# Checkpoint container format ("STLTH-CKPT"): little-endian header, raw
# tensor payloads (parameters plus optimizer moments under optim.* names),
# and a trailing 8-byte checksum of all preceding bytes.
# ---------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"cannot serialize dtype {arr.dtype} for {name!r}")
    encoded = name.encode()
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_CODE_DTYPES[code], copy=False).tobytes()


def save_checkpoint(checkpoint, path):
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    kind = checkpoint.kind.encode()
    blob += struct.pack("<H", len(kind)) + kind
    blob += struct.pack("<QQ", checkpoint.iteration, checkpoint.optimizer_step)
    state_json = json.dumps(checkpoint.data_state, sort_keys=True).encode()
    blob += struct.pack("<I", len(state_json)) + state_json

    tensors = list(checkpoint.params_state.items())
    tensors += [(f"optim.m.{n}", a) for n, a in checkpoint.moment1.items()]
    tensors += [(f"optim.v.{n}", a) for n, a in checkpoint.moment2.items()]
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        blob += _pack_tensor(name, arr)
    blob += hashlib.blake2b(bytes(blob), digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 10 or not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise ValueError(f"checkpoint file checksum mismatch: {path}")

    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}: {path}")
    (klen,) = struct.unpack_from("<H", body, off)
    off += 2
    kind = body[off:off + klen].decode()
    off += klen
    iteration, optimizer_step = struct.unpack_from("<QQ", body, off)
    off += 16
    (jlen,) = struct.unpack_from("<I", body, off)
    off += 4
    data_state = json.loads(body[off:off + jlen].decode())
    off += jlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4

    params_state, moment1, moment2 = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        code, rank = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        dtype = _CODE_DTYPES[code]
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype=dtype, count=size, offset=off)
        off += size * dtype.itemsize
        arr = np.ascontiguousarray(arr.reshape(shape), dtype=dtype.newbyteorder("="))
        if name.startswith("optim.m."):
            moment1[name[len("optim.m."):]] = arr
        elif name.startswith("optim.v."):
            moment2[name[len("optim.v."):]] = arr
        else:
            params_state[name] = arr
    return Checkpoint(kind=kind, iteration=int(iteration),
                      params_state=params_state,
                      optimizer_step=int(optimizer_step),
                      moment1=moment1, moment2=moment2, data_state=data_state)


# ---------------------------------------------------------------------------
# Experiment configuration and records
# ---------------------------------------------------------------------------


@dataclass
class IMPConfig:
    kind: ModelKind = ModelKind.ADAIN
    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    rewind_iteration: int = 200
    prune_fraction: float = 0.2
    target_sparsity: float = 0.892
    scope: tuple = ALL_SCOPES
    seed: int = 0
    trials: int = 3
    pretrain_iterations: int = 400
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_pairs: int = 200
    eval_batch_size: int = 10
    image_size: int = 64
    max_rounds: int = 0  # 0 = derive from the target sparsity

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if self.iterations <= 0:
            raise ValueError(f"iterations must be > 0, got {self.iterations}")
        if not 0 <= self.rewind_iteration <= self.iterations:
            raise ValueError(f"rewind_iteration {self.rewind_iteration} outside "
                             f"[0, {self.iterations}]")
        if not 0 < self.prune_fraction < 1:
            raise ValueError(f"prune_fraction must be in (0,1), got {self.prune_fraction}")
        if not 0 < self.target_sparsity < 1:
            raise ValueError(f"target_sparsity must be in (0,1), got {self.target_sparsity}")
        self.scope = tuple(self.scope)
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.eval_pairs < 1:
            raise ValueError(f"eval_pairs must be >= 1, got {self.eval_pairs}")


@dataclass
class TicketRecord:
    """One evaluated subnetwork: its mask, errors, and provenance."""

    strategy: str
    round_index: int
    sparsity: float          # fraction pruned across all prunable tensors
    scoped_sparsity: float   # fraction pruned within the pruning scope
    mask: PruningMask
    report: ErrorReport
    matching: bool           # total error <= dense baseline's total
    wall_seconds: float
    seed: int


@dataclass
class DensePhase:
    """Shared first stage of every experiment: judge, dense training, yardstick."""

    judge: object
    params: object
    checkpoint: Checkpoint
    yardstick: object
    dense_state: dict
    baseline: ErrorReport
    wall_seconds: float


@dataclass
class ImpResult:
    config: IMPConfig
    baseline: ErrorReport
    records: list
    dense_wall_seconds: float


@dataclass
class ComparisonResult:
    config: IMPConfig
    baseline: ErrorReport
    records: list
    dense_wall_seconds: float


def test_pair_batches(data, n_pairs, batch_size, seed):
    """Held-out (content, style) evaluation batches matching the stream's source."""
    batches = []
    if data.source == "synthetic":
        pairs = test_pair_indices(seed, n_pairs=n_pairs)
        contents, styles = test_pair_images(data.seed, pairs, data.size)
    else:
        held_out = DatasetStream(source="folder", split="test", size=data.size,
                                 seed=seed, folder=data._folder)
        contents, styles = held_out.next_batch(n_pairs)
    for lo in range(0, len(contents), batch_size):
        batches.append((contents[lo:lo + batch_size], styles[lo:lo + batch_size]))
    return batches


def train_subnetwork(params, config, data, judge, mask):
    """Train an already-rewound subnetwork for the full budget; returns wall time."""
    start = time.perf_counter()
    train(params, data, config.iterations, mask=mask, judge=judge,
          weights=config.loss_weights, batch_size=config.batch_size,
          learning_rate=config.learning_rate)
    return time.perf_counter() - start


def score_subnetwork(mask, params, config, data, yardstick):
    """Average stylization error of the current weights on held-out pairs."""
    return average_test_error(
        params, mask, yardstick,
        test_pair_batches(data, config.eval_pairs, config.eval_batch_size,
                          config.seed))


def evaluate_subnetwork(mask, params, config, data, judge, yardstick):
    """Train an already-rewound subnetwork for the full budget and score it."""
    wall = train_subnetwork(params, config, data, judge, mask)
    report = score_subnetwork(mask, params, config, data, yardstick)
    return report, wall


def _dense_phase(config, data):
    start = time.perf_counter()
    judge = pretrain_encoder_reconstruction(
        data, config.pretrain_iterations, derive_seed(config.seed, 1),
        kind=config.kind, batch_size=config.batch_size,
        learning_rate=config.learning_rate)
    judge.set_trainable(False)
    log.info("pretrained reconstruction encoder: %d iterations, %.1fs",
             config.pretrain_iterations, time.perf_counter() - start)

    params = init_parameters(config.kind, derive_seed(config.seed, 2))
    start = time.perf_counter()
    checkpoints = train(params, data, config.iterations,
                        checkpoint_at={config.rewind_iteration}, judge=judge,
                        weights=config.loss_weights, batch_size=config.batch_size,
                        learning_rate=config.learning_rate)
    wall = time.perf_counter() - start

    yardstick = params.copy()
    yardstick.set_trainable(False)
    baseline = average_test_error(
        params, None, yardstick,
        test_pair_batches(data, config.eval_pairs, config.eval_batch_size,
                          config.seed))
    log.info("dense round: content=%.4f style=%.4f total=%.4f (%.1fs)",
             baseline.content_error, baseline.style_error, baseline.total, wall)
    return DensePhase(judge=judge, params=params, checkpoint=checkpoints[0],
                      yardstick=yardstick, dense_state=params.state(),
                      baseline=baseline, wall_seconds=wall)


def _round_bound(config, mask):
    """Number of pruning rounds needed to reach the overall sparsity target."""
    _, scoped_total = mask.counts(config.scope)
    _, total = mask.counts()
    reachable = scoped_total / total
    if config.target_sparsity >= reachable - 1e-9:
        raise ValueError(
            f"target sparsity {config.target_sparsity:.3f} is unreachable: scope "
            f"{list(config.scope)} holds only {reachable:.3f} of the weights")
    needed = math.ceil(math.log(1.0 - config.target_sparsity / reachable)
                       / math.log(1.0 - config.prune_fraction))
    return config.max_rounds or needed + 2


def _record(strategy, round_index, mask, config, report, baseline, wall, seed):
    record = TicketRecord(strategy=strategy, round_index=round_index,
                          sparsity=mask.sparsity(),
                          scoped_sparsity=mask.sparsity(config.scope),
                          mask=mask, report=report,
                          matching=report.total <= baseline.total,
                          wall_seconds=wall, seed=seed)
    log.info("%s round %d: sparsity=%.4f (scoped %.4f) total=%.4f "
             "matching=%s (%.1fs)", strategy, round_index, record.sparsity,
             record.scoped_sparsity, report.total, record.matching, wall)
    return record


def _training_stream(config):
    return DatasetStream(source="synthetic", split="train",
                         size=config.image_size, seed=config.seed)


def imp_run(config, data=None):
    """One full pruning ladder: dense round, then prune/rewind/retrain to target.

    Returns the dense baseline and, per round, the evaluated subnetwork record;
    the ladder stops once overall sparsity reaches the configured target.
    """
    data = data if data is not None else _training_stream(config)
    phase = _dense_phase(config, data)
    params = phase.params
    mask = PruningMask.ones_like(params, seed=config.seed)
    bound = _round_bound(config, mask)

    records = []
    for round_index in range(1, bound + 1):
        mask = global_magnitude_prune(params, mask, config.prune_fraction,
                                      config.scope)
        rewind(params, phase.checkpoint, mask)
        data.load_state(phase.checkpoint.data_state)
        report, wall = evaluate_subnetwork(mask, params, config, data,
                                           phase.judge, phase.yardstick)
        records.append(_record("imp", round_index, mask, config, report,
                               phase.baseline, wall, config.seed))
        # per-round floor() rounding leaves the reached sparsity a hair under
        # the schedule value (deficit < rounds/total), so compare with slack
        # far above that but far below the ~1% gap to the next grid point
        if mask.sparsity() >= config.target_sparsity - 1e-4:
            break
    return ImpResult(config=config, baseline=phase.baseline, records=records,
                     dense_wall_seconds=phase.wall_seconds)


def compare_strategies(config, data=None, strategies=STRATEGIES, grid_rounds=None,
                       strategy_rounds=None):
    """Evaluate pruning strategies on a shared dense round.

    `grid_rounds` selects the schedule points (round indices) at which
    strategies are scored; `strategy_rounds` overrides the selection per
    strategy (e.g. ``{"rt": [4]}``). The iterative strategies (imp, fp) train
    through every round up to the largest one they need, but only pay the
    held-out evaluation at the requested points.
    """
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ValueError(f"unknown strategies {sorted(unknown)}; valid: {list(STRATEGIES)}")
    strategy_rounds = dict(strategy_rounds or {})
    unknown = set(strategy_rounds) - set(strategies)
    if unknown:
        raise ValueError(f"strategy_rounds given for unrequested strategies "
                         f"{sorted(unknown)}")
    data = data if data is not None else _training_stream(config)
    phase = _dense_phase(config, data)
    params = phase.params
    ones = PruningMask.ones_like(params, seed=config.seed)
    bound = _round_bound(config, ones)
    grid = sorted(set(grid_rounds)) if grid_rounds else list(range(1, bound + 1))

    def rounds_for(name):
        rounds = sorted(set(strategy_rounds.get(name, grid)))
        if not rounds or rounds[0] < 1:
            raise ValueError(f"{name}: scoring rounds must be >= 1, got {rounds}")
        return rounds

    records = []
    imp_masks = {}
    need_ladder = "imp" in strategies or "rt" in strategies
    if need_ladder:
        imp_grid = rounds_for("imp") if "imp" in strategies else []
        rt_grid = rounds_for("rt") if "rt" in strategies else []
        mask = ones
        for i in range(1, max(imp_grid + rt_grid) + 1):
            mask = global_magnitude_prune(params, mask, config.prune_fraction,
                                          config.scope)
            imp_masks[i] = mask
            rewind(params, phase.checkpoint, mask)
            data.load_state(phase.checkpoint.data_state)
            wall = train_subnetwork(params, config, data, phase.judge, mask)
            if i in imp_grid:
                report = score_subnetwork(mask, params, config, data,
                                          phase.yardstick)
                records.append(_record("imp", i, mask, config, report,
                                       phase.baseline, wall, config.seed))

    if "omp" in strategies:
        for i in rounds_for("omp"):
            params.load_state(phase.dense_state)
            mask = one_shot_prune(params,
                                  schedule_sparsity(i, config.prune_fraction),
                                  config.scope)
            rewind(params, phase.checkpoint, mask)
            data.load_state(phase.checkpoint.data_state)
            report, wall = evaluate_subnetwork(mask, params, config, data,
                                               phase.judge, phase.yardstick)
            records.append(_record("omp", i, mask, config, report,
                                   phase.baseline, wall, config.seed))

    if "rp" in strategies:
        for i in rounds_for("rp"):
            mask = ones
            prune_seed = config.seed
            for j in range(1, i + 1):
                prune_seed = derive_seed(config.seed, 4, j)
                mask = random_prune(mask, config.prune_fraction, config.scope,
                                    prune_seed)
            rewind(params, phase.checkpoint, mask)
            data.load_state(phase.checkpoint.data_state)
            report, wall = evaluate_subnetwork(mask, params, config, data,
                                               phase.judge, phase.yardstick)
            records.append(_record("rp", i, mask, config, report,
                                   phase.baseline, wall, prune_seed))

    if "rt" in strategies:
        for i in rounds_for("rt"):
            mask = imp_masks[i]
            reinit_seed = derive_seed(config.seed, 3, i)
            fresh = init_parameters(config.kind, reinit_seed)
            params.load_state(fresh.state())
            apply_mask(params, mask)
            data.load_state(phase.checkpoint.data_state)
            report, wall = evaluate_subnetwork(mask, params, config, data,
                                               phase.judge, phase.yardstick)
            records.append(_record("rt", i, mask, config, report,
                                   phase.baseline, wall, reinit_seed))

    if "fp" in strategies:
        fp_grid = rounds_for("fp")
        params.load_state(phase.dense_state)
        mask = ones
        for i in range(1, fp_grid[-1] + 1):
            mask = global_magnitude_prune(params, mask, config.prune_fraction,
                                          config.scope)
            # finetune: keep the trained weights and the current data position
            wall = train_subnetwork(params, config, data, phase.judge, mask)
            if i in fp_grid:
                report = score_subnetwork(mask, params, config, data,
                                          phase.yardstick)
                records.append(_record("fp", i, mask, config, report,
                                       phase.baseline, wall, config.seed))

    return ComparisonResult(config=config, baseline=phase.baseline,
                            records=records, dense_wall_seconds=phase.wall_seconds)


def run_trials(config, runner=imp_run, **kwargs):
    """Run `config.trials` independent repetitions with derived seeds."""
    results = []
    for trial in range(config.trials):
        trial_config = replace(config, seed=derive_seed(config.seed, 100, trial))
        results.append(runner(trial_config, **kwargs))
    return results
