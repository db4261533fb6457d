"""Binary pruning masks, the geometric sparsity schedule, and mask builders.

A PruningMask holds one {0,1} uint8 field per prunable parameter tensor,
keyed by parameter name (the leading name component — encoder / transform /
decoder — is the submodule tag). Masks are immutable by convention: every
builder returns a new mask, and iterative builders only clear bits, so later
masks are always nested inside earlier ones.

Mask construction strategies: global magnitude pruning over the currently
surviving weights (the iterative and one-shot flavors) and uniform random
pruning of the same count. Re-initialization for random-ticket controls
re-draws parameters without touching the mask.
"""

import hashlib
import struct

import numpy as np

from .models import init_parameters
from .tensor import Tensor

ALL_SCOPES = ("encoder", "transform", "decoder")
MASK_MAGIC = b"STLTH-MASK"
MASK_VERSION = 1


def schedule_sparsity(round_index, prune_fraction=0.2):
    """Cumulative sparsity after `round_index` rounds pruning `prune_fraction`
    of the surviving weights each round: 1 - (1-p)^i."""
    if not 0 < prune_fraction < 1:
        raise ValueError(f"prune_fraction must be in (0,1), got {prune_fraction}")
    if round_index < 0:
        raise ValueError(f"round_index must be >= 0, got {round_index}")
    return 1.0 - (1.0 - prune_fraction) ** round_index


def _tag_of(name):
    tag = name.split(".", 1)[0]
    if tag not in ALL_SCOPES:
        raise ValueError(f"mask entry {name!r} has no recognizable submodule prefix")
    return tag


def _validate_scope(scope):
    scope = frozenset(scope)
    unknown = scope - set(ALL_SCOPES)
    if unknown:
        raise ValueError(f"unknown scope entries {sorted(unknown)}; "
                         f"valid: {list(ALL_SCOPES)}")
    if not scope:
        raise ValueError("scope must name at least one submodule")
    return scope


class PruningMask:
    """Per-tensor binary fields identifying a subnetwork."""

    def __init__(self, masks, round_index=0, strategy="dense", seed=0):
        self.masks = {}
        for name, field in masks.items():
            _tag_of(name)
            arr = np.ascontiguousarray(field, dtype=np.uint8)
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ValueError(f"mask {name!r} has entries outside {{0,1}}")
            self.masks[name] = arr
        self.round_index = round_index
        self.strategy = strategy
        self.seed = seed
        self._float_cache = {}

    @classmethod
    def ones_like(cls, params, strategy="dense", seed=0):
        fields = {e.name: np.ones(e.tensor.shape, dtype=np.uint8)
                  for e in params.prunable_entries()}
        return cls(fields, round_index=0, strategy=strategy, seed=seed)

    def copy_fields(self):
        return {name: arr.copy() for name, arr in self.masks.items()}

    def get(self, name):
        return self.masks[name]

    def __contains__(self, name):
        return name in self.masks

    def names(self):
        return list(self.masks)

    def items(self):
        return self.masks.items()

    def weight_tensor(self, name, dtype):
        """Mask as a constant float Tensor for in-graph weight multiplication.
        Returns None for names without a mask (non-prunable parameters)."""
        if name not in self.masks:
            return None
        key = (name, np.dtype(dtype).str)
        cached = self._float_cache.get(key)
        if cached is None:
            cached = Tensor(self.masks[name].astype(dtype))
            self._float_cache[key] = cached
        return cached

    def counts(self, scope=None):
        """(surviving, total) over all fields, or only those in `scope` tags."""
        scope = _validate_scope(scope) if scope is not None else None
        ones = total = 0
        for name, arr in self.masks.items():
            if scope is not None and _tag_of(name) not in scope:
                continue
            ones += int(arr.sum())
            total += arr.size
        return ones, total

    def sparsity(self, scope=None):
        ones, total = self.counts(scope)
        if total == 0:
            return 0.0
        return 1.0 - ones / total

    def is_nested_in(self, other):
        """True when every surviving bit here also survives in `other`."""
        if set(self.masks) != set(other.masks):
            return False
        return all(np.all(other.masks[n][arr == 1] == 1)
                   for n, arr in self.masks.items())


def _scoped_survivors(params, current, scope):
    """Concatenated (|value|, name rank, flat position) of surviving scoped weights."""
    entries = sorted((e for e in params.prunable_entries() if e.tag in scope),
                     key=lambda e: e.name)
    abs_parts, rank_parts, pos_parts = [], [], []
    for rank, e in enumerate(entries):
        field = current.masks[e.name].reshape(-1)
        pos = np.flatnonzero(field)
        abs_parts.append(np.abs(e.tensor.data.reshape(-1)[pos]))
        rank_parts.append(np.full(pos.size, rank, dtype=np.int64))
        pos_parts.append(pos)
    if not entries:
        raise ValueError(f"no prunable tensors in scope {sorted(scope)}")
    return (entries, np.concatenate(abs_parts), np.concatenate(rank_parts),
            np.concatenate(pos_parts))


def _clear_positions(current, entries, ranks, positions, chosen, round_index,
                     strategy, seed):
    fields = current.copy_fields()
    for rank, e in enumerate(entries):
        pos = positions[chosen[ranks[chosen] == rank]]
        if pos.size:
            fields[e.name].reshape(-1)[pos] = 0
    return PruningMask(fields, round_index=round_index, strategy=strategy, seed=seed)


def global_magnitude_prune(params, current, fraction, scope=ALL_SCOPES):
    """Zero the floor(fraction * survivors) smallest-magnitude surviving weights.

    The threshold is global across all scoped tensors; ties are broken by
    (|value|, tensor name, flat index) so the result is platform-stable. The
    returned mask is nested inside `current`; out-of-scope fields are copied
    unchanged.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    scope = _validate_scope(scope)
    entries, absvals, ranks, positions = _scoped_survivors(params, current, scope)
    survivors = absvals.size
    if survivors == 0:
        raise ValueError("no surviving weights left to prune in scope "
                         f"{sorted(scope)}")
    k = int(np.floor(fraction * survivors))
    order = np.lexsort((positions, ranks, absvals))
    return _clear_positions(current, entries, ranks, positions, order[:k],
                            current.round_index + 1, "imp", current.seed)


def one_shot_prune(params, fraction_total, scope=ALL_SCOPES):
    """Single magnitude-pruning step from dense to the target fraction."""
    dense = PruningMask.ones_like(params, strategy="omp")
    mask = global_magnitude_prune(params, dense, fraction_total, scope)
    mask.strategy = "omp"
    return mask


def random_prune(current, fraction, scope=ALL_SCOPES, seed=0):
    """Zero the same count as magnitude pruning would, chosen uniformly."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    scope = _validate_scope(scope)
    names = sorted(n for n in current.masks if _tag_of(n) in scope)
    if not names:
        raise ValueError(f"no mask fields in scope {sorted(scope)}")
    pos_parts, rank_parts = [], []
    for rank, name in enumerate(names):
        pos = np.flatnonzero(current.masks[name].reshape(-1))
        pos_parts.append(pos)
        rank_parts.append(np.full(pos.size, rank, dtype=np.int64))
    positions = np.concatenate(pos_parts)
    ranks = np.concatenate(rank_parts)
    survivors = positions.size
    if survivors == 0:
        raise ValueError(f"no surviving weights left to prune in scope {sorted(scope)}")
    k = int(np.floor(fraction * survivors))
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = rng.choice(survivors, size=k, replace=False)

    fields = current.copy_fields()
    for rank, name in enumerate(names):
        pos = positions[chosen[ranks[chosen] == rank]]
        if pos.size:
            fields[name].reshape(-1)[pos] = 0
    return PruningMask(fields, round_index=current.round_index + 1,
                       strategy="rp", seed=seed)


def apply_mask(params, mask):
    """Zero every masked-out weight in place (exactly 0.0; idempotent)."""
    for e in params.prunable_entries():
        if e.name not in mask.masks:
            raise ValueError(f"mask is missing a field for {e.name!r}")
        field = mask.masks[e.name]
        if field.shape != e.tensor.shape:
            raise ValueError(f"mask shape {field.shape} != parameter {e.name} shape "
                             f"{tuple(e.tensor.shape)}")
        data = e.tensor.data
        data[...] = np.where(field.astype(bool), data, data.dtype.type(0))


def random_reinit(params, seed):
    """Fresh seed-determined parameter draw with the same architecture."""
    return init_parameters(params.kind, seed)


def save_mask(mask, path):
    """Write the little-endian STLTH-MASK container (see load_mask)."""
    blob = bytearray()
    blob += MASK_MAGIC
    blob += struct.pack("<H", MASK_VERSION)
    strategy = mask.strategy.encode()
    blob += struct.pack("<H", len(strategy)) + strategy
    blob += struct.pack("<Iqd", mask.round_index, mask.seed, mask.sparsity())
    blob += struct.pack("<I", len(mask.masks))
    for name, field in mask.masks.items():
        encoded = name.encode()
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", field.ndim)
        blob += struct.pack(f"<{field.ndim}I", *field.shape)
        blob += np.packbits(field.reshape(-1), bitorder="little").tobytes()
    digest = hashlib.blake2b(bytes(blob), digest_size=8).digest()
    blob += digest
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_mask(path):
    """Read a STLTH-MASK file back into a PruningMask, verifying the checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MASK_MAGIC) + 10 or blob[:len(MASK_MAGIC)] != MASK_MAGIC:
        raise ValueError(f"not a mask file (bad magic): {path}")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise ValueError(f"mask file checksum mismatch: {path}")

    off = len(MASK_MAGIC)
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != MASK_VERSION:
        raise ValueError(f"unsupported mask file version {version}: {path}")
    (slen,) = struct.unpack_from("<H", body, off)
    off += 2
    strategy = body[off:off + slen].decode()
    off += slen
    round_index, seed, _sparsity = struct.unpack_from("<Iqd", body, off)
    off += struct.calcsize("<Iqd")
    (count,) = struct.unpack_from("<I", body, off)
    off += 4

    fields = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        nbytes = (size + 7) // 8
        packed = np.frombuffer(body, dtype=np.uint8, count=nbytes, offset=off)
        off += nbytes
        bits = np.unpackbits(packed, count=size, bitorder="little")
        fields[name] = bits.reshape(shape)
    return PruningMask(fields, round_index=round_index, strategy=strategy, seed=seed)
