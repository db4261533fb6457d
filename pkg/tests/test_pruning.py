"""Pruning masks: schedule values, global magnitude selection, nesting, file IO."""

import math

import numpy as np
import pytest
from conftest import brute_force_prune, make_registry

from stlth.models import ModelKind, init_parameters
from stlth.pruning import (PruningMask, apply_mask, global_magnitude_prune,
                           load_mask, one_shot_prune, random_prune,
                           random_reinit, save_mask, schedule_sparsity)

NOPT_SCOPE = ("encoder", "decoder")


# --- sparsity schedule -------------------------------------------------------

def test_schedule_matches_geometric_survival():
    # pruning 20% of survivors each round leaves 0.8^i of the weights
    for i in range(0, 15):
        assert schedule_sparsity(i) == pytest.approx(1.0 - 0.8 ** i, rel=1e-12)
    assert schedule_sparsity(0) == 0.0


def test_schedule_reproduces_quoted_grid_to_one_decimal():
    # the conventional grid figures are one-decimal renderings of the exact
    # schedule (some truncated, some rounded), so each sits within one ulp
    # of the last printed digit
    quoted = [20.0, 36.0, 48.8, 59.0, 67.2, 73.7, 79.0, 83.2, 86.6, 89.2]
    for i, figure in enumerate(quoted, start=1):
        assert abs(schedule_sparsity(i) * 100 - figure) < 0.1
    assert abs(schedule_sparsity(12) * 100 - 93.1) < 0.1


def test_schedule_other_fractions():
    assert schedule_sparsity(1, 0.5) == pytest.approx(0.5)
    assert schedule_sparsity(3, 0.5) == pytest.approx(0.875)
    assert schedule_sparsity(2, 0.1) == pytest.approx(0.19)


def test_schedule_rejects_bad_arguments():
    for bad in (0.0, 1.0, 1.5, -0.2):
        with pytest.raises(ValueError, match="prune_fraction"):
            schedule_sparsity(1, bad)
    with pytest.raises(ValueError, match="round_index"):
        schedule_sparsity(-1)


# --- global magnitude pruning vs full-sort reference -------------------------

@pytest.mark.parametrize("seed", range(12))
def test_global_prune_matches_full_sort_reference(seed):
    reg = make_registry(seed)
    mask = PruningMask.ones_like(reg)
    fraction = [0.2, 0.36, 0.5][seed % 3]
    for _ in range(2):  # second round prunes among survivors only
        expected = brute_force_prune(reg, mask.copy_fields(), fraction)
        mask = global_magnitude_prune(reg, mask, fraction)
        assert set(mask.names()) == set(expected)
        for name in mask.names():
            np.testing.assert_array_equal(mask.get(name), expected[name])


def test_global_prune_scoped_matches_reference():
    reg = make_registry(99)
    mask = PruningMask.ones_like(reg)
    expected = brute_force_prune(reg, mask.copy_fields(), 0.4, NOPT_SCOPE)
    got = global_magnitude_prune(reg, mask, 0.4, NOPT_SCOPE)
    for name in got.names():
        np.testing.assert_array_equal(got.get(name), expected[name])


def test_global_prune_count_is_floor_of_fraction():
    reg = make_registry(7)
    ones = PruningMask.ones_like(reg)
    total = ones.counts()[1]
    pruned = global_magnitude_prune(reg, ones, 0.2)
    assert pruned.counts()[0] == total - math.floor(0.2 * total)


def test_global_prune_tiny_fraction_clears_nothing():
    reg = make_registry(3, min_weights=100, max_weights=200)
    ones = PruningMask.ones_like(reg)
    pruned = global_magnitude_prune(reg, ones, 1e-6)
    assert pruned.counts() == ones.counts()
    assert pruned.round_index == 1


def test_global_prune_rejects_bad_fraction_and_scope():
    reg = make_registry(1, min_weights=100, max_weights=200)
    ones = PruningMask.ones_like(reg)
    with pytest.raises(ValueError, match="fraction"):
        global_magnitude_prune(reg, ones, 0.0)
    with pytest.raises(ValueError, match="fraction"):
        global_magnitude_prune(reg, ones, 1.0)
    with pytest.raises(ValueError, match="unknown scope"):
        global_magnitude_prune(reg, ones, 0.2, scope=("encoder", "head"))
    with pytest.raises(ValueError, match="at least one"):
        global_magnitude_prune(reg, ones, 0.2, scope=())


# --- nesting and scope isolation ---------------------------------------------

def test_pruning_ladder_masks_nest_and_track_schedule():
    params = init_parameters(ModelKind.ADAIN, seed=5)
    total = PruningMask.ones_like(params).counts()[1]
    mask = PruningMask.ones_like(params)
    for i in range(1, 9):
        nxt = global_magnitude_prune(params, mask, 0.2)
        assert nxt.is_nested_in(mask)
        assert not mask.is_nested_in(nxt)
        # floor() each round keeps the deficit under i / total
        assert abs(nxt.sparsity() - schedule_sparsity(i)) < i / total + 1e-12
        assert nxt.round_index == i
        mask = nxt


def test_scoped_pruning_leaves_other_submodules_dense():
    params = init_parameters(ModelKind.SANET, seed=5)
    mask = PruningMask.ones_like(params)
    for _ in range(3):
        mask = global_magnitude_prune(params, mask, 0.2, NOPT_SCOPE)
    for name, field in mask.items():
        if name.startswith("transform."):
            assert field.all(), f"{name} lost bits outside the pruning scope"
    assert mask.sparsity(("transform",)) == 0.0
    assert mask.sparsity(NOPT_SCOPE) == pytest.approx(schedule_sparsity(3),
                                                      abs=1e-4)
    # overall sparsity is the scoped value diluted by the untouched submodule
    scoped_total = mask.counts(NOPT_SCOPE)[1]
    overall_total = mask.counts()[1]
    assert mask.sparsity() == pytest.approx(
        mask.sparsity(NOPT_SCOPE) * scoped_total / overall_total)


def test_is_nested_in_detects_resurrected_bit():
    reg = make_registry(11, min_weights=100, max_weights=300)
    ones = PruningMask.ones_like(reg)
    pruned = global_magnitude_prune(reg, ones, 0.3)
    assert pruned.is_nested_in(ones)
    fields = pruned.copy_fields()
    name = next(n for n, a in fields.items() if (a == 0).any())
    flat = fields[name].reshape(-1)
    flat[np.flatnonzero(flat == 0)[0]] = 1  # resurrect one pruned weight
    again = global_magnitude_prune(reg, PruningMask(fields), 0.2)
    assert not PruningMask(fields).is_nested_in(pruned)
    assert again.is_nested_in(PruningMask(fields))


def test_is_nested_in_requires_same_fields():
    reg = make_registry(2, min_weights=100, max_weights=300)
    ones = PruningMask.ones_like(reg)
    partial = PruningMask({n: ones.get(n) for n in list(ones.names())[:-1]})
    assert not partial.is_nested_in(ones)
    assert not ones.is_nested_in(partial)


# --- applying masks to parameters --------------------------------------------

def test_apply_mask_zeroes_exactly_and_idempotently():
    reg = make_registry(21)
    mask = global_magnitude_prune(reg, PruningMask.ones_like(reg), 0.5)
    apply_mask(reg, mask)
    first = {e.name: e.tensor.data.copy() for e in reg}
    for e in reg.prunable_entries():
        dead = mask.get(e.name) == 0
        assert (e.tensor.data[dead] == 0.0).all()
    apply_mask(reg, mask)
    for e in reg:
        np.testing.assert_array_equal(e.tensor.data, first[e.name])


def test_apply_mask_rejects_missing_field_and_bad_shape():
    reg = make_registry(22, min_weights=100, max_weights=300)
    mask = PruningMask.ones_like(reg)
    short = PruningMask({n: mask.get(n) for n in list(mask.names())[1:]})
    with pytest.raises(ValueError, match="missing"):
        apply_mask(reg, short)
    fields = mask.copy_fields()
    first = next(iter(fields))
    fields[first] = np.ones(fields[first].size + 1, dtype=np.uint8)
    with pytest.raises(ValueError, match="shape"):
        apply_mask(reg, PruningMask(fields))


# --- alternative mask builders ------------------------------------------------

def test_one_shot_prune_jumps_straight_to_target():
    reg = make_registry(31)
    total = PruningMask.ones_like(reg).counts()[1]
    mask = one_shot_prune(reg, 0.488)
    assert mask.strategy == "omp"
    assert mask.counts()[0] == total - math.floor(0.488 * total)
    expected = brute_force_prune(
        reg, PruningMask.ones_like(reg).copy_fields(), 0.488)
    for name in mask.names():
        np.testing.assert_array_equal(mask.get(name), expected[name])


def test_random_prune_matches_magnitude_count_and_seed():
    reg = make_registry(41)
    ones = PruningMask.ones_like(reg)
    magnitude = global_magnitude_prune(reg, ones, 0.2)
    a = random_prune(ones, 0.2, seed=123)
    b = random_prune(ones, 0.2, seed=123)
    c = random_prune(ones, 0.2, seed=124)
    assert a.counts() == magnitude.counts()
    assert a.strategy == "rp" and a.seed == 123
    for name in a.names():
        np.testing.assert_array_equal(a.get(name), b.get(name))
    assert any(not np.array_equal(a.get(n), c.get(n)) for n in a.names())
    assert a.is_nested_in(ones)


def test_random_prune_scoped_leaves_other_submodules_dense():
    reg = make_registry(42)
    mask = random_prune(PruningMask.ones_like(reg), 0.3, scope=("decoder",),
                        seed=7)
    assert mask.sparsity(("encoder",)) == 0.0
    assert mask.sparsity(("transform",)) == 0.0
    assert mask.sparsity(("decoder",)) > 0.25


def test_random_reinit_redraws_same_architecture():
    params = init_parameters(ModelKind.ADAIN, seed=3)
    redrawn = random_reinit(params, seed=4)
    assert redrawn.kind == params.kind
    assert redrawn.names() == params.names()
    assert any(not np.array_equal(redrawn.get(n).data, params.get(n).data)
               for n in params.names())
    again = random_reinit(params, seed=4)
    for n in params.names():
        np.testing.assert_array_equal(redrawn.get(n).data, again.get(n).data)


# --- mask containers ----------------------------------------------------------

def test_mask_constructor_validates_fields():
    with pytest.raises(ValueError, match="submodule prefix"):
        PruningMask({"head.weight": np.ones((2, 2), dtype=np.uint8)})
    with pytest.raises(ValueError, match="outside"):
        PruningMask({"encoder.w": np.array([0, 1, 2], dtype=np.uint8)})


def test_mask_counts_and_sparsity():
    mask = PruningMask({
        "encoder.a.weight": np.array([[1, 0], [1, 1]], dtype=np.uint8),
        "decoder.b.weight": np.array([0, 0, 1, 1], dtype=np.uint8),
    })
    assert mask.counts() == (5, 8)
    assert mask.sparsity() == pytest.approx(3 / 8)
    assert mask.counts(("encoder",)) == (3, 4)
    assert mask.sparsity(("transform",)) == 0.0  # empty scope counts as dense
    assert "encoder.a.weight" in mask and "encoder.missing" not in mask


def test_mask_weight_tensor_casts_and_caches():
    mask = PruningMask({"encoder.a.weight": np.array([1, 0, 1], dtype=np.uint8)})
    t32 = mask.weight_tensor("encoder.a.weight", np.float32)
    assert t32.dtype == np.float32
    np.testing.assert_array_equal(t32.data, [1.0, 0.0, 1.0])
    assert mask.weight_tensor("encoder.a.weight", np.float32) is t32
    t64 = mask.weight_tensor("encoder.a.weight", np.float64)
    assert t64.dtype == np.float64
    assert mask.weight_tensor("encoder.missing", np.float32) is None


# --- mask files ----------------------------------------------------------------

def test_mask_file_round_trip_is_bit_exact(tmp_path):
    reg = make_registry(51)
    mask = global_magnitude_prune(reg, PruningMask.ones_like(reg), 0.36)
    mask.seed = -17  # negative seeds must survive the trip
    path = tmp_path / "round3.mask"
    save_mask(mask, path)
    back = load_mask(path)
    assert back.names() == mask.names()
    assert (back.round_index, back.strategy, back.seed) == (1, "imp", -17)
    for name in mask.names():
        assert back.get(name).dtype == np.uint8
        assert back.get(name).shape == mask.get(name).shape
        np.testing.assert_array_equal(back.get(name), mask.get(name))
    save_mask(back, tmp_path / "again.mask")
    assert (tmp_path / "again.mask").read_bytes() == path.read_bytes()


def test_mask_file_rejects_corruption(tmp_path):
    reg = make_registry(52, min_weights=100, max_weights=300)
    path = tmp_path / "m.mask"
    save_mask(PruningMask.ones_like(reg), path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (tmp_path / "flipped.mask").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        load_mask(tmp_path / "flipped.mask")
    (tmp_path / "short.mask").write_bytes(path.read_bytes()[:4])
    with pytest.raises(ValueError, match="magic"):
        load_mask(tmp_path / "short.mask")
    (tmp_path / "other.mask").write_bytes(b"NOT-A-MASK" + path.read_bytes()[10:])
    with pytest.raises(ValueError, match="magic"):
        load_mask(tmp_path / "other.mask")
