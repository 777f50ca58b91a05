import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgst import io
from fgst.flow import (BlockMatchingFlow, ConstantFlow, FlowField, FlowSet, MissingFlowError,
                       block_matching_offsets, estimate_block_matching, estimate_constant,
                       neighbor_frames, rescale_to_level, round_half_away, round_offset)


def exhaustive_sad(ref, nbr, block, radius):
    # independent oracle: per block, scan every in-frame displacement in plain loops
    h, w = ref.shape[-2:]
    out = {}
    for bi in range(0, h, block):
        for bj in range(0, w, block):
            best = None
            for dx in range(-radius, radius + 1):
                for dy in range(-radius, radius + 1):
                    rows = range(bi, min(bi + block, h))
                    cols = range(bj, min(bj + block, w))
                    if any(not 0 <= i + dx < h for i in rows) or any(not 0 <= j + dy < w for j in cols):
                        continue
                    sad = sum(abs(ref[..., i, j] - nbr[..., i + dx, j + dy]).sum()
                              for i in rows for j in cols)
                    key = (sad, abs(dx) + abs(dy), dx, dy)
                    if best is None or key < best:
                        best = key
            out[(bi, bj)] = best[2:]
    return out


# -- constant estimator ---------------------------------------------------------


def test_constant_zero_field():
    assert not estimate_constant((4, 4), 0.0, 0.0).offsets.any()


def test_constant_uniform_value():
    f = estimate_constant((4, 4), 2.4, -1.6)
    assert np.all(f.offsets[0] == 2.4) and np.all(f.offsets[1] == -1.6)


def test_flow_field_round_trip(tmp_path):
    f = FlowField(2, 3, 1, np.random.default_rng(0).normal(size=(2, 3, 5)))
    f.save(tmp_path / "flow.fgt")
    g = FlowField.load(tmp_path / "flow.fgt")
    assert (g.from_frame, g.to_frame, g.level) == (2, 3, 1)
    assert g.offsets.tobytes() == f.offsets.tobytes()
    assert (tmp_path / "flow.fgt.hdr").read_text() == "2 3 1\n"
    assert io.load_tensor(tmp_path / "flow.fgt").tobytes() == f.offsets.tobytes()


def test_flow_field_is_read_only():
    f = estimate_constant((2, 2), 1.0, 1.0)
    with pytest.raises(ValueError):
        f.offsets[0, 0, 0] = 5.0


def test_constant_flow_identical_frames_is_zero():
    frame = np.random.default_rng(0).uniform(size=(3, 4, 4))
    assert not ConstantFlow(3.0, 1.0).estimate(frame, frame).any()


# -- block matching -------------------------------------------------------------


def test_block_matching_identical_frames_is_zero():
    frame = np.random.default_rng(1).uniform(size=(3, 12, 12))
    assert not block_matching_offsets(frame, frame, 4, 3).any()


def test_block_matching_row_shift_matches_exhaustive_search():
    rng = np.random.default_rng(2)
    ref = rng.uniform(size=(3, 16, 16))
    # neighbour content sits 2 px further along the first offset axis
    nbr = np.roll(ref, 2, axis=1)
    off = block_matching_offsets(ref, nbr, 4, 3)
    oracle = exhaustive_sad(ref, nbr, 4, 3)
    for (bi, bj), (dx, dy) in oracle.items():
        assert off[0, bi, bj] == dx and off[1, bi, bj] == dy
    # interior blocks (not touching the wrapped rows) see exactly (2, 0)
    interior = off[:, 4:12, :]
    assert np.all(interior[0] == 2) and np.all(interior[1] == 0)


def test_block_matching_column_shift():
    ref = np.random.default_rng(3).uniform(size=(16, 16))
    nbr = np.roll(ref, -1, axis=1)
    # ref(i, j) == nbr(i, j - 1); the first column block would have to read column -1
    off = block_matching_offsets(ref, nbr, 4, 2)
    assert np.all(off[0, :, 4:] == 0) and np.all(off[1, :, 4:] == -1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), block=st.integers(1, 4), radius=st.integers(1, 3))
def test_block_matching_agrees_with_oracle_on_noise(seed, block, radius):
    rng = np.random.default_rng(seed)
    ref, nbr = rng.uniform(size=(2, 9, 10))
    off = block_matching_offsets(ref, nbr, block, radius)
    assert np.abs(off).max() <= radius
    for (bi, bj), (dx, dy) in exhaustive_sad(ref, nbr, block, radius).items():
        assert (off[0, bi, bj], off[1, bi, bj]) == (dx, dy)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), dx=st.integers(-2, 2), dy=st.integers(-2, 2))
def test_block_matching_recovers_integer_shift(seed, dx, dy):
    rng = np.random.default_rng(seed)
    big = rng.uniform(size=(3, 20, 20))
    ref = big[:, 4:16, 4:16]
    nbr = big[:, 4 - dx:16 - dx, 4 - dy:16 - dy]
    # nbr(i, j) = ref(i - dx, j - dy) so ref(i, j) lives at nbr(i + dx, j + dy)
    off = block_matching_offsets(ref, nbr, 4, 3)
    valid = slice(4, 8)  # blocks whose whole search stays in frame
    assert np.all(off[0, valid, valid] == dx) and np.all(off[1, valid, valid] == dy)


def test_block_matching_rejects_bad_input():
    a = np.zeros((4, 4))
    with pytest.raises(ValueError):
        block_matching_offsets(a, np.zeros((4, 5)), 2, 1)
    with pytest.raises(ValueError):
        block_matching_offsets(a, a, 0, 1)
    with pytest.raises(ValueError):
        block_matching_offsets(a, a, 2, 0)


def test_estimate_block_matching_wraps_field():
    a = np.random.default_rng(0).uniform(size=(8, 8))
    f = estimate_block_matching(a, a, 4, 1, from_frame=1, to_frame=2)
    assert (f.from_frame, f.to_frame, f.level) == (1, 2, 0)


# -- pyramid rescaling ----------------------------------------------------------


def test_rescale_uniform():
    f = rescale_to_level(estimate_constant((8, 8), 4.0, -2.0), 1)
    assert f.hw == (4, 4) and f.level == 1
    assert np.all(f.offsets[0] == 2.0) and np.all(f.offsets[1] == -1.0)


def test_rescale_level_zero_identity():
    f = estimate_constant((4, 6), 1.5, 0.5)
    assert rescale_to_level(f, 0).offsets.tobytes() == f.offsets.tobytes()


def test_rescale_checkerboard():
    off = np.zeros((2, 4, 4))
    off[0][(np.add.outer(np.arange(4), np.arange(4)) % 2) == 1] = 4.0
    f = rescale_to_level(FlowField(0, 1, 0, off), 1)
    assert np.all(f.offsets[0] == 1.0) and np.all(f.offsets[1] == 0.0)
    # the checkerboard averages to (2, 0) per cell before the magnitude halves
    assert np.all(off.reshape(2, 2, 2, 2, 2).mean(axis=(2, 4))[0] == 2.0)


def test_rescale_composes_for_uniform_fields():
    base = estimate_constant((16, 16), 6.0, -3.0)
    once = rescale_to_level(base, 1)
    lifted = FlowField(0, 0, 0, np.array(once.offsets))
    twice = rescale_to_level(lifted, 1)
    np.testing.assert_array_equal(twice.offsets, rescale_to_level(base, 2).offsets)


def test_rescale_rejects_indivisible():
    with pytest.raises(ValueError):
        rescale_to_level(estimate_constant((6, 6), 1, 1), 2)


# -- rounding -------------------------------------------------------------------


@pytest.mark.parametrize("value,expected", [((0.0, 0.0), (0, 0)), ((2.4, -1.6), (2, -2)),
                                            ((40.0, 0.0), (40, 0)), ((0.5, -0.5), (1, -1)),
                                            ((2.5, -2.5), (3, -3))])
def test_round_offset(value, expected):
    assert round_offset(value) == expected


@pytest.mark.parametrize("bad", [(np.nan, 0.0), (0.0, np.inf)])
def test_round_offset_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        round_offset(bad)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_round_is_odd(a, b):
    assert round_offset((-a, -b)) == tuple(-v for v in round_offset((a, b)))


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6))
def test_round_is_nearest(v):
    r = int(round_half_away(np.array([v]))[0])
    assert abs(r - v) <= 0.5


# -- flow sets ------------------------------------------------------------------


def test_neighbor_frames_clamp():
    assert neighbor_frames(0, 1, 3) == [0, 1]
    assert neighbor_frames(2, 2, 3) == [0, 1, 2]
    assert neighbor_frames(1, 0, 3) == [1]


def test_flow_set_self_pair_is_zero_and_missing_pair_rejected():
    fs = FlowSet.constant(3, (4, 4), 1, (1.0, 0.0))
    assert not fs.get(1, 1).any()
    assert np.all(fs.get(1, 2)[0] == 1.0) and np.all(fs.get(1, 0)[0] == -1.0)
    with pytest.raises(MissingFlowError):
        fs.get(0, 2)


def test_flow_set_estimate_uses_every_pair():
    frames = np.random.default_rng(0).uniform(size=(4, 3, 8, 8))
    fs = FlowSet.estimate(frames, BlockMatchingFlow(4, 1), 1)
    assert sorted(fs.fields) == [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]


def test_flow_set_level_lookup():
    fs = FlowSet.constant(2, (8, 8), 1, (4.0, 2.0))
    assert fs.get(0, 1, level=2).shape == (2, 2, 2)
    assert np.all(fs.get(0, 1, level=2)[0] == 1.0)
    assert fs.max_abs() == 4.0
