import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from group3ad.errors import DataError, EmptyBank, EmptyInput
from group3ad.membank import (
    MemoryBank,
    Stream,
    build_bank,
    greedy_coreset,
    interpolate_point_scores,
    nearest_distances,
    score_groups,
)

from oracles import brute_nn_distance


def _unit(rows):
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _bank(seed=0, n=300, dim=8, size=100):
    rng = np.random.default_rng(seed)
    return build_bank(_unit(rng.normal(size=(n, dim))), rng.random((n, 3)), size)


def test_small_input_keeps_everything():
    rng = np.random.default_rng(0)
    feats, coords = _unit(rng.normal(size=(20, 4))), rng.random((20, 3))
    bank = build_bank(feats, coords, 50)
    assert len(bank.feat_entries) == 20
    assert {tuple(r) for r in bank.feat_entries} == {tuple(r) for r in feats}
    assert {tuple(r) for r in bank.coord_entries} == {tuple(r) for r in coords}


def test_greedy_picks_extremes():
    rows = np.array([[0.0, 0], [10.0, 0], [5.0, 0]])
    assert sorted(greedy_coreset(rows, 2).tolist()) == [0, 1]


@pytest.mark.parametrize("seed", range(10))
def test_greedy_two_approximation(seed):
    rows = np.random.default_rng(seed).normal(size=(40, 3))
    dist = np.sqrt(((rows[:, None] - rows[None]) ** 2).sum(axis=2))
    radius = lambda s: dist[:, list(s)].min(axis=1).max()
    for k in (1, 2, 3):
        sel = greedy_coreset(rows, k)
        best = min(radius(s) for s in itertools.combinations(range(len(rows)), k))
        assert radius(sel) <= 2 * best + 1e-12


def test_bank_invariants():
    bank = _bank(size=100)
    assert len(bank.feat_entries) <= 100 and len(bank.coord_entries) <= 100
    assert bank.feat.mad > 0 and bank.coord.mad > 0
    assert np.abs(np.linalg.norm(bank.feat_entries, axis=1) - 1).max() <= 1e-6


def test_bank_deterministic():
    a, b = _bank(3), _bank(3)
    assert np.array_equal(a.feat_entries, b.feat_entries)
    assert (a.feat.median, a.feat.mad, a.coord.median, a.coord.mad) == \
        (b.feat.median, b.feat.mad, b.coord.median, b.coord.mad)


def test_build_errors():
    with pytest.raises(EmptyInput):
        build_bank(np.zeros((0, 4)), np.zeros((0, 3)))


def test_nearest_distances_oracle():
    rng = np.random.default_rng(5)
    for trial in range(20):
        e = rng.normal(size=(rng.integers(1, 500), 6))
        q = rng.normal(size=(50, 6))
        assert np.abs(nearest_distances(q, e) - brute_nn_distance(q, e)).max() <= 1e-9


def test_nearest_distances_exclusion():
    e = np.array([[0.0, 0], [1.0, 0], [5.0, 0]])
    d = nearest_distances(e, e, exclude=[0, 1, 2])
    assert d.tolist() == [1.0, 1.0, 4.0]


def test_exact_match_scores_zero_raw():
    bank = _bank(1)
    s = score_groups(bank, bank.feat_entries[:3], bank.coord_entries[:3])
    assert not s.raw_feat.any() and not s.raw_coord.any()
    expected = 0.5 * ((0 - bank.feat.median) / bank.feat.mad + (0 - bank.coord.median) / bank.coord.mad)
    assert np.allclose(s.score, expected)


def test_single_entry_monotone():
    stream = Stream(np.array([[1.0, 0.0]]), 0.0, 1.0)
    bank = MemoryBank(stream, Stream(np.zeros((1, 3)), 0.0, 1.0))
    q = np.array([[1.0, 1.0], [1.0, 2.0]])
    s = score_groups(bank, q, np.zeros((2, 3)))
    assert s.raw_feat[1] > s.raw_feat[0] and s.score[1] > s.score[0]


def test_empty_bank():
    empty = MemoryBank(Stream(np.zeros((0, 2)), 0.0, 1.0), Stream(np.zeros((0, 3)), 0.0, 1.0))
    with pytest.raises(EmptyBank):
        score_groups(empty, np.ones((1, 2)), np.zeros((1, 3)))


def test_bank_file_roundtrip(tmp_path):
    bank = _bank(2)
    bank.save(tmp_path / "f.bin", tmp_path / "c.bin")
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"G3BK"
    assert len(raw) == 4 + 4 + 1 + 4 + 8 + 8 * bank.feat_entries.size + 16
    back = MemoryBank.load(tmp_path / "f.bin", tmp_path / "c.bin")
    assert np.array_equal(back.feat_entries, bank.feat_entries)
    assert np.array_equal(back.coord_entries, bank.coord_entries)
    assert (back.feat.median, back.feat.mad) == (bank.feat.median, bank.feat.mad)
    with pytest.raises(DataError):
        MemoryBank.load(tmp_path / "f.bin", tmp_path / "f.bin")
    (tmp_path / "bad.bin").write_bytes(raw[:-3])
    with pytest.raises(DataError):
        MemoryBank.load(tmp_path / "bad.bin", tmp_path / "c.bin")


# ---------------------------------------------------------- interpolation

def test_one_group_everyone_inherits():
    pts = np.random.default_rng(0).random((30, 3))
    assert np.all(interpolate_point_scores([[0.5, 0.5, 0.5]], [2.5], pts) == 2.5)


def test_equidistant_half():
    out = interpolate_point_scores([[-1.0, 0, 0], [1.0, 0, 0]], [0.0, 1.0], [[0.0, 0, 0]], 2)
    assert out[0] == 0.5


def test_coincident_exact():
    centers = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    out = interpolate_point_scores(centers, [3.0, 7.0, 11.0], centers)
    assert out.tolist() == [3.0, 7.0, 11.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 30), st.integers(1, 5))
def test_interpolation_bounded(seed, g, k):
    rng = np.random.default_rng(seed)
    centers, scores, pts = rng.random((g, 3)), rng.normal(size=g), rng.random((100, 3))
    out = interpolate_point_scores(centers, scores, pts, k)
    assert out.min() >= scores.min() - 1e-12 and out.max() <= scores.max() + 1e-12
