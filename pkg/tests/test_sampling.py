import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from group3ad.benchmark import bumped_sphere
from group3ad.descriptors import FpfhField, fpfh_field
from group3ad.errors import PreconditionError
from group3ad.pccore import PointCloud
from group3ad.sampling import UNIFORM, VARIATION, agcs, covering_radius, fps, high_variation_pool

from oracles import brute_fps_check


def _field(variation):
    n = len(variation)
    return FpfhField(np.zeros((n, 33)), np.asarray(variation, float), 16, np.zeros(n, bool))


def test_two_points():
    pts = np.array([[0.0, 0, 0], [1.0, 1, 1]])
    for seed in range(5):
        assert sorted(fps(pts, 2, seed).tolist()) == [0, 1]


def test_square_corners():
    sq = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
    assert fps(sq, 3, first=0).tolist() == [0, 3, 1]


def test_prefix_farthest_property():
    pts = np.random.default_rng(0).random((300, 3))
    assert brute_fps_check(pts, fps(pts, 30, seed=4).tolist())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 60), st.booleans())
def test_fps_property(seed, n, grid):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 3, (n, 3)).astype(float) if grid else rng.random((n, 3))
    order = fps(pts, n, seed).tolist()
    assert len(set(order)) == n
    # exact duplicates sit at distance 0 and are picked last, in index order
    assert brute_fps_check(pts, order)


def test_fps_deterministic_and_seeded_first():
    pts = np.random.default_rng(1).random((500, 3))
    assert np.array_equal(fps(pts, 50, 9), fps(pts, 50, 9))
    firsts = {int(fps(pts, 1, s)[0]) for s in range(20)}
    assert len(firsts) > 10


def test_covering_radius_monotone():
    pts = np.random.default_rng(2).random((400, 3))
    order = fps(pts, 60, seed=3)
    radii = [covering_radius(pts, order[:k]) for k in range(1, 61)]
    assert all(b <= a for a, b in zip(radii, radii[1:]))


def test_fps_range_checked():
    with pytest.raises(PreconditionError):
        fps(np.zeros((3, 3)), 4)


def test_agcs_alpha_zero_is_fps():
    pts = np.random.default_rng(3).random((1000, 3))
    sel = agcs(pts, _field(np.arange(1000.0)), 100, 0.0, seed=5)
    assert (sel.provenance == UNIFORM).all()
    assert np.array_equal(sel.indices, fps(pts, 100, 5))


def test_agcs_twenty_percent():
    pts = np.random.default_rng(4).random((1000, 3))
    sel = agcs(pts, _field(np.random.default_rng(5).random(1000)), 100, 0.2, seed=1)
    assert sel.n_variation == 20
    assert (sel.provenance == UNIFORM).sum() == 80
    pool = set(high_variation_pool(np.random.default_rng(5).random(1000), 0.2).tolist())
    assert set(sel.indices[sel.provenance == VARIATION].tolist()) <= pool


def test_pool_ties_lower_index():
    assert high_variation_pool([1.0, 3.0, 3.0, 3.0, 0.0], 0.4).tolist() == [1, 2]


def test_agcs_pool_covers_quota():
    # round(alpha * n) <= ceil(alpha * N) whenever n <= N, so the pool never runs short
    pts = np.random.default_rng(6).random((50, 3))
    sel = agcs(pts, _field(np.arange(50.0)), 50, 0.05, seed=0)
    assert sel.n_variation == 3
    assert set(sel.indices[sel.provenance == VARIATION].tolist()) == {47, 48, 49}
    assert len(set(sel.indices.tolist())) == 50


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 80), st.integers(0, 10), st.data())
def test_agcs_unique_and_sized(seed, N, tenth, data):
    rng = np.random.default_rng(seed)
    pts = rng.random((N, 3))
    n = data.draw(st.integers(1, N))
    alpha = tenth / 10
    sel = agcs(pts, _field(rng.random(N)), n, alpha, seed)
    assert len(sel.indices) == n
    assert len(set(sel.indices.tolist())) == n
    pool = high_variation_pool(rng.random(N), alpha)  # size only
    assert sel.n_variation == min(int(np.floor(alpha * n + 0.5)), len(pool))


def test_agcs_rejects_bad_alpha():
    with pytest.raises(PreconditionError):
        agcs(np.zeros((3, 3)), _field(np.zeros(3)), 2, 1.5)


@pytest.mark.slow
def test_agcs_concentrates_on_bump():
    inside = {0.0: [], 0.2: []}
    for seed in range(20):
        cloud, mask = bumped_sphere(6000, seed)
        cloud, _, field = fpfh_field(cloud)
        for alpha in inside:
            sel = agcs(cloud, field, 400, alpha, seed)
            inside[alpha].append(mask[sel.indices].mean())
    assert np.mean(inside[0.2]) > np.mean(inside[0.0])
