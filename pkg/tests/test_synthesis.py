import numpy as np
import pytest
from scipy import stats

from group3ad.benchmark import make_shape
from group3ad.descriptors import fpfh_field
from group3ad.errors import NotNormalized, PreconditionError
from group3ad.pccore import PointCloud, SpatialIndex, knn
from group3ad.synthesis import RATIO_RANGE, SIGMA2_RANGE, AnomalySpec, generate_fake_anomaly


@pytest.fixture(scope="module")
def sphere():
    cloud, index, field = fpfh_field(make_shape("sphere", 1000, seed=3))
    return cloud, index, field


def test_vanishing_noise_single_point(sphere):
    cloud, index, field = sphere
    out = generate_fake_anomaly(cloud, field, AnomalySpec(0.001, 1e-12, seed=1), index=index)
    assert out.mask.sum() == 1
    assert np.abs(out.cloud.points - cloud.points).max() <= 1e-5


def test_exact_region(sphere):
    cloud, index, field = sphere
    out = generate_fake_anomaly(cloud, field, AnomalySpec(0.05, 0.02, seed=2), index=index)
    assert out.mask.sum() == 50
    c = int(np.argmax(field.variation))
    assert out.spec.center_index == c
    assert set(np.flatnonzero(out.mask)) == set(knn(SpatialIndex(cloud.points), cloud.points[c], 50).tolist())


def test_unmasked_bitwise_and_input_untouched(sphere):
    cloud, index, field = sphere
    before = cloud.points.copy()
    out = generate_fake_anomaly(cloud, field, "random", seed=9, index=index)
    keep = out.mask == 0
    assert np.array_equal(out.cloud.points[keep], cloud.points[keep])
    assert np.array_equal(cloud.points, before)
    assert out.cloud.normals is None
    assert np.array_equal(out.cloud.labels, out.mask)


def test_deterministic(sphere):
    cloud, index, field = sphere
    a = generate_fake_anomaly(cloud, field, "random", seed=4, index=index)
    b = generate_fake_anomaly(cloud, field, "random", seed=4)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert a.spec == b.spec


def test_random_spec_in_range():
    for s in range(200):
        spec = AnomalySpec.random(s)
        assert RATIO_RANGE[0] <= spec.ratio <= RATIO_RANGE[1]
        assert SIGMA2_RANGE[0] <= spec.sigma2 <= SIGMA2_RANGE[1]
        assert spec.in_training_range


def test_noise_variance_band(sphere):
    """Pooled per-coordinate variance over 100 draws stays inside [0.03, 0.05]."""
    cloud, index, field = sphere
    disp = []
    for s in range(100):
        out = generate_fake_anomaly(cloud, field, AnomalySpec(0.05, 0.04, seed=s), index=index)
        m = out.mask == 1
        disp.append((out.cloud.points[m] - cloud.points[m]).ravel())
    disp = np.concatenate(disp)
    var = disp.var(ddof=1)
    # the 95% chi-square interval of the pooled estimate sits well inside the band
    lo, hi = stats.chi2.ppf([0.025, 0.975], len(disp) - 1) * 0.04 / (len(disp) - 1)
    assert 0.03 <= lo and hi <= 0.05
    assert 0.03 <= var <= 0.05


def test_requires_normalized():
    cloud, index, field = fpfh_field(PointCloud(np.random.default_rng(0).random((200, 3)) * 5))
    with pytest.raises(NotNormalized):
        generate_fake_anomaly(cloud, field, AnomalySpec(0.05, 0.02), index=index)


def test_spec_validation():
    with pytest.raises(PreconditionError):
        AnomalySpec(0.0, 0.02)
    with pytest.raises(PreconditionError):
        AnomalySpec(0.05, -1.0)
    assert not AnomalySpec(0.5, 0.02).in_training_range
