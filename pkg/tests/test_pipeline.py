import os

import numpy as np
import pytest

from group3ad import pipeline
from group3ad.benchmark import BenchmarkConfig, bumped_sphere, generate_benchmark, make_shape
from group3ad.errors import EmptyBank, EmptyInput, NotNormalized, PreconditionError
from group3ad.pccore import PointCloud
from group3ad.pipeline import ModelBundle, TrainConfig, epoch_summary, infer, train

SMALL = dict(n_groups=200, group_size=16, k_max=8, memory_size=600)


def _clouds(count=2, n=1500, jitter=0.05):
    return [make_shape("sphere", n, seed=i, jitter=jitter) for i in range(count)]


@pytest.fixture(scope="module")
def small_bundle():
    clouds = _clouds()
    return clouds, train(clouds, TrainConfig(epochs=2, seed=3, **SMALL))


def test_two_epochs_one_cloud_loop_structure():
    bundle = train(_clouds(1), TrainConfig(epochs=2, **SMALL))
    assert [(r["epoch"], r["phase"], r["cloud"]) for r in bundle.history] == [(1, 1, 0), (2, 2, 0)]
    assert bundle.bank is not None and len(bundle.bank.feat_entries) > 0


def test_history_layout(small_bundle):
    _, bundle = small_bundle
    assert [(r["epoch"], r["cloud"]) for r in bundle.history] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert all(set(r) == set(pipeline.LOG_FIELDS) for r in bundle.history)
    assert [row["epoch"] for row in epoch_summary(bundle.history)] == [1, 2]


def test_phase_separation(monkeypatch):
    """The upstream gradient is the uniformity gradient in phase 1 and the alignment one in phase 2."""
    made, used = [], []
    real_u, real_a, real_back = pipeline.uniformity_loss, pipeline.alignment_loss, pipeline.head_backward

    def spy(kind, fn):
        def wrapped(*a, **kw):
            out = fn(*a, **kw)
            made.append((kind, out.grad_rows))
            return out
        return wrapped

    def backward(cache, params, upstream):
        used.append(next(kind for kind, g in reversed(made) if g is upstream))
        return real_back(cache, params, upstream)

    monkeypatch.setattr(pipeline, "uniformity_loss", spy("uniformity", real_u))
    monkeypatch.setattr(pipeline, "alignment_loss", spy("alignment", real_a))
    monkeypatch.setattr(pipeline, "head_backward", backward)
    train(_clouds(1), TrainConfig(epochs=4, **SMALL))
    assert used == ["uniformity", "uniformity", "alignment", "alignment"]


def test_deterministic_and_roundtrip(small_bundle, tmp_path):
    clouds, bundle = small_bundle
    again = train(clouds, TrainConfig(epochs=2, seed=3, **SMALL))
    assert np.array_equal(again.params.flat(), bundle.params.flat())
    bundle.save(tmp_path / "a")
    again.save(tmp_path / "b")
    for name in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    back = ModelBundle.load(tmp_path / "a")
    assert back.config == bundle.config
    assert np.array_equal(back.params.flat(), bundle.params.flat())
    assert np.array_equal(back.standardizer.mean, bundle.standardizer.mean)
    r1, r2 = infer(bundle, clouds[0]), infer(back, clouds[0])
    assert np.array_equal(r1.point_scores, r2.point_scores)


def test_training_does_not_mutate_inputs():
    clouds = _clouds(1)
    before = clouds[0].points.copy()
    train(clouds, TrainConfig(epochs=2, **SMALL))
    assert np.array_equal(clouds[0].points, before)
    assert clouds[0].normals is None


def test_train_errors():
    with pytest.raises(EmptyInput):
        train([], TrainConfig(epochs=2))
    with pytest.raises(NotNormalized):
        train([PointCloud(np.random.default_rng(0).random((300, 3)) * 4)], TrainConfig(epochs=2, **SMALL))
    for bad in (dict(epochs=3), dict(epochs=0), dict(lr=0.0)):
        with pytest.raises(PreconditionError):
            TrainConfig(**bad)


def test_empty_bank(small_bundle):
    clouds, bundle = small_bundle
    hollow = ModelBundle(bundle.params, bundle.standardizer, None, bundle.config)
    with pytest.raises(EmptyBank):
        infer(hollow, clouds[0])


def test_infer_outputs(small_bundle):
    clouds, bundle = small_bundle
    res = infer(bundle, clouds[1])
    assert res.point_scores.shape == (len(clouds[1]),)
    assert res.object_score == res.point_scores.max()
    assert len(res.selection.indices) == SMALL["n_groups"]


def test_untrained_ablation_keeps_initial_params():
    clouds = _clouds(1)
    cfg = TrainConfig(epochs=2, contrastive=False, **SMALL)
    bundle = train(clouds, cfg)
    assert bundle.history == []
    fresh = pipeline.EncoderParams.init(pipeline.BASE_DIM, cfg.hidden, cfg.dim, pipeline.derive_seed(cfg.seed, 1))
    assert np.array_equal(bundle.params.flat(), fresh.flat())


@pytest.mark.slow
def test_bumped_scores_above_clean():
    n = 4000
    bundle = train(_clouds(4, n, jitter=0.0), TrainConfig(epochs=2, seed=1, n_groups=512, group_size=32,
                                                          k_max=10, memory_size=2000))
    wins = 0
    for seed in range(20):
        bumped, _ = bumped_sphere(n, seed)
        clean, _ = bumped_sphere(n, seed, height=0.0)
        wins += infer(bundle, bumped).object_score > infer(bundle, clean).object_score
    assert wins >= 18


@pytest.mark.slow
def test_training_cloud_ranks_in_bottom_decile():
    bench = generate_benchmark(BenchmarkConfig(n_points=4000, n_test=20, seed=5))
    bundle = train(bench.train, TrainConfig(epochs=2, seed=5, n_groups=512, group_size=32,
                                            k_max=10, memory_size=2000))
    defect = [infer(bundle, s.cloud).object_score for s in bench.test if s.mask.any()]
    own = infer(bundle, bench.train[0]).object_score
    assert own <= np.quantile(defect, 0.1)
