"""Command-line entry point.

Verbs: synth, train, infer, eval, fpfh, sample, make-anomaly. Exit status
is 0 on success, 1 on a usage error and 2 on a data or model error.

Configuration precedence for ``synth`` and ``train``: built-in defaults,
then the ``--config`` file (``key = value`` lines), then explicit flags.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import secrets
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kvfile
from .benchmark import BenchmarkConfig, load_benchmark, synth_benchmark
from .descriptors import DEFAULT_K, N_FEATURES, fpfh_field
from .errors import DataError, MissingFlag, UnknownVerb, UsageError
from .metrics import evaluate
from .pccore import PointCloud, is_normalized, load_ply, normalize, read_labels, save_ply, write_labels
from .pipeline import ModelBundle, TrainConfig, infer, train
from .sampling import agcs
from .synthesis import RATIO_RANGE, SIGMA2_RANGE, AnomalySpec, generate_fake_anomaly

METRIC_COLUMNS = ("O-AUROC", "O-AUPR", "P-AUROC", "P-AUPR")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _entropy_seed(label="seed"):
    seed = secrets.randbits(63)
    print(f"{label} = {seed}")
    return seed


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise MissingFlag("--" + name.replace("_", "-"))


def _read_cloud(path, do_normalize=False):
    cloud = load_ply(path)
    if do_normalize:
        cloud, _ = normalize(cloud)
    return cloud


def _overrides(args, mapping):
    # identity tests: a legitimate 0 compares equal to False
    return {key: str(getattr(args, attr)) for attr, key in mapping.items()
            if getattr(args, attr) is not None and getattr(args, attr) is not False}


# ------------------------------------------------------------------ verbs

def cmd_synth(args):
    _require(args, "out")
    items = kvfile.read(args.config) if args.config else {}
    items.update(_overrides(args, {"shape": "shape", "n_points": "n_points", "seed": "seed"}))
    if "seed" not in items:
        items["seed"] = str(_entropy_seed())
    config = kvfile.to_dataclass(BenchmarkConfig, items)
    synth_benchmark(config, args.out)
    print(f"wrote {config.n_train} train and {config.n_test} test clouds to {args.out}")


TRAIN_FLAGS = {"epochs": "epochs", "lr": "lr", "groups": "n_groups", "group_size": "group_size",
               "alpha": "alpha", "temp": "temperature", "seed": "seed", "freeze_k": "freeze_k"}


def cmd_train(args):
    _require(args, "data", "out")
    items = kvfile.read(args.config) if args.config else {}
    items.update(_overrides(args, TRAIN_FLAGS))
    if "seed" not in items:
        items["seed"] = str(_entropy_seed())
    config = TrainConfig.from_kv(items)
    bench = load_benchmark(args.data)
    bundle = train(bench.train, config)
    bundle.save(args.out)
    print(f"trained on {len(bench.train)} clouds; bundle written to {args.out}")


def _cloud_labels(cloud, labels_path):
    if labels_path:
        return read_labels(labels_path)
    return cloud.labels


def cmd_infer(args):
    _require(args, "bundle", "input", "out")
    bundle = ModelBundle.load(args.bundle)
    raw = load_ply(args.input)
    cloud = normalize(raw)[0] if args.normalize else raw
    result = infer(bundle, cloud, alpha=args.alpha, seed=args.seed)
    labels = _cloud_labels(raw, args.labels)
    save_ply(PointCloud(raw.points, None, labels), args.out, scalar=result.point_scores)
    if args.scores_csv:
        with open(args.scores_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("point_index", "score") + (("gt_label",) if labels is not None else ()))
            for i, s in enumerate(result.point_scores):
                w.writerow((i, repr(float(s))) + ((int(labels[i]),) if labels is not None else ()))
    print(f"object score = {result.object_score!r}")


def evaluate_dataset(bundle, bench, workers=1):
    """Score every test cloud; returns ``(metrics_dict, results)``."""
    run = lambda sample: infer(bundle, sample.cloud)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, bench.test))
    else:
        results = [run(s) for s in bench.test]
    metrics = evaluate(
        [r.object_score for r in results],
        [int(np.any(s.mask)) for s in bench.test],
        np.concatenate([r.point_scores for r in results]),
        np.concatenate([s.mask for s in bench.test]),
    )
    return metrics, results


def cmd_eval(args):
    _require(args, "bundle", "data", "report")
    bundle = ModelBundle.load(args.bundle)
    bench = load_benchmark(args.data)
    metrics, _ = evaluate_dataset(bundle, bench, args.workers)
    with open(args.report, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("category",) + METRIC_COLUMNS)
        w.writerow((bench.category,) + tuple(repr(float(metrics[c])) for c in METRIC_COLUMNS))
    for c in METRIC_COLUMNS:
        print(f"{c} = {metrics[c]:.4f}")


def cmd_fpfh(args):
    _require(args, "input", "out")
    cloud = _read_cloud(args.input, args.normalize)
    _, _, field = fpfh_field(cloud, args.k)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_index"] + [f"fpfh_{j}" for j in range(N_FEATURES)] + ["variation"])
        for i, (row, var) in enumerate(zip(field.descriptors, field.variation)):
            w.writerow([i] + [repr(float(v)) for v in row] + [repr(float(var))])


def cmd_sample(args):
    _require(args, "input", "n", "alpha", "out")
    seed = _entropy_seed() if args.seed is None else args.seed
    cloud = _read_cloud(args.input, args.normalize)
    cloud, _, field = fpfh_field(cloud, args.k)
    sel = agcs(cloud, field, args.n, args.alpha, seed)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("index", "provenance"))
        w.writerows(zip(sel.indices.tolist(), sel.provenance))


def cmd_make_anomaly(args):
    _require(args, "input", "out")
    seed = _entropy_seed() if args.seed is None else args.seed
    cloud = _read_cloud(args.input, args.normalize)
    if not is_normalized(cloud):
        raise DataError("input cloud is not normalized; pass --normalize")
    cloud, index, field = fpfh_field(cloud)
    drawn = AnomalySpec.random(seed)
    ratio = drawn.ratio if args.r is None else args.r
    sigma2 = drawn.sigma2 if args.sigma2 is None else args.sigma2
    spec = AnomalySpec(ratio, sigma2, drawn.seed)
    labeled = generate_fake_anomaly(cloud, field, spec, index=index)
    save_ply(labeled.cloud, args.out)
    sidecar = args.labels_out or os.path.splitext(args.out)[0] + ".txt"
    write_labels(sidecar, labeled.mask)
    print(f"replaced {int(labeled.mask.sum())} points (r = {ratio!r}, sigma2 = {sigma2!r}); labels in {sidecar}")


# ----------------------------------------------------------------- parser

def _build_parsers():
    verbs = {}

    p = _Parser(prog="group3ad synth", description="Write a synthetic benchmark dataset.")
    p.add_argument("--config", help="key = value file with BenchmarkConfig fields")
    p.add_argument("--out")
    p.add_argument("--shape", choices=("sphere", "torus", "ellipsoid"))
    p.add_argument("--n-points", type=int)
    p.add_argument("--seed", type=int)
    verbs["synth"] = (p, cmd_synth)

    p = _Parser(prog="group3ad train", description="Train an encoder and memory bank on train/*.ply.")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config", help="key = value file with TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--groups", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--temp", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze-k", action="store_true")
    verbs["train"] = (p, cmd_train)

    p = _Parser(prog="group3ad infer", description="Score one cloud; writes a colored, scored PLY.")
    p.add_argument("--bundle")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--scores-csv")
    p.add_argument("--labels", help="0/1 label sidecar to copy into the outputs")
    p.add_argument("--alpha", type=float, help="override the bundle's variation fraction")
    p.add_argument("--seed", type=int, help="center-selection seed (default: derived from the bundle)")
    p.add_argument("--normalize", action="store_true", help="normalize the input before scoring")
    verbs["infer"] = (p, cmd_infer)

    p = _Parser(prog="group3ad eval", description="Score every test cloud and report O/P-AUROC and AUPR.")
    p.add_argument("--bundle")
    p.add_argument("--data")
    p.add_argument("--report")
    p.add_argument("--workers", type=int, default=1)
    verbs["eval"] = (p, cmd_eval)

    p = _Parser(prog="group3ad fpfh", description="Per-point FPFH descriptors and local variation.")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--normalize", action="store_true")
    verbs["fpfh"] = (p, cmd_fpfh)

    p = _Parser(prog="group3ad sample", description="Adaptive group-center selection.")
    p.add_argument("--input")
    p.add_argument("--n", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--normalize", action="store_true")
    verbs["sample"] = (p, cmd_sample)

    p = _Parser(prog="group3ad make-anomaly", description="Inject one synthetic defect region.")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--r", type=float, help=f"region fraction (default: uniform in {RATIO_RANGE})")
    p.add_argument("--sigma2", type=float, help=f"noise variance (default: uniform in {SIGMA2_RANGE})")
    p.add_argument("--seed", type=int)
    p.add_argument("--labels-out", help="label sidecar path (default: output stem + .txt)")
    p.add_argument("--normalize", action="store_true")
    verbs["make-anomaly"] = (p, cmd_make_anomaly)
    return verbs


def usage(verbs):
    return "usage: group3ad {" + ",".join(verbs) + "} [flags]   (group3ad <verb> --help for details)"


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    verbs = _build_parsers()
    try:
        if not argv or argv[0] in ("-h", "--help"):
            print(usage(verbs), file=sys.stderr if not argv else sys.stdout)
            return 1 if not argv else 0
        verb = argv[0]
        if verb not in verbs:
            raise UnknownVerb(f"unknown verb {verb!r}")
        parser, handler = verbs[verb]
        try:
            args = parser.parse_args(argv[1:])
        except SystemExit as exc:     # --help
            return int(exc.code or 0)
        handler(args)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(usage(verbs), file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    logging.basicConfig(level=os.environ.get("GROUP3AD_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
