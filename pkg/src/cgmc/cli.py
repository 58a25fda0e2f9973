"""Command-line front end: prepare data, train, evaluate, diagnose, sweep.

Subcommands: ``prepare``, ``train``, ``baseline`` (train with an explicit
method), ``evaluate``, ``gradcheck``, ``spectral-check``, ``sweep``.  Every
command is deterministic for a fixed seed; the ``GEOMC_THREADS`` environment
variable caps internal parallelism (default 1).

Exit codes: 0 success, 1 failed check or diverged run, 2 usage error or
missing file, 3 malformed data.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .data import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VALID,
    load_split_files,
    rmse,
    save_ratings,
)
from .exceptions import (
    CgmcError,
    CheckpointError,
    ConfigError,
    DomainError,
    NumericError,
    ParseError,
    ShapeError,
    TrainingDiverged,
)
from .graphs import FeatureTable, knn_graph, rating_row_features, read_features_csv
from .model import ModelState, load_checkpoint, save_checkpoint
from .sparsegraph import (
    mixed_filter_symmetric,
    read_edge_list,
    spectral_radius,
    write_edge_list,
)
from .towers import tower_forward
from .training import (
    GradCheckInstance,
    TrainConfig,
    grad_check,
    make_validation_split,
    operator_for_method,
    predict_pairs,
    train,
)

GAMMA_GRID = tuple(10.0 ** e for e in range(-8, 9))
DIM_GRID = (8, 16, 32, 64)
SPECTRAL_TOL = 1e-9


def thread_cap():
    raw = os.environ.get("GEOMC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _limit_blas_threads():
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=thread_cap())


@dataclass
class RunManifest:
    """Reproducibility record written atomically at the end of a run."""

    command: str
    config: dict
    inputs: dict
    version: str
    epoch_seconds: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def write(self, path):
        payload = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "version": self.version,
            "epoch_seconds": self.epoch_seconds,
            "metrics": self.metrics,
        }
        tmp = str(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def describe_version():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"cgmc-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"cgmc-{__version__}"


def fingerprint(paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        h = hashlib.sha256()
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        out[str(p)] = {"bytes": os.path.getsize(p), "sha256": h.hexdigest()}
    return out


class _OutputTracker:
    """Removes partially written outputs when a command fails."""

    def __init__(self):
        self.paths = []

    def register(self, path):
        self.paths.append(str(path))
        return path

    def discard_all(self):
        for p in self.paths:
            try:
                os.unlink(p)
            except OSError:
                pass


def _parse_levels(text):
    try:
        levels = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad rating levels {text!r}") from None
    if not levels:
        raise ConfigError("rating levels must be nonempty")
    return levels


def _load_ratings(args, remap=True, m=None, n=None):
    return load_split_files(
        train=args.train,
        test=getattr(args, "test", None),
        valid=getattr(args, "valid", None),
        format=args.format,
        levels=_parse_levels(args.levels),
        remap=remap,
        m=m,
        n=n,
    )


def _build_config(args):
    cfg = TrainConfig() if args.config is None else TrainConfig.from_file(args.config)
    overrides = {
        "d": args.d, "layers": args.layers, "gamma": args.gamma,
        "eta": args.eta, "momentum": args.momentum,
        "batch_size": args.batch_size, "epochs": args.epochs,
        "seed": args.seed, "early_stop_patience": args.patience,
        "update_mode": args.update_mode, "scaling": args.scaling,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.clip:
        overrides["clip"] = True
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _resolve_method(args):
    method = args.method
    if getattr(args, "no_fc", False):
        if method == "cgmc":
            method = "cgmc0"
        elif method == "gcnkw":
            method = "gcnkw0"
    return method


def _load_graphs(args, method, m, n):
    user_op = item_op = None
    if args.user_graph:
        user_op = operator_for_method(read_edge_list(args.user_graph, m), method)
    if args.item_graph:
        item_op = operator_for_method(read_edge_list(args.item_graph, n), method)
    return user_op, item_op


def _load_features(path, expected_n, side):
    if path is None:
        return None
    table = read_features_csv(path)
    if table.n != expected_n:
        raise ShapeError(
            f"{side} feature file has {table.n} rows, expected {expected_n}"
        )
    return table


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args, parser):
    if args.knn is not None and args.knn < 1:
        parser.error("--knn must be a positive neighbor count")
    ratings = _load_ratings(args)
    if args.valid_size is not None:
        size = ratings.count(SPLIT_TEST) if args.valid_size == "auto" else int(args.valid_size)
        ratings = make_validation_split(ratings, size, args.seed)
    os.makedirs(args.out, exist_ok=True)
    tracker = _OutputTracker()
    try:
        print(f"users: {ratings.m}  items: {ratings.n}")
        for code, name in ((SPLIT_TRAIN, "train"), (SPLIT_VALID, "valid"),
                           (SPLIT_TEST, "test")):
            count = ratings.count(code)
            print(f"{name} triples: {count}")
            if count:
                path = tracker.register(os.path.join(args.out, f"{name}.tsv"))
                save_ratings(ratings, path, code)
        if args.knn is not None:
            sides = ("user", "item") if args.side == "both" else (args.side,)
            for side in sides:
                expected = ratings.m if side == "user" else ratings.n
                feat_path = getattr(args, f"{side}_features")
                if feat_path:
                    features = _load_features(feat_path, expected, side)
                else:
                    features = rating_row_features(ratings, side)
                graph = knn_graph(features, args.knn)
                path = tracker.register(os.path.join(args.out, f"{side}_graph.tsv"))
                write_edge_list(graph, path)
                n_edges = sum(1 for i, j, _ in graph.entries() if i < j)
                print(f"{side} graph: {graph.n_rows} nodes, {n_edges} edges")
    except BaseException:
        tracker.discard_all()
        raise
    return 0


def _train_once(args, cfg, method):
    ratings = _load_ratings(args)
    if args.valid_size is not None:
        size = ratings.count(SPLIT_TEST) if args.valid_size == "auto" else int(args.valid_size)
        ratings = make_validation_split(ratings, size, cfg.seed)
    user_op, item_op = _load_graphs(args, method, ratings.m, ratings.n)
    user_features = _load_features(args.user_features, ratings.m, "user")
    item_features = _load_features(args.item_features, ratings.n, "item")
    model, history = train(
        ratings, user_op, item_op, cfg, method=method,
        user_features=user_features, item_features=item_features,
        beta_w=args.beta, beta_h=args.beta,
    )
    metrics = {"epochs_run": len(history)}
    if history:
        best = min(
            history,
            key=lambda s: s.valid_rmse if np.isfinite(s.valid_rmse) else s.train_rmse,
        )
        metrics["best_epoch"] = best.epoch
        metrics["train_rmse"] = best.train_rmse
        if np.isfinite(best.valid_rmse):
            metrics["valid_rmse"] = best.valid_rmse
    if ratings.count(SPLIT_TEST):
        users, items, actuals = ratings.triples(SPLIT_TEST)
        preds = predict_pairs(
            model, users, items, user_op=user_op, item_op=item_op,
            user_features=user_features, item_features=item_features,
        )
        if cfg.clip:
            preds = np.clip(preds, min(ratings.levels), max(ratings.levels))
        metrics["test_rmse"] = rmse(preds, actuals)
    return model, history, metrics, [s.seconds for s in history]


def cmd_train(args, parser):
    cfg = _build_config(args)
    method = _resolve_method(args)
    os.makedirs(args.out, exist_ok=True)
    tracker = _OutputTracker()
    try:
        model, history, metrics, per_epoch = _train_once(args, cfg, method)
        ckpt = tracker.register(os.path.join(args.out, "checkpoint.bin"))
        save_checkpoint(model, ckpt)
        hist_path = tracker.register(os.path.join(args.out, "history.csv"))
        with open(hist_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_rmse,valid_rmse,loss\n")
            for s in history:
                fh.write(
                    f"{s.epoch},{s.train_rmse:.17g},{s.valid_rmse:.17g},{s.loss:.17g}\n"
                )
        manifest = RunManifest(
            command="train",
            config={**cfg.to_dict(), "method": method, "beta": args.beta},
            inputs=fingerprint([args.train, args.valid, args.test,
                                args.user_graph, args.item_graph,
                                args.user_features, args.item_features,
                                args.config]),
            version=describe_version(),
            epoch_seconds=per_epoch,
            metrics=metrics,
        )
        manifest.write(tracker.register(os.path.join(args.out, "manifest.json")))
        for key in ("valid_rmse", "test_rmse"):
            if key in metrics:
                print(f"{key.replace('_', ' ')}: {metrics[key]:.3f}")
                print(f"{key} exact: {metrics[key]:.17g}")
        print(f"checkpoint: {ckpt}")
    except BaseException:
        tracker.discard_all()
        raise
    return 0


def cmd_evaluate(args, parser):
    model = load_checkpoint(args.checkpoint)
    if isinstance(model, ModelState):
        m = model.user_tower.n
        n = model.item_tower.n
    else:
        m, n = model.m, model.n
    ratings = _load_ratings(args, remap=False, m=m, n=n)
    code = SPLIT_TEST if ratings.count(SPLIT_TEST) else SPLIT_TRAIN
    users, items, actuals = ratings.triples(code)
    method = "gcnkw" if (isinstance(model, ModelState) and not model.weighted) else "cgmc"
    user_op, item_op = _load_graphs(args, method, m, n)
    user_features = _load_features(args.user_features, m, "user")
    item_features = _load_features(args.item_features, n, "item")
    preds = predict_pairs(
        model, users, items, user_op=user_op, item_op=item_op,
        user_features=user_features, item_features=item_features,
    )
    if args.clip:
        preds = np.clip(preds, min(ratings.levels), max(ratings.levels))
    value = rmse(preds, actuals)
    if args.dump:
        with open(args.dump, "w", encoding="utf-8") as fh:
            fh.write("user,item,predicted,actual\n")
            for u, i, p, a in zip(users, items, preds, actuals):
                fh.write(f"{u},{i},{p:.17g},{a:.17g}\n")
    print(f"test RMSE: {value:.3f}")
    print(f"test RMSE exact: {value:.17g}")
    return 0


def cmd_gradcheck(args, parser):
    failures = 0
    for seed in range(args.seed, args.seed + args.instances):
        rng = np.random.default_rng(seed)
        inst = GradCheckInstance(
            n_users=int(rng.integers(4, 11)),
            n_items=int(rng.integers(4, 11)),
            d=int(rng.integers(1, 5)),
            layers=int(rng.integers(1, 4)),
            with_fc=bool(rng.integers(0, 2)),
            featureless=bool(rng.integers(0, 2)),
            gamma=float(rng.choice([0.0, 0.1])),
            seed=seed,
        )
        report = grad_check(inst, tol=args.tol)
        name, worst = report.worst()
        status = "ok" if report.passed else "FAIL"
        print(
            f"instance seed={seed} users={inst.n_users} items={inst.n_items} "
            f"d={inst.d} layers={inst.layers} fc={inst.with_fc} "
            f"gamma={inst.gamma}: max_rel_err={worst:.3e} ({name}) {status}"
        )
        if not report.passed:
            failures += 1
            for group in report.failing_groups():
                print(f"  group {group}: {report.errors[group]:.3e} > {args.tol:.1e}")
    if failures:
        print(f"{failures} of {args.instances} instances failed")
        return 1
    print(f"all {args.instances} instances within {args.tol:.1e}")
    return 0


def cmd_spectral_check(args, parser):
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, ModelState):
        print("spectral-check requires a two-tower checkpoint", file=sys.stderr)
        return 2
    m = model.user_tower.n
    n = model.item_tower.n
    method = "cgmc" if model.weighted else "gcnkw"
    user_op, item_op = _load_graphs(args, method, m, n)
    worst = 0.0
    for side, tower, op in (("user", model.user_tower, user_op),
                            ("item", model.item_tower, item_op)):
        if op is None:
            continue
        sigma = tower.sigma()
        if sigma is None:
            operator = op.matmul
        else:
            # symmetric form with identical spectrum; the estimate then
            # approaches the radius from below instead of overshooting
            operator = mixed_filter_symmetric(op, sigma)
        radius = spectral_radius(operator, op.n, iters=args.iters, seed=args.seed)
        worst = max(worst, radius)
        print(f"{side} filter spectral radius: {radius:.12f}")
    if worst > 1.0 + SPECTRAL_TOL:
        print(f"FAIL: spectral radius {worst} exceeds 1 + {SPECTRAL_TOL}")
        return 1
    print("spectral bound satisfied")
    return 0


def _sweep_point(payload):
    """One grid point; runs in-process or in a worker process."""
    ns = argparse.Namespace(**payload["args"])
    cfg = TrainConfig(**payload["config"])
    try:
        _, history, metrics, _ = _train_once(ns, cfg, payload["method"])
        valid = min((s.valid_rmse for s in history), default=float("nan"))
        return payload["value"], valid, metrics.get("test_rmse", float("nan"))
    except TrainingDiverged:
        return payload["value"], float("nan"), float("nan")


def cmd_sweep(args, parser):
    cfg = _build_config(args)
    method = _resolve_method(args)
    if args.values:
        values = [float(v) for v in args.values.split(",")]
    elif args.param == "gamma":
        values = list(GAMMA_GRID)
    else:
        values = list(DIM_GRID)
    os.makedirs(args.out, exist_ok=True)
    arg_payload = {
        "train": args.train, "valid": args.valid, "test": args.test,
        "format": args.format, "levels": args.levels,
        "valid_size": args.valid_size,
        "user_graph": args.user_graph, "item_graph": args.item_graph,
        "user_features": args.user_features, "item_features": args.item_features,
        "beta": args.beta,
    }
    jobs = []
    for v in values:
        point_cfg = replace(cfg, gamma=v) if args.param == "gamma" else replace(cfg, d=int(v))
        jobs.append({
            "args": arg_payload,
            "config": point_cfg.to_dict(),
            "method": method,
            "value": v,
        })
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    tracker = _OutputTracker()
    try:
        path = tracker.register(os.path.join(args.out, f"sweep_{args.param}.csv"))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{args.param},valid_rmse,test_rmse\n")
            for value, valid, test in rows:
                fh.write(f"{value:.17g},{valid:.17g},{test:.17g}\n")
        print(f"swept {len(rows)} values of {args.param} -> {path}")
    except BaseException:
        tracker.discard_all()
        raise
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(sub):
    sub.add_argument("--config", default=None, help="flat key = value config file")
    sub.add_argument("--seed", type=int, default=None, help="seed override")
    sub.add_argument("--out", default=".", help="output directory")


def _add_data_args(sub, include_valid=True):
    sub.add_argument("--train", required=True, help="training rating file")
    sub.add_argument("--test", default=None, help="test rating file")
    if include_valid:
        sub.add_argument("--valid", default=None, help="validation rating file")
        sub.add_argument(
            "--valid-size", default=None,
            help="carve a validation split from train: a count, or 'auto' "
                 "to match the test split size",
        )
    sub.add_argument("--format", choices=("ml100k", "ml1m"), default="ml100k")
    sub.add_argument("--levels", default="1,2,3,4,5",
                     help="comma-separated legal rating values")


def _add_graph_args(sub):
    sub.add_argument("--user-graph", default=None, help="user edge-list file")
    sub.add_argument("--item-graph", default=None, help="item edge-list file")
    sub.add_argument("--user-features", default=None, help="user feature CSV")
    sub.add_argument("--item-features", default=None, help="item feature CSV")


def _add_train_args(sub):
    sub.add_argument("--method", choices=("cgmc", "cgmc0", "gcnkw", "mf", "grals"),
                     default="cgmc")
    sub.add_argument("--no-fc", action="store_true",
                     help="drop the fully connected projection layer")
    sub.add_argument("--d", type=int, default=None)
    sub.add_argument("--layers", type=int, default=None)
    sub.add_argument("--gamma", type=float, default=None)
    sub.add_argument("--eta", type=float, default=None)
    sub.add_argument("--momentum", type=float, default=None)
    sub.add_argument("--batch-size", type=int, default=None)
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--patience", type=int, default=None)
    sub.add_argument("--update-mode", choices=("joint", "alternating"), default=None)
    sub.add_argument("--scaling", choices=("none", "divide_max", "center_divide"),
                     default=None)
    sub.add_argument("--clip", action="store_true",
                     help="clip predictions to the rating range at evaluation")
    sub.add_argument("--beta", type=float, default=0.1,
                     help="Laplacian penalty weight for grals")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cgmc",
        description="Graph-convolutional matrix completion toolkit",
    )
    subs = parser.add_subparsers(dest="cmd", required=True)

    p = subs.add_parser("prepare", help="build graphs and split files")
    _add_data_args(p)
    p.add_argument("--knn", type=int, default=None,
                   help="neighbor count for graph construction")
    p.add_argument("--side", choices=("user", "item", "both"), default="both")
    p.add_argument("--features", choices=("ratings",), default="ratings",
                   help="feature source for kNN (rating rows unless CSVs given)")
    p.add_argument("--user-features", default=None, help="user feature CSV")
    p.add_argument("--item-features", default=None, help="item feature CSV")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    for name, help_text in (("train", "train a model"),
                            ("baseline", "train a baseline (alias of train)")):
        p = subs.add_parser(name, help=help_text)
        _add_data_args(p)
        _add_graph_args(p)
        _add_train_args(p)
        _add_common(p)
        p.set_defaults(func=cmd_train)

    p = subs.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p, include_valid=False)
    _add_graph_args(p)
    p.add_argument("--clip", action="store_true")
    p.add_argument("--dump", default=None, help="write user,item,predicted,actual CSV")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("spectral-check", help="verify the trained filter's spectral bound")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user-graph", default=None)
    p.add_argument("--item-graph", default=None)
    p.add_argument("--iters", type=int, default=1000)
    _add_common(p)
    p.set_defaults(func=cmd_spectral_check)

    p = subs.add_parser("sweep", help="grid sweep for sensitivity curves")
    _add_data_args(p)
    _add_graph_args(p)
    _add_train_args(p)
    p.add_argument("--param", choices=("gamma", "d"), required=True)
    p.add_argument("--values", default=None,
                   help="comma-separated grid override")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_blas_threads()
    try:
        return args.func(args, parser)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (ParseError, DomainError, ShapeError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CgmcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
