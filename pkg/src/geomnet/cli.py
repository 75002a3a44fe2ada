"""Command-line interface: ``geomnet train | eval | selfcheck``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure,
3 self-check failure.  ``GEOMNET_THREADS`` caps the BLAS thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import model as M
from .autodiff import NumericError
from .config import RunConfig, format_config, load_config
from .data import DatasetSplit, ParseError, generate_synthetic, default_class_spec, load_sbu, normalize, sbu_folds
from .selfcheck import format_report, run_selfcheck
from .topology import ConfigError, builtin_topology, load_topology
from .train import TrainingDiverged, evaluate, param_norms, train

logger = logging.getLogger("geomnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SELFCHECK = 0, 1, 2, 3
THREADS_ENV = "GEOMNET_THREADS"


# ------------------------------------------------------------------- helpers


def resolve_topology(spec: str):
    if os.path.sep in spec or spec.endswith(".topo"):
        return load_topology(spec)
    return builtin_topology(spec)


def load_datasets(cfg: RunConfig, topo):
    """Yield ``(name, train split, test split)`` for the configured data source."""
    if cfg.dataset == "synthetic":
        spec = default_class_spec(cfg.n_classes)
        full = generate_synthetic(spec, cfg.synthetic_train + cfg.synthetic_test, cfg.seed,
                                  cfg.synthetic_sigma, cfg.synthetic_frames)
        seqs = [normalize(s, topo) for s in full.sequences]
        yield ("synthetic", DatasetSplit(seqs[:cfg.synthetic_train], "train"),
               DatasetSplit(seqs[cfg.synthetic_train:], "test"))
        return
    split = load_sbu(cfg.data_path, topo)
    if len(split) == 0:
        raise ConfigError(f"no SBU sequences under {cfg.data_path}")
    split = DatasetSplit([normalize(s, topo) for s in split.sequences], split.name)
    split.check_labels(cfg.n_classes)
    for i, (tr, te) in enumerate(sbu_folds(split), 1):
        if cfg.fold == "all" or cfg.fold == str(i):
            yield f"fold{i}", tr, te


def save_params(path, params, cfg: RunConfig):
    np.savez(path, __config__=np.array(format_config(cfg)), **params)


def load_params(path):
    with np.load(path) as data:
        return {k: data[k] for k in data.files if k != "__config__"}


def _overrides(args):
    keys = ("seed", "epochs", "k", "out")
    out = {k: getattr(args, k, None) for k in keys}
    out["k_prime"] = getattr(args, "kprime", None)
    for flag in ("no_pt", "no_ltml"):
        if getattr(args, flag, False):
            out[flag] = True
    return out


# ------------------------------------------------------------------ commands


def run_train(cfg: RunConfig) -> dict:
    """Train on every selected split; writes parameters, metrics and a summary."""
    topo = resolve_topology(cfg.topology)
    net = cfg.geomnet_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    summary = {"runs": [], "config": dataclasses.asdict(cfg)}
    metrics_path = out / "metrics.jsonl"
    start = time.perf_counter()
    with open(metrics_path, "w") as metrics:
        for name, tr, te in load_datasets(cfg, topo):
            tr_seqs, te_seqs = tr.sequences, te.sequences

            def log_epoch(rec, name=name):
                metrics.write(json.dumps({"run": name, **dataclasses.asdict(rec)}) + "\n")
                metrics.flush()

            result = train(tr_seqs, tr.labels, topo, net, cfg.adam_config(), cfg.epochs,
                           cfg.batch_size, cfg.seed, test=(te_seqs, te.labels),
                           on_epoch=log_epoch, lr_scale=cfg.lr_scale)
            suffix = "" if name == "synthetic" else f"_{name}"
            save_params(out / f"params{suffix}.npz", result.params, cfg)
            train_acc, train_conf = evaluate(tr_seqs, tr.labels, topo, result.params, net)
            entry = {"name": name, "train_accuracy": train_acc,
                     "train_confusion": train_conf.tolist(),
                     "final_loss": result.history[-1].loss if result.history else None}
            if len(te_seqs):
                test_acc, test_conf = evaluate(te_seqs, te.labels, topo, result.params, net)
                entry.update(test_accuracy=test_acc, test_confusion=test_conf.tolist())
            entry["parallel_transport"] = net.use_pt
            entry["lw_is_identity"] = bool(all(
                np.array_equal(result.params[f"lw_{s}"], np.eye(net.tri_dim)) for s in M.STREAMS))
            summary["runs"].append(entry)
    tests = [r["test_accuracy"] for r in summary["runs"] if "test_accuracy" in r]
    if tests:
        summary["mean_test_accuracy"] = float(np.mean(tests))
    summary["seconds"] = time.perf_counter() - start
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_eval(params_path, cfg: RunConfig, split="test") -> dict:
    topo = resolve_topology(cfg.topology)
    net = cfg.geomnet_config()
    try:
        params = load_params(params_path)
    except OSError as exc:
        raise ConfigError(f"cannot read parameters {params_path}: {exc}") from None
    try:
        M.check_params(params, net)
    except ValueError as exc:
        raise ConfigError(f"parameters do not fit the configuration: {exc}") from None
    results = []
    for name, tr, te in load_datasets(cfg, topo):
        data = tr if split == "train" else te
        if len(data) == 0:
            raise ConfigError(f"{name}: the {split} split is empty")
        acc, conf = evaluate(data.sequences, data.labels, topo, params, net)
        results.append({"name": name, "split": split, "accuracy": acc,
                        "confusion": conf.tolist()})
    return {"results": results}


# ---------------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(prog="geomnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--no-pt", action="store_true", help="covariance without parallel transport")
        p.add_argument("--no-ltml", action="store_true", help="fix the triangular weights to I")
        p.add_argument("--k", type=int)
        p.add_argument("--kprime", type=int)
        p.add_argument("--out", metavar="DIR")

    run_flags(sub.add_parser("train", help="train and write parameters and metrics"))
    ev = sub.add_parser("eval", help="evaluate saved parameters")
    run_flags(ev)
    ev.add_argument("--params", required=True, metavar="FILE")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    sc = sub.add_parser("selfcheck", help="run the geometry and gradient property checks")
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--sizes", default="2,3,4")
    sc.add_argument("--trials", type=int, default=20)
    return parser


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=int(value))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            if args.command == "selfcheck":
                try:
                    sizes = tuple(int(s) for s in args.sizes.split(","))
                except ValueError:
                    raise ConfigError(f"--sizes must be comma-separated integers") from None
                results = run_selfcheck(args.seed, sizes, args.trials)
                print(format_report(results))
                return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK
            cfg = load_config(args.config, _overrides(args))
            if args.command == "train":
                summary = run_train(cfg)
                for r in summary["runs"]:
                    test = r.get("test_accuracy")
                    print(f"{r['name']}: train accuracy {r['train_accuracy']:.4f}"
                          + ("" if test is None else f", test accuracy {test:.4f}"))
                if "mean_test_accuracy" in summary:
                    print(f"mean test accuracy {summary['mean_test_accuracy']:.4f}")
                print(f"outputs in {cfg.out}")
            else:
                report = run_eval(args.params, cfg, args.split)
                for r in report["results"]:
                    print(f"{r['name']} ({r['split']}): accuracy {r['accuracy']:.4f}")
                    print("confusion (rows = true class):")
                    for row in r["confusion"]:
                        print("  " + " ".join(f"{c:4d}" for c in row))
                if args.out:
                    Path(args.out).mkdir(parents=True, exist_ok=True)
                    (Path(args.out) / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    except TrainingDiverged as exc:
        print(f"error: {exc}; last parameter norms:", file=sys.stderr)
        for k, v in exc.norms.items():
            print(f"  {k}: {v:.6g}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
