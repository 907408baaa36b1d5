"""Command-line experiment runner.

`fedte run` executes one or more (variant, seed) federated runs and writes
metrics.csv, summary.json, manifest.json and optionally trajectory.csv per
run. `fedte compare` tabulates rounds-to-threshold across summaries and the
relative round reduction of the -TE variants against their base algorithms.

Config files are flat `key = value` text; command-line flags win.
"""

import argparse
import csv
import json
import os
import statistics
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .analysis import converged_accuracy, rounds_to_accuracy
from .data import load_cifar10, load_idx
from .errors import ConfigError, DivergenceError, IngestionError
from .nn import Network, baseline_cnn
from .orchestrator import AlgorithmVariant, FedConfig, run_experiment

DEFAULTS = {
    "dataset": "mnist",
    "data_dir": "data",
    "variant": "fedavg",
    "alpha": 1.0,
    "beta": 0.2,
    "gamma": 1.0,
    "clients": 10,
    "ratio": 0.2,
    "epochs": 2,
    "batch": 50,
    "rounds": 100,
    "lr": 0.005,
    "lr_decay": 0.99,
    "seed": "1",
    "proxy_fraction": 0.01,
    "fisher_samples": 1024,
    "out_dir": "runs",
    "save_trajectory": False,
    "traj_stride": 1,
    "limit_train": 0,
    "limit_test": 0,
    "thresholds": "0.5,0.8,0.9,0.95",
    "window": 20,
}

# config keys that must agree for summaries to be comparable
FAMILY_KEYS = (
    "dataset", "gamma", "clients", "ratio", "epochs", "batch", "rounds",
    "lr", "lr_decay", "proxy_fraction", "limit_train", "limit_test",
)


def parse_config_file(path):
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
    return values


def _coerce(key, raw):
    template = DEFAULTS[key]
    if isinstance(template, bool):
        return str(raw).lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return str(raw)


def _find_file(data_dir, name):
    for candidate in (name, name + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    raise IngestionError(f"missing dataset file: {os.path.join(data_dir, name)}")


def load_dataset(dataset, data_dir):
    """Returns (train, test) for mnist / fashion / cifar10."""
    if dataset in ("mnist", "fashion"):
        train = load_idx(
            _find_file(data_dir, "train-images-idx3-ubyte"),
            _find_file(data_dir, "train-labels-idx1-ubyte"),
        )
        test = load_idx(
            _find_file(data_dir, "t10k-images-idx3-ubyte"),
            _find_file(data_dir, "t10k-labels-idx1-ubyte"),
        )
        return train, test
    if dataset == "cifar10":
        base = data_dir
        nested = os.path.join(data_dir, "cifar-10-batches-bin")
        if os.path.isdir(nested):
            base = nested
        train = load_cifar10(
            [_find_file(base, f"data_batch_{i}.bin") for i in range(1, 6)]
        )
        test = load_cifar10([_find_file(base, "test_batch.bin")])
        return train, test
    raise ConfigError(f"unknown dataset {dataset!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedte")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute federated training runs")
    run_p.add_argument("--config", help="flat key=value config file")
    run_p.add_argument("--dataset", choices=("mnist", "fashion", "cifar10"))
    run_p.add_argument("--data-dir", dest="data_dir")
    run_p.add_argument(
        "--variant",
        choices=("fedavg", "fedprox", "fedcl", "fedprox-te", "fedcl-te"),
    )
    run_p.add_argument("--alpha", type=float)
    run_p.add_argument("--beta", type=float)
    run_p.add_argument("--gamma", type=float)
    run_p.add_argument("--clients", type=int)
    run_p.add_argument("--ratio", type=float)
    run_p.add_argument("--epochs", type=int)
    run_p.add_argument("--batch", type=int)
    run_p.add_argument("--rounds", type=int)
    run_p.add_argument("--lr", type=float)
    run_p.add_argument("--lr-decay", dest="lr_decay", type=float)
    run_p.add_argument("--seed", help="seed or comma-separated seed list")
    run_p.add_argument("--proxy-fraction", dest="proxy_fraction", type=float)
    run_p.add_argument("--fisher-samples", dest="fisher_samples", type=int)
    run_p.add_argument("--out-dir", dest="out_dir")
    run_p.add_argument("--save-trajectory", dest="save_trajectory",
                       action="store_true", default=None)
    run_p.add_argument("--traj-stride", dest="traj_stride", type=int)
    run_p.add_argument("--limit-train", dest="limit_train", type=int,
                       help="truncate training set to N examples (0 = full)")
    run_p.add_argument("--limit-test", dest="limit_test", type=int)
    run_p.add_argument("--thresholds", help="comma-separated accuracy thresholds")
    run_p.add_argument("--window", type=int,
                       help="converged-accuracy window in rounds")

    cmp_p = sub.add_parser("compare", help="compare run summaries")
    cmp_p.add_argument("summaries", nargs="+", help="summary.json paths")
    cmp_p.add_argument("--thresholds", default="0.95")
    cmp_p.add_argument("--out", help="optional JSON report path")
    return parser


def merge_options(args):
    merged = dict(DEFAULTS)
    if args.config:
        merged.update(parse_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged.update({key: value})
    return merged


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def run_single(opts, seed, train, test):
    """One (variant, seed) run; returns the output directory."""
    variant = AlgorithmVariant(opts["variant"], opts["alpha"], opts["beta"])
    stride = opts["traj_stride"] if opts["save_trajectory"] else 0
    cfg = FedConfig(
        clients=opts["clients"], ratio=opts["ratio"], epochs=opts["epochs"],
        batch_size=opts["batch"], rounds=opts["rounds"], lr=opts["lr"],
        lr_decay=opts["lr_decay"], seed=seed, variant=variant,
        gamma=opts["gamma"], proxy_fraction=opts["proxy_fraction"],
        fisher_samples=opts["fisher_samples"], model_stride=stride,
    )
    net = Network(baseline_cnn(train.input_shape))

    run_dir = os.path.join(opts["out_dir"], f"{opts['variant']}_seed{seed}")
    os.makedirs(run_dir, exist_ok=True)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    started = datetime.now(timezone.utc).isoformat()

    records = []
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "selected_clients", "test_accuracy",
                         "test_loss", "lr"])

        def on_round(rec):
            records.append(rec)
            writer.writerow([
                rec.round,
                ";".join(str(c) for c in rec.selected),
                repr(rec.test_accuracy),
                repr(rec.test_loss),
                repr(rec.lr),
            ])
            f.flush()

        run_experiment(cfg, train, test, net=net, on_round=on_round)

    thresholds = [float(t) for t in str(opts["thresholds"]).split(",") if t]
    summary = {
        "variant": opts["variant"],
        "alpha": opts["alpha"],
        "beta": opts["beta"],
        "seed": seed,
        "dataset": opts["dataset"],
        "rounds_to_threshold": {
            str(t): rounds_to_accuracy(records, t) for t in thresholds
        },
        "converged_accuracy": converged_accuracy(
            records, min(opts["window"], len(records))
        ),
        "accuracy": [r.test_accuracy for r in records],
        "loss": [r.test_loss for r in records],
        "config": {k: opts[k] for k in DEFAULTS},
    }
    _write_json(os.path.join(run_dir, "summary.json"), summary)

    outputs = {"metrics": metrics_path,
               "summary": os.path.join(run_dir, "summary.json")}
    stored = [(r.round, r.params) for r in records if r.params is not None]
    if stride and len(stored) < 3:
        print("warning: fewer than 3 stored models, skipping trajectory",
              file=sys.stderr)
    elif stride:
        from .analysis import pca_trajectory

        traj = pca_trajectory([p for _, p in stored],
                              rounds=[rd for rd, _ in stored])
        traj_path = os.path.join(run_dir, "trajectory.csv")
        with open(traj_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "x", "y"])
            for rd, x, y in traj.points:
                writer.writerow([rd, repr(x), repr(y)])
        outputs["trajectory"] = traj_path

    manifest = {
        "artifact_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "config": dict(summary["config"], seed=seed),
        "outputs": outputs,
    }
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    return run_dir


def cmd_run(args):
    opts = merge_options(args)
    try:
        train, test = load_dataset(opts["dataset"], opts["data_dir"])
    except (IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if opts["limit_train"]:
        train = train.subset(np.arange(min(opts["limit_train"], len(train))))
    if opts["limit_test"]:
        test = test.subset(np.arange(min(opts["limit_test"], len(test))))

    seeds = [int(s) for s in str(opts["seed"]).split(",") if s]
    for seed in seeds:
        try:
            run_dir = run_single(opts, seed, train, test)
        except DivergenceError as exc:
            print(f"error: {exc} (partial metrics preserved)", file=sys.stderr)
            return 1
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"run complete: {run_dir}")
    return 0


def _median_rounds(summaries, threshold):
    """Median rounds-to-threshold over seeds; None if any seed never reaches."""
    rounds = [rounds_to_accuracy(s["accuracy"], threshold) for s in summaries]
    if any(r is None for r in rounds):
        return None
    return statistics.median(rounds)


def cmd_compare(args):
    summaries = []
    for path in args.summaries:
        with open(path) as f:
            summaries.append(json.load(f))
    if len(summaries) < 2:
        print("error: need at least two summaries", file=sys.stderr)
        return 2

    base_cfg = {k: summaries[0]["config"][k] for k in FAMILY_KEYS}
    for path, summary in zip(args.summaries[1:], summaries[1:]):
        cfg = {k: summary["config"][k] for k in FAMILY_KEYS}
        if cfg != base_cfg:
            diff = {k: (base_cfg[k], cfg[k]) for k in FAMILY_KEYS
                    if cfg[k] != base_cfg[k]}
            print(f"error: {path} is not config-compatible with "
                  f"{args.summaries[0]}: {diff}", file=sys.stderr)
            return 2

    thresholds = [float(t) for t in args.thresholds.split(",") if t]
    by_variant = {}
    for summary in summaries:
        by_variant.setdefault(summary["variant"], []).append(summary)

    report = {"thresholds": thresholds, "variants": {}, "reductions": {}}
    print(f"{'variant':<12} {'seeds':>5} " +
          " ".join(f"r@{t:g}".rjust(8) for t in thresholds) +
          "  conv_acc")
    for variant, group in sorted(by_variant.items()):
        entry = {
            "seeds": [s["seed"] for s in group],
            "rounds_to_threshold": {
                str(t): _median_rounds(group, t) for t in thresholds
            },
            "converged_accuracy": statistics.median(
                s["converged_accuracy"] for s in group
            ),
        }
        report["variants"][variant] = entry
        cells = " ".join(
            str(entry["rounds_to_threshold"][str(t)] or "-").rjust(8)
            for t in thresholds
        )
        print(f"{variant:<12} {len(group):>5} {cells}  "
              f"{entry['converged_accuracy']:.4f}")

    for te_variant in by_variant:
        if not te_variant.endswith("-te"):
            continue
        base = te_variant[:-3]
        if base not in by_variant:
            continue
        for t in thresholds:
            base_r = report["variants"][base]["rounds_to_threshold"][str(t)]
            te_r = report["variants"][te_variant]["rounds_to_threshold"][str(t)]
            key = f"{te_variant}_vs_{base}@{t:g}"
            if base_r is None or te_r is None:
                report["reductions"][key] = None
                print(f"{key}: not reached")
            else:
                reduction = (base_r - te_r) / base_r
                report["reductions"][key] = reduction
                print(f"{key}: round reduction {100 * reduction:.1f}%")

    if args.out:
        _write_json(args.out, report)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_compare(args)


if __name__ == "__main__":
    sys.exit(main())
