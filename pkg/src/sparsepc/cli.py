"""Command-line harness: ``sparsepc <command> [options]``.

Every command writes into ``--out``. Attack-style commands produce a JSON-lines
file of per-sample records, a one-row-per-configuration CSV aggregate and a
JSON report that echoes the full configuration.

Configuration precedence is: built-in defaults, then the sections of the
``--config`` JSON file (``gen``, ``train``, ``attack``, ``removal``,
``defense``), then explicit command-line flags.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import aggregate_overlap, overlap_from_selection, transfer_eval
from .attack import AttackConfig, NotAttackable, run_attack
from .baselines import STRATEGIES, RemovalStrategy, removal_attack
from .core import ContractViolation
from .data import CLASSES, gen_dataset, load_xyz, read_manifest, save_xyz, write_dataset
from .defense import DefenseConfig, defense_success_rate
from .net import TrainConfig, load_checkpoint, train

__all__ = ["main", "build_parser", "aggregate", "CSV_FIELDS", "REFERENCE_ROWS"]

logger = logging.getLogger("sparsepc")

CSV_FIELDS = (
    "method", "mode", "metric", "success_rate", "chamfer_mean", "hausdorff_mean", "points_mean", "n_samples",
)

# full-scale figures (ModelNet40, PointNet, N=1024) kept for side-by-side reading only
REFERENCE_ROWS = (
    {"method": "reference:ours", "mode": "perturb", "metric": "hausdorff", "success_rate": 0.8938,
     "chamfer_mean": 1.55e-4, "hausdorff_mean": 1.88e-2, "points_mean": 36, "n_samples": ""},
    {"method": "reference:removal-saliency_high", "mode": "remove", "metric": "", "success_rate": 0.8211,
     "chamfer_mean": 91.30e-4, "hausdorff_mean": 15.70e-2, "points_mean": 400, "n_samples": ""},
)
REFERENCE_NOTES = {
    "outlier_defense_vs_ours": 0.9555,
    "transfer_pointnet_to_pointnet2_perturb": 0.0768,
    "selected_identical_to_critical": 0.5,
    "selected_near_critical": 0.8,
}


class CommandError(RuntimeError):
    """A command cannot run because an input artifact is missing or inconsistent."""


# -- helpers ------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.10g}"
    return str(x)


def aggregate(records, method, mode, metric):
    """One CSV row from per-sample records.

    The success rate is over all attacked samples; distances and point
    counts are averaged over successful samples only.
    """
    n = len(records)
    wins = [r for r in records if r["success"]]

    def mean(key):
        return float(np.mean([r[key] for r in wins])) if wins else float("nan")

    return {
        "method": method,
        "mode": mode,
        "metric": metric,
        "success_rate": len(wins) / n if n else float("nan"),
        "chamfer_mean": mean("chamfer"),
        "hausdorff_mean": mean("hausdorff"),
        "points_mean": mean("num_manipulated"),
        "n_samples": n,
    }


def write_csv(path, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in CSV_FIELDS})
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")


def read_jsonl(path):
    if not os.path.exists(path):
        raise CommandError(f"attack records not found: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CommandError(f"config file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise CommandError("config file must hold a JSON object")
    return doc


def _section(args, name):
    return dict(_load_config(args.config).get(name, {}))


def _overrides(args, mapping):
    """Collect explicitly given flags; ``mapping`` maps argparse dest to config field."""
    out = {}
    for dest, field in mapping.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[field] = value
    return out


def _dataset(path):
    try:
        return read_manifest(path)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from None


def _model(path):
    if not os.path.exists(path):
        raise CommandError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _test_samples(dataset, limit):
    """Test clouds, thinned to ``limit`` evenly spaced entries so every class stays represented."""
    test = dataset.test
    if limit is None or limit >= len(test):
        return test
    idx = np.linspace(0, len(test) - 1, int(limit)).round().astype(int)
    return [test[i] for i in np.unique(idx)]


def _map(fn, items, threads):
    # results come back in input order whatever the completion order
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- attack driver ------------------------------------------------------------


def _attack_one(cloud, clf, method, cfg, strategy):
    t0 = time.perf_counter()
    try:
        if method == "sparse":
            res = run_attack(cloud, clf, cfg)
        else:
            res = removal_attack(cloud, clf, strategy=strategy)
    except NotAttackable:
        return None, None
    rec = {"id": cloud.id, **res.record(), "wall_time": time.perf_counter() - t0,
           "selected": [int(i) for i in res.selected]}
    return rec, res.adversarial


def run_batch(samples, clf, method="sparse", cfg=AttackConfig(), strategy=None, threads=1):
    """Attack ``samples``; returns ``(records, adversarial clouds, excluded ids)`` in sample order."""
    outs = _map(lambda c: _attack_one(c, clf, method, cfg, strategy), samples, threads)
    records, advs, excluded = [], [], []
    for cloud, (rec, adv) in zip(samples, outs):
        if rec is None:
            excluded.append(cloud.id)
        else:
            records.append(rec)
            advs.append(adv)
    return records, advs, excluded


def _emit(out, name, records, advs, excluded, row, config_doc, save_clouds=True):
    write_jsonl(os.path.join(out, f"{name}.jsonl"), records)
    write_csv(os.path.join(out, f"{name}.csv"), [row])
    if save_clouds:
        adv_dir = os.path.join(out, f"{name}_adv")
        os.makedirs(adv_dir, exist_ok=True)
        for rec, adv in zip(records, advs):
            save_xyz(os.path.join(adv_dir, f"{rec['id']}.xyz"), adv)
    report = {
        "name": name,
        "config": config_doc,
        "aggregate": row,
        "n_excluded": len(excluded),
        "excluded_ids": excluded,
        "originals_intact_all": all(r["originals_intact"] for r in records),
    }
    write_json(os.path.join(out, f"{name}.json"), report)
    return report


ATTACK_FLAGS = {
    "mode": "mode", "metric": "metric", "lambda1": "lambda1", "lambda2": "lambda2", "gamma": "gamma",
    "iterations": "iterations", "K": "K", "init": "init", "tau": "binarize_threshold",
    "optimizer": "optimizer",
}


def _attack_config(args):
    doc = _section(args, "attack")
    doc.update(_overrides(args, ATTACK_FLAGS))
    doc["seed"] = args.seed
    if getattr(args, "no_keep_best", False):
        doc["keep_best"] = False
    if getattr(args, "early_exit", False):
        doc["early_exit"] = True
    return AttackConfig.from_dict(doc)


# -- commands -----------------------------------------------------------------


def cmd_gen(args):
    doc = {"classes": list(CLASSES), "per_class": 200, "n_points": 256, "jitter": 0.0}
    doc.update(_section(args, "gen"))
    doc.update(_overrides(args, {"per_class": "per_class", "points": "n_points", "jitter": "jitter"}))
    if args.classes:
        doc["classes"] = [c.strip() for c in args.classes.split(",") if c.strip()]
    ds = gen_dataset(doc["classes"], doc["per_class"], doc["n_points"], doc["jitter"], args.seed)
    try:
        os.makedirs(args.out, exist_ok=True)
        path = write_dataset(ds, args.out)
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {args.out}: {exc}") from None
    n_train, n_test = len(ds.train), len(ds.test)
    print(f"wrote {len(ds.clouds)} clouds ({n_train} train / {n_test} test) to {path}")
    return 0


def cmd_train(args):
    ds = _dataset(args.data)
    doc = _section(args, "train")
    doc.update(_overrides(args, {"arch": "arch", "epochs": "epochs", "lr": "learning_rate",
                                 "batch_size": "batch_size"}))
    doc["seed"] = args.seed
    cfg = TrainConfig(**doc)
    clf = train(ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, args.name or f"model_{cfg.arch}.json")
    clf.save(path)
    write_json(path[:-5] + "_train.json", {
        "config": asdict(cfg),
        "train_accuracy": clf.train_accuracy_,
        "test_accuracy": clf.test_accuracy_,
    })
    print(f"train accuracy {clf.train_accuracy_:.4f}  test accuracy {clf.test_accuracy_:.4f}  -> {path}")
    return 0


def _strategy(args):
    doc = _section(args, "removal")
    doc.update(_overrides(args, {"batch_size": "batch_size", "budget": "budget"}))
    doc["kind"] = args.method
    doc["seed"] = args.seed
    return RemovalStrategy.from_dict(doc)


def cmd_attack(args):
    ds = _dataset(args.data)
    clf = _model(args.model)
    samples = _test_samples(ds, args.limit)
    if args.method == "sparse":
        cfg, strategy = _attack_config(args), None
        config_doc = {"attack": cfg.to_dict(), "method": "sparse"}
        mode, metric, method = cfg.mode, cfg.metric, "ours"
    else:
        cfg, strategy = None, _strategy(args)
        config_doc = {"removal": json.loads(strategy.to_json()), "method": args.method}
        mode, metric, method = "remove", "", f"removal-{args.method}"
    config_doc.update({"seed": args.seed, "limit": args.limit, "data": args.data, "model": args.model})
    records, advs, excluded = run_batch(samples, clf, args.method, cfg, strategy, args.threads)
    row = aggregate(records, method, mode, metric)
    name = args.name or (f"attack_{mode}_{metric}" if args.method == "sparse" else f"removal_{args.method}")
    os.makedirs(args.out, exist_ok=True)
    report = _emit(args.out, name, records, advs, excluded, row, config_doc)
    print(_table([row]))
    print(f"excluded (misclassified before attack): {len(excluded)}")
    if mode == "add":
        print(f"original points untouched in every result: {report['originals_intact_all']}")
    return 0


def _load_adversarial(out, name):
    records = read_jsonl(os.path.join(out, f"{name}.jsonl"))
    adv_dir = os.path.join(out, f"{name}_adv")
    if not os.path.isdir(adv_dir):
        raise CommandError(f"adversarial clouds not found: {adv_dir}")
    clouds = []
    for rec in records:
        path = os.path.join(adv_dir, f"{rec['id']}.xyz")
        if not os.path.exists(path):
            raise CommandError(f"adversarial cloud missing: {path}")
        clouds.append(load_xyz(path))
    return records, clouds


def cmd_defend(args):
    clf = _model(args.model)
    records, clouds = _load_adversarial(args.out, args.attack)
    doc = _section(args, "defense")
    doc.update(_overrides(args, {"kind": "kind", "k": "k_neighbors", "alpha": "alpha",
                                 "remove_count": "remove_count"}))
    cfg = DefenseConfig.from_dict(doc)
    pairs = [(c, r["true_class"]) for c, r in zip(clouds, records) if r["success"]]
    if not pairs:
        raise CommandError(f"no successful adversarial examples in {args.attack}")
    rate = defense_success_rate([p for p, _ in pairs], [y for _, y in pairs], clf, cfg)
    report = {
        "attack": args.attack,
        "config": {"defense": json.loads(cfg.to_json()), "seed": args.seed, "model": args.model},
        "defense_success_rate": rate,
        "n_adversarial": len(pairs),
        "criterion": "restored to the true class",
    }
    if args.data:
        ds = _dataset(args.data)
        by_id = {c.id: c for c in ds.clouds}
        clean = [by_id[r["id"]] for r in records]
        report["clean_accuracy_after_defense"] = defense_success_rate(
            [c.points for c in clean], [c.label for c in clean], clf, cfg)
    name = args.name or f"defend_{cfg.kind}_{args.attack}"
    write_json(os.path.join(args.out, f"{name}.json"), report)
    print(f"{cfg.kind} defense success rate on {len(pairs)} adversarial examples: {rate:.4f}")
    return 0


def cmd_transfer(args):
    src, tgt = _model(args.source), _model(args.target)
    if src.n_classes_ != tgt.n_classes_:
        raise CommandError(f"class count mismatch: {src.n_classes_} vs {tgt.n_classes_}")
    records, clouds = _load_adversarial(args.out, args.attack)
    labels = [r["true_class"] for r in records]
    report = {
        "config": {"source": args.source, "target": args.target, "attack": args.attack,
                   "reverse_attack": args.reverse_attack, "seed": args.seed},
        "n_samples": len(records),
        "source_to_source": transfer_eval(clouds, labels, src, src),
        "source_to_target": transfer_eval(clouds, labels, src, tgt),
    }
    if args.reverse_attack:
        rrecs, rclouds = _load_adversarial(args.out, args.reverse_attack)
        rlabels = [r["true_class"] for r in rrecs]
        report["target_to_target"] = transfer_eval(rclouds, rlabels, tgt, tgt)
        report["target_to_source"] = transfer_eval(rclouds, rlabels, tgt, src)
    name = args.name or f"transfer_{args.attack}"
    write_json(os.path.join(args.out, f"{name}.json"), report)
    for key in ("source_to_source", "source_to_target", "target_to_target", "target_to_source"):
        if key in report:
            print(f"{key}: {report[key]:.4f}")
    return 0


ABLATIONS = (
    ("defaults", {}),
    ("lambda1=0", {"lambda1": 0.0}),
    ("lambda2=0", {"lambda2": 0.0}),
)


def ablation_configs(base):
    """The ablation grid: each sparsity/perceptibility setting in both modes, plus the metric swap."""
    swap = "chamfer" if base.metric == "hausdorff" else "hausdorff"
    grid = []
    for mode in ("perturb", "add"):
        for label, changes in ABLATIONS:
            grid.append((label, base.replace(mode=mode, **changes)))
        grid.append((f"metric={swap}", base.replace(mode=mode, metric=swap)))
    return grid


def cmd_ablate(args):
    ds = _dataset(args.data)
    clf = _model(args.model)
    samples = _test_samples(ds, args.limit)
    base = _attack_config(args)
    rows, configs = [], []
    for label, cfg in ablation_configs(base):
        records, advs, excluded = run_batch(samples, clf, "sparse", cfg, None, args.threads)
        row = aggregate(records, label, cfg.mode, cfg.metric)
        rows.append(row)
        configs.append({"label": label, "attack": cfg.to_dict(), "n_excluded": len(excluded)})
        tag = label.replace("=", "")
        write_jsonl(os.path.join(args.out, f"ablate_{cfg.mode}_{tag}.jsonl"), records)
        logger.info("%s %s done", label, cfg.mode)
    os.makedirs(args.out, exist_ok=True)
    name = args.name or "ablation"
    write_csv(os.path.join(args.out, f"{name}.csv"), rows)
    write_json(os.path.join(args.out, f"{name}.json"),
               {"config": {"seed": args.seed, "limit": args.limit, "runs": configs}, "rows": rows})
    print(_table(rows))
    return 0


def cmd_analyze(args):
    ds = _dataset(args.data)
    clf = _model(args.model)
    report_path = os.path.join(args.out, f"{args.attack}.json")
    if os.path.exists(report_path):
        with open(report_path) as fh:
            mode = json.load(fh)["config"].get("attack", {}).get("mode", "perturb")
        if mode != "perturb":
            raise CommandError("overlap analysis needs a perturbation-mode attack report")
    records = read_jsonl(os.path.join(args.out, f"{args.attack}.jsonl"))
    by_id = {c.id: c for c in ds.clouds}
    reports = []
    for rec in records:
        if rec["id"] not in by_id:
            raise CommandError(f"sample {rec['id']} not in dataset {args.data}")
        reports.append(overlap_from_selection(by_id[rec["id"]].points, rec["selected"], clf))
    summary = aggregate_overlap(reports)
    name = args.name or f"analyze_{args.attack}"
    write_json(os.path.join(args.out, f"{name}.json"), {
        "config": {"attack": args.attack, "model": args.model, "seed": args.seed, "near_k": 5},
        "summary": summary,
        "per_sample": [{"id": r["id"], **o.record()} for r, o in zip(records, reports)],
    })
    for key in ("per_cloud_identical", "per_cloud_near", "pooled_identical", "pooled_near"):
        print(f"{key}: {summary[key]:.4f}")
    return 0


def cmd_report(args):
    rows = []
    for fname in sorted(os.listdir(args.out)):
        if not fname.endswith(".csv") or fname == "summary.csv":
            continue
        with open(os.path.join(args.out, fname), newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_FIELDS:
                continue
            rows.extend(reader)
    if not rows:
        raise CommandError(f"no aggregate CSV files in {args.out}")
    write_csv(os.path.join(args.out, "summary.csv"), rows)
    print(_table(rows))
    print()
    print("full-scale reference rows (not reproduced here):")
    print(_table(list(REFERENCE_ROWS)))
    for key, value in REFERENCE_NOTES.items():
        print(f"  {key}: {value}")
    return 0


def _table(rows):
    lines = [" | ".join(CSV_FIELDS)]
    for row in rows:
        lines.append(" | ".join(_fmt(row[k]) for k in CSV_FIELDS))
    return "\n".join(lines)


# -- parser -------------------------------------------------------------------


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--config", default=None, help="JSON file with per-command config sections")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="samples evaluated concurrently")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _attack_flags(p):
    p.add_argument("--mode", choices=("perturb", "add"))
    p.add_argument("--metric", choices=("euclidean", "chamfer", "hausdorff"))
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("-K", type=int, dest="K")
    p.add_argument("--init", choices=("random", "critical", "all"))
    p.add_argument("--tau", type=float, help="binarization threshold")
    p.add_argument("--optimizer", choices=("adam", "gd", "sign"))
    p.add_argument("--no-keep-best", action="store_true", help="report the final iterate only")
    p.add_argument("--early-exit", action="store_true")


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="sparsepc", description="Sparse adversarial point cloud attacks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate the procedural shape corpus")
    p.add_argument("--classes", default=None, help="comma-separated subset of " + ",".join(CLASSES))
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--points", type=int)
    p.add_argument("--jitter", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--data", required=True, help="dataset manifest or its directory")
    p.add_argument("--arch", choices=("maxpool", "maxpool_half", "avgpool"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--name", default=None, help="checkpoint file name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common], help="attack the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=("sparse",) + STRATEGIES, default="sparse")
    p.add_argument("--limit", type=int, default=None, help="number of test samples")
    p.add_argument("--batch-size", type=int, dest="batch_size", help="removal batch size")
    p.add_argument("--budget", type=int, help="removal budget")
    p.add_argument("--name", default=None)
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", parents=[common], help="run a defense on stored adversarial clouds")
    p.add_argument("--attack", required=True, help="name of a prior attack run in --out")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None, help="also report defended accuracy on the clean originals")
    p.add_argument("--kind", choices=("outlier", "salient"))
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--remove-count", type=int, dest="remove_count")
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("transfer", parents=[common], help="cross-network transfer rates")
    p.add_argument("--attack", required=True, help="attack run made against --source")
    p.add_argument("--reverse-attack", default=None, help="attack run made against --target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", parents=[common], help="sparsity / perceptibility / metric ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--name", default=None)
    _attack_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", parents=[common], help="selected vs critical point overlap")
    p.add_argument("--attack", required=True, help="perturbation attack run in --out")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", parents=[common], help="merge aggregate CSVs and print reference rows")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        # one BLAS thread per worker keeps floating-point reductions identical for any --threads
        with threadpool_limits(limits=1):
            return args.func(args)
    except (CommandError, ContractViolation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
