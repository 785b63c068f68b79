"""Command-line entry point: data generation, training, inference, evaluation and ablations."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import AblationFlags, ContractError, PipelineConfig

log = logging.getLogger("astra")


def num_workers(requested: Optional[int] = None) -> int:
    """Worker count, capped by the ASTRA_NUM_WORKERS environment variable."""
    cap = int(os.environ.get("ASTRA_NUM_WORKERS") or 0)
    n = requested or cap or 1
    if cap:
        n = min(n, cap)
    return max(n, 1)


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def load_run_config(path) -> tuple[PipelineConfig, Optional[AblationFlags]]:
    """A config file is either a flat PipelineConfig dict or {"pipeline": {...}, "flags": {...}}."""
    d = _read_json(path)
    if "pipeline" in d:
        flags = d.get("flags")
        return PipelineConfig.from_dict(d["pipeline"]), AblationFlags.from_dict(flags) if flags else None
    return PipelineConfig.from_dict(d), None


def load_flag_sets(path) -> dict[str, AblationFlags]:
    """Flag sets: a list of preset names, a list of flag dicts, or a name -> (preset | dict) mapping."""
    d = _read_json(path)
    if isinstance(d, list):
        items = [(x, x) if isinstance(x, str) else (f"row{i}", x) for i, x in enumerate(d)]
    else:
        items = list(d.items())
    return {
        name: AblationFlags.preset(v) if isinstance(v, str) else AblationFlags.from_dict(v)
        for name, v in items
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    from .data import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec.from_dict(_read_json(args.spec)) if args.spec else SyntheticSpec()
    out = generate_synthetic(spec, args.out)
    print(f"wrote {spec.num_timelines} timelines to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import Dataset
    from .trainer import train_run

    config, flags = load_run_config(args.config)
    state = train_run(Dataset(args.data), config, flags, seed=args.seed, out_dir=args.out)
    print(json.dumps({"best_epoch": state.best_epoch, "best_tight": state.best_metric}))
    return 0


def _load_models(spec: str):
    from .checkpoint import load_checkpoint

    return [load_checkpoint(p)[0] for p in spec.split(",") if p]


def cmd_infer(args) -> int:
    from .data import Dataset
    from .inference import detect_dataset, export_detections_dir

    models = _load_models(args.checkpoint)
    dataset = Dataset(args.data)
    ids = dataset.timelines(args.split)
    dets = detect_dataset(
        dataset, models if len(models) > 1 else models[0], ids, refine=not args.no_refine,
        num_workers=num_workers(args.workers),
    )
    export_detections_dir(dets, args.out)
    print(f"wrote detections for {len(dets)} timelines to {args.out}")
    return 0


def _num_classes(annotations_dir: Path, annotations, given: Optional[int]) -> int:
    if given is not None:
        return given
    classes = annotations_dir.parent / "classes.json"
    if classes.exists():
        return len(_read_json(classes))
    return 1 + max((a.class_id for m in annotations.values() for a in m.actions), default=0)


def cmd_eval(args) -> int:
    from .data import load_annotations
    from .evaluation import evaluate
    from .inference import load_detections_dir

    ann_dir = Path(args.annotations)
    annotations = {p.stem: load_annotations(p) for p in sorted(ann_dir.glob("*.json"))}
    detections = load_detections_dir(args.detections)
    missing = sorted(set(detections) - set(annotations))
    if missing:
        raise ContractError(f"detections for unknown timelines: {missing[:5]}")
    # score only the timelines that have detection files
    annotations = {t: annotations[t] for t in detections}
    n_cls = _num_classes(ann_dir, annotations, args.num_classes)
    report = evaluate(detections, annotations, n_cls, metrics=(args.metric,), subsets=(args.subset,))
    value = report.slice(args.metric, args.subset).average_map
    if args.out:
        report.save(args.out)
    print(json.dumps({"metric": args.metric, "subset": args.subset, "average_map": value}))
    if args.assert_min is not None and not (value >= args.assert_min):
        print(f"assertion failed: {value} < {args.assert_min}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    from .data import Dataset
    from .evaluation import evaluate
    from .inference import detect_dataset
    from .trainer import train_run

    config, _ = load_run_config(args.config)
    flag_sets = load_flag_sets(args.flags)
    dataset = Dataset(args.data)
    test_ids = dataset.timelines(args.split)
    ann = {t: dataset.annotations[t] for t in test_ids}
    seeds = list(range(args.seeds))
    rows = []
    for name, flags in flag_sets.items():
        scores = {"tight": [], "loose": []}
        for seed in seeds:
            run_dir = Path(args.runs_dir) / name / f"seed{seed}" if args.runs_dir else None
            state = train_run(dataset, config, flags, seed=seed, out_dir=run_dir)
            dets = detect_dataset(dataset, state.model, test_ids, num_workers=num_workers(args.workers))
            report = evaluate(dets, ann, state.model.config.num_classes, subsets=("all",))
            if run_dir is not None:
                report.save(run_dir / "report.json")
            scores["tight"].append(report.tight)
            scores["loose"].append(report.loose)
        row = {"name": name, **flags.to_dict(), "seeds": len(seeds)}
        for k, v in scores.items():
            row[f"{k}_mean"] = float(np.mean(v))
            row[f"{k}_std"] = float(np.std(v))
        rows.append(row)
        log.info("%s: tight %.4f loose %.4f", name, row["tight_mean"], row["loose_mean"])
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _load_report(path):
    from .evaluation import EvalReport

    p = Path(path)
    return EvalReport.load(p / "report.json" if p.is_dir() else p)


def cmd_report(args) -> int:
    from .analysis import ablation_delta, write_delta_csv

    runs = [r for r in args.runs.split(",") if r]
    if len(runs) != 2:
        raise ContractError("--runs takes exactly two comma-separated reports")
    a, b = (_load_report(r) for r in runs)
    keys = [k for k in a.slices if k in b.slices]
    if not keys:
        raise ContractError("reports share no metric/subset slice")
    deltas = [ablation_delta(a, b, *k.split("/")) for k in keys]
    write_delta_csv(deltas, args.out)
    for d in deltas:
        print(f"{d.metric}/{d.subset}: {d.overall:+.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="astra", description="Action spotting pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset")
    g.add_argument("--spec", help="SyntheticSpec JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write detections for a split")
    i.add_argument("--checkpoint", required=True, help="checkpoint path, or comma-separated list to ensemble")
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="test")
    i.add_argument("--no-refine", action="store_true")
    i.add_argument("--workers", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score detections")
    e.add_argument("--detections", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--metric", choices=("tight", "loose"), default="tight")
    e.add_argument("--subset", choices=("all", "visible", "non_visible"), default="all",
                   type=lambda s: s.replace("-", "_"))
    e.add_argument("--num-classes", type=int)
    e.add_argument("--assert-min", type=float)
    e.add_argument("--out", help="write the full report JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate flag sets over several seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--flags", required=True)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--runs-dir", help="keep per-run artifacts here")
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="per-class deltas between two eval reports")
    r.add_argument("--runs", required=True, help="a,b: report files or run directories")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ContractError, FileNotFoundError, KeyError) as e:
        print(f"astra {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
