"""Diagnostics: per-class variance profiles, ablation deltas and uncertainty/label-noise correlation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import spearmanr

from .core import ContractError
from .data import Dataset
from .evaluation import EvalReport
from .inference import predict_windows
from .model import Astra

NA = "n/a"


def variance_profile(
    model: Astra,
    dataset: Dataset,
    threshold: float = 0.5,
    timeline_ids: Optional[Sequence[str]] = None,
) -> list[Union[float, str]]:
    """Mean predicted variance (seconds^2) per class over eval anchors scoring above ``threshold``.

    Classes without a qualifying anchor report "n/a".
    """
    C = model.config.num_classes
    ids = list(timeline_ids) if timeline_ids is not None else dataset.timelines("test")
    total = np.zeros(C)
    count = np.zeros(C, dtype=np.int64)
    for tid in ids:
        for _, grid in predict_windows(dataset.embeddings[tid], model):
            hit = grid.scores[:, :C] > threshold
            total += np.where(hit, grid.variances[:, :C], 0.0).sum(axis=0)
            count += hit.sum(axis=0)
    return [float(total[c] / count[c]) if count[c] else NA for c in range(C)]


@dataclass
class AblationDelta:
    metric: str
    subset: str
    per_class: list[Union[float, str]]  # b - a, "n/a" where either side lacks ground truth
    overall: float

    def rows(self) -> list[dict]:
        out = [{"class": c, "delta": d} for c, d in enumerate(self.per_class)]
        out.append({"class": "overall", "delta": self.overall})
        return out


def ablation_delta(
    report_a: EvalReport, report_b: EvalReport, metric: str = "tight", subset: str = "all"
) -> AblationDelta:
    """Per-class Average-AP of ``b`` minus ``a``, plus the Average-mAP difference."""
    key = f"{metric}/{subset}"
    if key not in report_a.slices or key not in report_b.slices:
        raise ContractError(f"both reports need the {key} slice")
    a, b = report_a.slices[key], report_b.slices[key]
    if report_a.num_classes != report_b.num_classes or a.tolerances != b.tolerances:
        raise ContractError("reports differ in class set or tolerance grid")
    pa, pb = a.per_class_average_ap, b.per_class_average_ap
    per_class = [
        NA if (a.num_gt[c] == 0 or b.num_gt[c] == 0) else float(pb[c] - pa[c])
        for c in range(report_a.num_classes)
    ]
    return AblationDelta(metric, subset, per_class, float(b.average_map - a.average_map))


def write_delta_csv(deltas: Sequence[AblationDelta], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "subset", "class", "delta"])
        for d in deltas:
            for row in d.rows():
                w.writerow([d.metric, d.subset, row["class"], row["delta"]])


def class_jitter_std(dataset: Dataset) -> list[float]:
    """Injected per-class label jitter std of a synthetic dataset.

    Taken from the generator spec when present, otherwise estimated from the
    true/annotated time pairs in the jitter sidecar.
    """
    spec_path = Path(dataset.root) / "synthetic_spec.json"
    if spec_path.exists():
        with open(spec_path) as f:
            return [float(v) for v in json.load(f)["jitter_std"]]
    if dataset.jitter is None:
        raise ContractError("dataset has no jitter sidecar")
    diffs: dict[int, list[float]] = {}
    for tid, rows in dataset.jitter.items():
        actions = dataset.annotations[tid].actions
        for r in rows:
            a = actions[r["action_index"]]
            diffs.setdefault(a.class_id, []).append(r["annotated_time_s"] - r["true_time_s"])
    C = max(diffs) + 1 if diffs else 0
    return [float(np.sqrt(np.mean(np.square(diffs[c])))) if c in diffs else 0.0 for c in range(C)]


@dataclass
class CorrelationResult:
    status: str  # "ok", "insufficient" or "degenerate"
    rho: float
    n_classes: int

    def to_dict(self) -> dict:
        return {"status": self.status, "rho": self.rho, "n_classes": self.n_classes}


def uncertainty_noise_correlation(
    profile: Sequence[Union[float, str]], jitter_std: Sequence[float]
) -> CorrelationResult:
    """Spearman rank correlation between per-class mean variance and injected jitter std."""
    pairs = [
        (float(v), float(j))
        for v, j in zip(profile, jitter_std)
        if not isinstance(v, str) and math.isfinite(float(v))
    ]
    if len(pairs) < 3:
        return CorrelationResult("insufficient", float("nan"), len(pairs))
    v, j = np.array(pairs).T
    if np.ptp(j) == 0 or np.ptp(v) == 0:
        return CorrelationResult("degenerate", 0.0, len(pairs))
    return CorrelationResult("ok", float(spearmanr(v, j).statistic), len(pairs))
