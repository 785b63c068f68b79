"""Average precision, mAP over tolerances and tight/loose Average-mAP."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Detection, MatchAnnotations

TIGHT = (1.0, 2.0, 3.0, 4.0, 5.0)
LOOSE = tuple(float(d) for d in range(5, 65, 5))
SUBSETS = ("all", "visible", "non_visible")


def tolerances(metric: str) -> tuple[float, ...]:
    try:
        return {"tight": TIGHT, "loose": LOOSE}[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None


def match_detections(
    det_times: Sequence[float],
    det_conf: Sequence[float],
    gt_times: Sequence[float],
    delta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One-to-one matching in decreasing confidence order.

    Each detection takes the nearest free ground truth within ``delta`` (ties go to the
    earlier one). When none is free it may still become a TP by moving an earlier
    detection to another ground truth in its own range, so every confidence prefix is a
    maximum matching. Returns per-detection TP flags and the matched ground-truth index
    (-1 when unmatched), both in input order.
    """
    det_times = np.asarray(det_times, dtype=float)
    det_conf = np.asarray(det_conf, dtype=float)
    gt = np.asarray(gt_times, dtype=float)
    gt_order = np.argsort(gt, kind="stable")
    gt_sorted = gt[gt_order]
    n = len(det_times)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(gt) == 0:
        return np.zeros(n, dtype=bool), matched
    # candidate range is padded; the tolerance test itself is on the exact distance
    pad = 1e-9 * max(1.0, delta)
    lo = np.searchsorted(gt_sorted, det_times - delta - pad, side="left")
    hi = np.searchsorted(gt_sorted, det_times + delta + pad, side="right")
    cand: dict[int, list[int]] = {}
    owner = np.full(len(gt), -1, dtype=np.int64)  # sorted gt index -> detection

    def augment(i, seen):
        for k in cand[i]:
            if k in seen:
                continue
            seen.add(k)
            if owner[k] < 0 or augment(owner[k], seen):
                owner[k] = i
                return True
        return False

    for i in np.argsort(-det_conf, kind="stable"):
        idx = np.arange(lo[i], hi[i])
        dist = np.abs(gt_sorted[idx] - det_times[i])
        keep = dist <= delta
        cand[i] = idx[keep][np.argsort(dist[keep], kind="stable")].tolist()
        free = [k for k in cand[i] if owner[k] < 0]
        if free:
            owner[free[0]] = i
        elif cand[i]:
            augment(i, set())
    for k in np.flatnonzero(owner >= 0):
        matched[owner[k]] = gt_order[k]
    return matched >= 0, matched


def average_precision(tp: Sequence[bool], confidences: Sequence[float], num_gt: int) -> Optional[float]:
    """AP as the sum over confidence thresholds of recall decrements times precision.

    Thresholds are the distinct confidence values. The precision at a threshold is the
    best precision reached at that recall or higher (the precision envelope), so AP is the
    area under the envelope of the precision-recall curve. Returns None when ``num_gt`` is 0.
    """
    if num_gt == 0:
        return None
    tp = np.asarray(tp, dtype=bool)
    conf = np.asarray(confidences, dtype=float)
    if conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    conf_sorted = conf[order]
    cum_tp = np.cumsum(tp[order])
    # last index of each run of equal confidence = cut point of that threshold
    ends = np.flatnonzero(np.r_[conf_sorted[1:] != conf_sorted[:-1], True])
    # ends run from strictest to most permissive threshold; reverse to s = 0 (permissive) .. S-1
    tps = cum_tp[ends][::-1].astype(float)
    counts = (ends + 1)[::-1].astype(float)
    recalls = np.r_[tps / num_gt, 0.0]
    # recall is non-increasing in s, so "recall at least as high" means s' <= s
    precisions = np.maximum.accumulate(tps / counts)
    return math.fsum((recalls[:-1] - recalls[1:]) * precisions)


def _class_labels(
    detections: Mapping[str, Sequence[Detection]],
    annotations: Mapping[str, MatchAnnotations],
    class_id: int,
    delta: float,
    subset: str,
) -> tuple[np.ndarray, np.ndarray, int]:
    labels, confs, num_gt = [], [], 0
    for tid, ann in annotations.items():
        gts = [a for a in ann.actions if a.class_id == class_id]
        keep = np.array([_in_subset(a.visible, subset) for a in gts], dtype=bool)
        num_gt += int(keep.sum())
        dets = [d for d in detections.get(tid, ()) if d.class_id == class_id]
        if not dets:
            continue
        times = [d.time_s for d in dets]
        conf = np.array([d.confidence for d in dets])
        tp, matched = match_detections(times, conf, [a.time_s for a in gts], delta)
        # detections matched to ground truth outside the subset are ignored
        counted = ~tp | keep[np.maximum(matched, 0)] if len(gts) else np.ones(len(dets), bool)
        labels.append(tp[counted])
        confs.append(conf[counted])
    if not labels:
        return np.zeros(0, bool), np.zeros(0), num_gt
    return np.concatenate(labels), np.concatenate(confs), num_gt


def _in_subset(visible: bool, subset: str) -> bool:
    if subset == "all":
        return True
    if subset == "visible":
        return visible
    if subset == "non_visible":
        return not visible
    raise ValueError(f"unknown subset {subset!r}")


@dataclass
class EvalSlice:
    """AP table for one tolerance set and one visibility subset."""

    tolerances: tuple[float, ...]
    subset: str
    ap: np.ndarray  # (classes, tolerances); NaN where the class has no ground truth
    num_gt: np.ndarray

    @property
    def map_per_delta(self) -> np.ndarray:
        valid = self.num_gt > 0
        if not valid.any():
            return np.full(len(self.tolerances), np.nan)
        return self.ap[valid].mean(axis=0)

    @property
    def average_map(self) -> float:
        return float(np.mean(self.map_per_delta))

    @property
    def per_class_average_ap(self) -> np.ndarray:
        return self.ap.mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "tolerances": list(self.tolerances),
            "subset": self.subset,
            "ap": [[None if np.isnan(v) else float(v) for v in row] for row in self.ap],
            "num_gt": [int(n) for n in self.num_gt],
            "map_per_delta": [None if np.isnan(v) else float(v) for v in self.map_per_delta],
            "average_map": None if np.isnan(self.average_map) else self.average_map,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSlice":
        ap = np.array([[np.nan if v is None else v for v in row] for row in d["ap"]], dtype=float)
        return cls(tuple(d["tolerances"]), d["subset"], ap.reshape(len(d["num_gt"]), -1), np.array(d["num_gt"]))


def average_map(
    detections: Mapping[str, Sequence[Detection]],
    annotations: Mapping[str, MatchAnnotations],
    num_classes: int,
    tolerance_set: Sequence[float] = TIGHT,
    subset: str = "all",
) -> EvalSlice:
    if not tolerance_set:
        raise ValueError("tolerance set must not be empty")
    ap = np.full((num_classes, len(tolerance_set)), np.nan)
    num_gt = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        for k, delta in enumerate(tolerance_set):
            labels, conf, n = _class_labels(detections, annotations, c, delta, subset)
            num_gt[c] = n
            value = average_precision(labels, conf, n)
            if value is not None:
                ap[c, k] = value
    return EvalSlice(tuple(float(t) for t in tolerance_set), subset, ap, num_gt)


@dataclass
class EvalReport:
    num_classes: int
    slices: dict[str, EvalSlice] = field(default_factory=dict)  # key "<metric>/<subset>"

    def slice(self, metric: str = "tight", subset: str = "all") -> EvalSlice:
        return self.slices[f"{metric}/{subset}"]

    @property
    def tight(self) -> float:
        return self.slice("tight").average_map

    @property
    def loose(self) -> float:
        return self.slice("loose").average_map

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "slices": {k: s.to_dict() for k, s in self.slices.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["num_classes"], {k: EvalSlice.from_dict(v) for k, v in d["slices"].items()})

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def evaluate(
    detections: Mapping[str, Sequence[Detection]],
    annotations: Mapping[str, MatchAnnotations],
    num_classes: int,
    metrics: Sequence[str] = ("tight", "loose"),
    subsets: Sequence[str] = SUBSETS,
) -> EvalReport:
    report = EvalReport(num_classes)
    for metric in metrics:
        for subset in subsets:
            report.slices[f"{metric}/{subset}"] = average_map(
                detections, annotations, num_classes, tolerances(metric), subset
            )
    return report


def per_class_average_ap(report: EvalReport, metric: str = "tight") -> list[dict]:
    """One row per class: Average-AP over tolerances for each visibility subset ("n/a" if no GT)."""
    rows = []
    for c in range(report.num_classes):
        row: dict = {"class": c}
        for subset in SUBSETS:
            key = f"{metric}/{subset}"
            if key not in report.slices:
                continue
            sl = report.slices[key]
            row[f"average_ap_{subset}"] = (
                float(sl.per_class_average_ap[c]) if sl.num_gt[c] > 0 else "n/a"
            )
        rows.append(row)
    return rows


def write_per_class_csv(report: EvalReport, path, metric: str = "tight") -> None:
    rows = per_class_average_ap(report, metric)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
