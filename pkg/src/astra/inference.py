"""Sliding-window prediction, displacement refinement and per-class 1-D Soft-NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .core import ClipSample, ContractError, Detection, PipelineConfig, PredictionGrid, anchor_times
from .data import Dataset, TimelineEmbeddings, eval_window_starts
from .model import Astra, predict_clips


@dataclass(frozen=True)
class RawSpot:
    class_id: int
    anchor_s: float
    time_s: float
    confidence: float


def ensemble_average(grids: Sequence[PredictionGrid]) -> PredictionGrid:
    """Element-wise mean of scores, means and variances of aligned grids."""
    if not grids:
        raise ContractError("need at least one grid")
    shape = grids[0].scores.shape
    if any(g.scores.shape != shape for g in grids):
        raise ContractError("ensemble members disagree on grid shape")
    if len(grids) == 1:
        return grids[0]
    return PredictionGrid(
        np.mean([g.scores for g in grids], axis=0),
        np.mean([g.means for g in grids], axis=0),
        np.mean([g.variances for g in grids], axis=0),
    )


def predict_windows(
    timeline: TimelineEmbeddings, models: Union[Astra, Sequence[Astra]], batch_size: int = 16
) -> list[tuple[float, PredictionGrid]]:
    """Eval-mode grids for every stride-T/2 window; several models are averaged per window."""
    models = [models] if isinstance(models, Astra) else list(models)
    base = models[0].config
    for m in models[1:]:
        if (m.config.clip_seconds, m.config.output_length, m.config.num_classes) != (
            base.clip_seconds, base.output_length, base.num_classes
        ):
            raise ContractError("ensemble members must share T, L_out and C")
    starts = eval_window_starts(timeline.duration_s, base)
    per_model = []
    for m in models:
        clips = [ClipSample(timeline.timeline_id, s, timeline.window(s, m.config)) for s in starts]
        per_model.append(predict_clips(m, clips, batch_size))
    return [(s, ensemble_average([g[i] for g in per_model])) for i, s in enumerate(starts)]


def grids_to_spots(
    windows: Sequence[tuple[float, PredictionGrid]],
    config: PipelineConfig,
    duration_s: float,
    refine: bool = True,
) -> list[RawSpot]:
    anchors = anchor_times(config)
    C = config.num_classes
    spots = []
    for start, grid in windows:
        scores = grid.scores[:, :C]
        t_idx, c_idx = np.nonzero(scores >= config.score_floor)
        abs_anchor = start + anchors[t_idx]
        if refine:
            shift = np.clip(grid.means[t_idx, c_idx], -config.r_d, config.r_d)
        else:
            shift = np.zeros(len(t_idx))
        times = np.clip(abs_anchor + shift, 0.0, duration_s)
        conf = scores[t_idx, c_idx]
        spots.extend(
            RawSpot(int(c), float(a), float(t), float(p))
            for c, a, t, p in zip(c_idx, abs_anchor, times, conf)
        )
    return spots


def predict_timeline(
    timeline: TimelineEmbeddings,
    models: Union[Astra, Sequence[Astra]],
    refine: bool = True,
) -> list[RawSpot]:
    config = models.config if isinstance(models, Astra) else models[0].config
    return grids_to_spots(predict_windows(timeline, models), config, timeline.duration_s, refine)


def soft_nms_1d(times, confidences, window: float, sigma: float = 0.5) -> np.ndarray:
    """Rescore spots of one class; returns new confidences in input order.

    Repeatedly selects the highest-scoring unselected spot and multiplies every
    unselected spot closer than ``window`` by exp(-(1 - dt/window)**2 / sigma).
    """
    times = np.asarray(times, dtype=float)
    conf = np.asarray(confidences, dtype=float).copy()
    n = len(times)
    if n <= 1:
        return conf
    # process in time order so ties on confidence break toward the earlier spot
    order = np.lexsort((-conf, times))
    t, s = times[order], conf[order]
    active = np.ones(n, dtype=bool)
    for _ in range(n):
        cand = np.where(active, s, -np.inf)
        i = int(np.argmax(cand))
        active[i] = False
        dt = np.abs(t - t[i])
        near = active & (dt < window)
        if near.any():
            s[near] *= np.exp(-((1.0 - dt[near] / window) ** 2) / sigma)
    out = np.empty(n)
    out[order] = s
    return out


def apply_soft_nms(spots: Sequence[RawSpot], config: PipelineConfig) -> list[Detection]:
    by_class: dict[int, list[RawSpot]] = {}
    for sp in spots:
        by_class.setdefault(sp.class_id, []).append(sp)
    out = []
    for c, group in sorted(by_class.items()):
        times = [g.time_s for g in group]
        new_conf = soft_nms_1d(times, [g.confidence for g in group], config.nms_window_for(c), config.nms_sigma)
        out.extend(Detection(c, t, float(p)) for t, p in zip(times, new_conf))
    return sort_detections(out)


def sort_detections(detections: Sequence[Detection]) -> list[Detection]:
    return sorted(detections, key=lambda d: (d.time_s, d.class_id, d.confidence))


def detect_timeline(
    timeline: TimelineEmbeddings, models: Union[Astra, Sequence[Astra]], refine: bool = True
) -> list[Detection]:
    config = models.config if isinstance(models, Astra) else models[0].config
    return apply_soft_nms(predict_timeline(timeline, models, refine), config)


def detect_dataset(
    dataset: Dataset,
    models: Union[Astra, Sequence[Astra]],
    timeline_ids: Sequence[str],
    refine: bool = True,
    num_workers: int = 1,
) -> dict[str, list[Detection]]:
    def run(tid):
        return tid, detect_timeline(dataset.embeddings[tid], models, refine)

    if num_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(num_workers) as pool:
            return dict(pool.map(run, timeline_ids))
    return dict(run(t) for t in timeline_ids)


# ---------------------------------------------------------------------------
# detections files


def export_detections(detections: Sequence[Detection], path) -> None:
    rows = [
        {"class_id": d.class_id, "time_s": d.time_s, "confidence": d.confidence}
        for d in sort_detections(detections)
    ]
    try:
        with open(path, "w") as f:
            json.dump(rows, f)
    except OSError as e:
        raise OSError(f"cannot write detections to {path}: {e}") from e


def load_detections(path) -> list[Detection]:
    try:
        with open(path) as f:
            rows = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read detections from {path}: {e}") from e
    return [Detection(int(r["class_id"]), float(r["time_s"]), float(r["confidence"])) for r in rows]


def export_detections_dir(detections: Mapping[str, Sequence[Detection]], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tid, dets in detections.items():
        export_detections(dets, out / f"{tid}.json")
    return out


def load_detections_dir(path) -> dict[str, list[Detection]]:
    return {p.stem: load_detections(p) for p in sorted(Path(path).glob("*.json"))}
