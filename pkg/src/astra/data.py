"""Embedding/annotation I/O, synthetic long-tail dataset generation and clip sampling."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import (
    AUDIO,
    SOCCERNET_CLASSES,
    VISUAL,
    ClipSample,
    ContractError,
    EmbeddingStream,
    GroundTruthAction,
    MatchAnnotations,
    PipelineConfig,
    StreamSpec,
    build_targets,
)

# absolute action counts over the 500 annotated SoccerNet-v2 games
SOCCERNET_FREQUENCIES = (
    31810, 18918, 11674, 10521, 7896, 5820, 5256, 4836, 2839,
    2566, 2200, 2098, 2047, 1703, 173, 55, 46,
)
# rough share of non-visible annotations per class (kick-offs, clearances,
# indirect free-kicks and throw-ins are the most often off-screen)
SOCCERNET_NON_VISIBLE = (
    0.10, 0.20, 0.10, 0.30, 0.35, 0.05, 0.05, 0.10, 0.15,
    0.60, 0.10, 0.20, 0.10, 0.02, 0.02, 0.05, 0.05,
)


class CorruptManifestError(ValueError):
    pass


def _resample_profile(values: Sequence[float], n: int) -> list[float]:
    """Stretch a per-rank profile to ``n`` classes by linear interpolation on rank."""
    src = np.linspace(0.0, 1.0, len(values))
    dst = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    return [float(v) for v in np.interp(dst, src, np.asarray(values, dtype=float))]


@dataclass
class SyntheticSpec:
    num_timelines: int = 20
    duration_s: float = 300.0
    num_classes: int = 17
    class_weights: Optional[list[float]] = None
    non_visible_prob: Optional[list[float]] = None
    jitter_std: Optional[list[float]] = None
    visual_dims: tuple[int, ...] = (16, 16)
    audio_patch: tuple[int, int] = (8, 8)
    audio_seconds: float = 0.96
    noise_std: float = 0.5
    action_rate: float = 0.1
    min_gap_s: float = 4.0
    bump_width_s: float = 0.7
    bump_radius_s: float = 2.0
    valid_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        c = self.num_classes
        if self.class_weights is None:
            self.class_weights = (
                [float(v) for v in SOCCERNET_FREQUENCIES]
                if c == len(SOCCERNET_FREQUENCIES)
                else _resample_profile(SOCCERNET_FREQUENCIES, c)
            )
        if self.non_visible_prob is None:
            self.non_visible_prob = (
                list(SOCCERNET_NON_VISIBLE)
                if c == len(SOCCERNET_NON_VISIBLE)
                else _resample_profile(SOCCERNET_NON_VISIBLE, c)
            )
        if self.jitter_std is None:
            self.jitter_std = [0.0] * c
        self.class_weights = [float(v) for v in self.class_weights]
        self.non_visible_prob = [float(v) for v in self.non_visible_prob]
        self.jitter_std = [float(v) for v in self.jitter_std]
        self.visual_dims = tuple(int(v) for v in self.visual_dims)
        self.audio_patch = tuple(int(v) for v in self.audio_patch)
        self.validate()

    def validate(self) -> None:
        c = self.num_classes
        for name in ("class_weights", "non_visible_prob", "jitter_std"):
            if len(getattr(self, name)) != c:
                raise ContractError(f"{name} must have {c} entries")
        if any(w < 0 for w in self.class_weights) or not any(w > 0 for w in self.class_weights):
            raise ContractError("class weights must be >= 0 with at least one positive")
        if any(not 0 <= p <= 1 for p in self.non_visible_prob):
            raise ContractError("non-visible probabilities must lie in [0, 1]")
        if any(s < 0 for s in self.jitter_std):
            raise ContractError("jitter std must be >= 0")
        if self.noise_std < 0 or self.duration_s <= 0 or self.num_timelines < 1:
            raise ContractError("invalid noise, duration or timeline count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visual_dims"] = list(self.visual_dims)
        d["audio_patch"] = list(self.audio_patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# Embedding storage


@dataclass
class StreamEntry:
    stream_id: int
    kind: str
    feature_dim: int
    seconds_per_token: float
    payload_path: str
    row_count: int
    patch_shape: Optional[tuple[int, int]] = None


@dataclass
class EmbeddingManifest:
    timeline_id: str
    duration_s: float
    streams: list[StreamEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"timeline_id": self.timeline_id, "duration_s": self.duration_s, "streams": []}
        for s in self.streams:
            e = asdict(s)
            if s.patch_shape is None:
                del e["patch_shape"]
            else:
                e["patch_shape"] = list(s.patch_shape)
            d["streams"].append(e)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingManifest":
        streams = []
        for e in d["streams"]:
            e = dict(e)
            if e.get("patch_shape") is not None:
                e["patch_shape"] = tuple(e["patch_shape"])
            streams.append(StreamEntry(**e))
        return cls(d["timeline_id"], float(d["duration_s"]), streams)


class TimelineEmbeddings:
    """Random access to one timeline's streams by clip window."""

    def __init__(self, manifest: EmbeddingManifest, arrays: list[np.ndarray]):
        self.manifest = manifest
        self.arrays = arrays

    @property
    def timeline_id(self) -> str:
        return self.manifest.timeline_id

    @property
    def duration_s(self) -> float:
        return self.manifest.duration_s

    def window(self, start_s: float, config: PipelineConfig) -> list[EmbeddingStream]:
        if start_s < 0 or start_s > self.duration_s:
            raise IndexError(
                f"window start {start_s} outside [0, {self.duration_s}] for {self.timeline_id}"
            )
        out = []
        entries = self.manifest.streams
        for spec in config.stream_specs():
            candidates = [i for i, e in enumerate(entries) if e.kind == spec.kind]
            rank = spec.stream_id if spec.kind == VISUAL else 0
            if rank >= len(candidates):
                raise ContractError(f"timeline {self.timeline_id} lacks {spec.kind} stream {rank}")
            entry = entries[candidates[rank]]
            if entry.feature_dim != spec.feature_dim:
                raise ContractError(
                    f"stream {spec.stream_id} has dim {entry.feature_dim}, config expects "
                    f"{spec.feature_dim}"
                )
            arr = self.arrays[candidates[rank]]
            first = int(round(start_s / entry.seconds_per_token))
            rows = np.zeros((spec.tokens_per_clip, spec.feature_dim), dtype=np.float32)
            stop = min(first + spec.tokens_per_clip, arr.shape[0])
            if stop > first:
                rows[: stop - first] = arr[first:stop]
            out.append(EmbeddingStream(spec, rows))
        return out


def write_payload(path: Path, array: np.ndarray) -> None:
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_payload(path: Path, row_count: int, feature_dim: int) -> np.ndarray:
    expected = row_count * feature_dim * 4
    size = os.path.getsize(path)
    if size != expected:
        raise CorruptManifestError(f"{path}: {size} bytes, manifest declares {expected}")
    return np.fromfile(path, dtype="<f4").reshape(row_count, feature_dim).astype(np.float32)


def load_embeddings(manifest_path) -> dict[str, TimelineEmbeddings]:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        raw = json.load(f)
    entries = raw["timelines"] if "timelines" in raw else [raw]
    out = {}
    for entry in entries:
        m = EmbeddingManifest.from_dict(entry)
        arrays = []
        for s in m.streams:
            if abs(s.row_count * s.seconds_per_token - m.duration_s) > s.seconds_per_token + 1e-6:
                raise CorruptManifestError(
                    f"{m.timeline_id} stream {s.stream_id}: {s.row_count} rows do not cover "
                    f"{m.duration_s} s"
                )
            arrays.append(read_payload(manifest_path.parent / s.payload_path, s.row_count, s.feature_dim))
        out[m.timeline_id] = TimelineEmbeddings(m, arrays)
    return out


def load_annotations(path) -> MatchAnnotations:
    with open(path) as f:
        return MatchAnnotations.from_dict(json.load(f))


def save_annotations(annotations: MatchAnnotations, path) -> None:
    with open(path, "w") as f:
        json.dump(annotations.to_dict(), f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass
class SyntheticTimeline:
    annotations: MatchAnnotations
    true_times: list[float]
    streams: list[np.ndarray]


def _bump(delta: np.ndarray, width: float, radius: float) -> np.ndarray:
    out = np.exp(-0.5 * (delta / width) ** 2)
    out[np.abs(delta) > radius] = 0.0
    return out


def class_patterns(spec: SyntheticSpec) -> tuple[list[np.ndarray], np.ndarray]:
    """Deterministic per-class imprint patterns: one matrix per visual stream, one for audio."""
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    visual = [rng.standard_normal((spec.num_classes, dim)) for dim in spec.visual_dims]
    audio = rng.standard_normal((spec.num_classes, spec.audio_patch[0] * spec.audio_patch[1]))
    return visual, audio


def synthesize_timeline(spec: SyntheticSpec, index: int) -> SyntheticTimeline:
    rng = np.random.default_rng([spec.seed, index])
    visual_pat, audio_pat = class_patterns(spec)
    duration = spec.duration_s
    n = rng.poisson(spec.action_rate * duration)
    candidates = np.sort(rng.uniform(0.0, duration, size=n))
    kept: list[float] = []
    for t in candidates:
        if not kept or t - kept[-1] >= spec.min_gap_s:
            kept.append(float(t))
    true_times = np.array(kept)
    weights = np.asarray(spec.class_weights) / np.sum(spec.class_weights)
    classes = rng.choice(spec.num_classes, size=len(kept), p=weights)
    visible = rng.random(len(kept)) >= np.asarray(spec.non_visible_prob)[classes]
    jitter = rng.standard_normal(len(kept)) * np.asarray(spec.jitter_std)[classes]
    annotated = np.clip(true_times + jitter, 0.0, duration)

    streams = []
    n_rows = int(math.floor(duration + 1e-9))
    centers = np.arange(n_rows) + 0.5
    for j, dim in enumerate(spec.visual_dims):
        x = spec.noise_std * rng.standard_normal((n_rows, dim))
        for t, c, vis in zip(true_times, classes, visible):
            if vis:
                x += _bump(centers - t, spec.bump_width_s, spec.bump_radius_s)[:, None] * visual_pat[j][c]
        streams.append(x.astype(np.float32))
    n_audio = int(math.floor(duration / spec.audio_seconds + 1e-9))
    a_centers = (np.arange(n_audio) + 0.5) * spec.audio_seconds
    x = spec.noise_std * rng.standard_normal((n_audio, audio_pat.shape[1]))
    for t, c, vis in zip(true_times, classes, visible):
        if not vis:
            x += _bump(a_centers - t, spec.bump_width_s, spec.bump_radius_s)[:, None] * audio_pat[c]
    streams.append(x.astype(np.float32))

    order = np.argsort(annotated, kind="stable")
    actions = tuple(
        GroundTruthAction(int(classes[i]), float(annotated[i]), bool(visible[i])) for i in order
    )
    tid = f"synth_{index:04d}"
    return SyntheticTimeline(
        MatchAnnotations(tid, float(duration), actions),
        [float(true_times[i]) for i in order],
        streams,
    )


def _split_ids(ids: list[str], spec: SyntheticSpec) -> dict[str, list[str]]:
    n = len(ids)
    n_test = int(round(n * spec.test_fraction))
    n_valid = int(round(n * spec.valid_fraction))
    n_train = max(n - n_test - n_valid, 1)
    return {
        "train": ids[:n_train],
        "valid": ids[n_train:n_train + n_valid],
        "test": ids[n_train + n_valid:],
    }


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a complete synthetic dataset (annotations, payloads, manifest, jitter sidecar)."""
    out = Path(out_dir)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    (out / "embeddings").mkdir(exist_ok=True)
    manifest_entries = []
    jitter: dict[str, list[dict]] = {}
    ids = []
    for i in range(spec.num_timelines):
        tl = synthesize_timeline(spec, i)
        tid = tl.annotations.timeline_id
        ids.append(tid)
        save_annotations(tl.annotations, out / "annotations" / f"{tid}.json")
        jitter[tid] = [
            {"action_index": k, "true_time_s": tt, "annotated_time_s": a.time_s}
            for k, (tt, a) in enumerate(zip(tl.true_times, tl.annotations.actions))
        ]
        m = EmbeddingManifest(tid, tl.annotations.duration_s)
        for sid, arr in enumerate(tl.streams):
            is_audio = sid == len(tl.streams) - 1
            rel = f"embeddings/{tid}_s{sid}.f32"
            write_payload(out / rel, arr)
            m.streams.append(
                StreamEntry(
                    stream_id=sid,
                    kind=AUDIO if is_audio else VISUAL,
                    feature_dim=arr.shape[1],
                    seconds_per_token=spec.audio_seconds if is_audio else 1.0,
                    payload_path=rel,
                    row_count=arr.shape[0],
                    patch_shape=spec.audio_patch if is_audio else None,
                )
            )
        manifest_entries.append(m.to_dict())

    def dump(name, obj):
        with open(out / name, "w") as f:
            json.dump(obj, f, indent=1, sort_keys=True)

    dump("manifest.json", {"timelines": manifest_entries})
    dump("jitter.json", jitter)
    dump("splits.json", _split_ids(ids, spec))
    dump("synthetic_spec.json", spec.to_dict())
    names = (
        SOCCERNET_CLASSES
        if spec.num_classes == len(SOCCERNET_CLASSES)
        else [f"class_{c}" for c in range(spec.num_classes)]
    )
    dump("classes.json", {str(i): n for i, n in enumerate(names)})
    return out


# ---------------------------------------------------------------------------
# Dataset and clip sampling


class Dataset:
    """A dataset directory: manifest.json, annotations/, splits.json and optional jitter.json."""

    def __init__(self, root):
        self.root = Path(root)
        self.embeddings = load_embeddings(self.root / "manifest.json")
        self.annotations: dict[str, MatchAnnotations] = {}
        ann_dir = self.root / "annotations"
        for tid in self.embeddings:
            path = ann_dir / f"{tid}.json"
            if path.exists():
                self.annotations[tid] = load_annotations(path)
        splits_path = self.root / "splits.json"
        if splits_path.exists():
            with open(splits_path) as f:
                self.splits = json.load(f)
        else:
            self.splits = {"train": sorted(self.embeddings), "valid": [], "test": []}
        jitter_path = self.root / "jitter.json"
        self.jitter = json.load(open(jitter_path)) if jitter_path.exists() else None

    def timelines(self, split: Optional[str] = None) -> list[str]:
        if split is None or split == "all":
            return sorted(self.embeddings)
        return list(self.splits[split])

    def stream_layout(self) -> tuple[tuple[int, ...], Optional[tuple[int, int]]]:
        """Visual feature dims and audio patch shape of the first timeline."""
        first = next(iter(self.embeddings.values())).manifest
        visual = tuple(s.feature_dim for s in first.streams if s.kind == VISUAL)
        audio = [s.patch_shape for s in first.streams if s.kind == AUDIO]
        return visual, (tuple(audio[0]) if audio else None)

    def configure(self, config: PipelineConfig) -> PipelineConfig:
        """Adopt the dataset's stream dimensions."""
        visual, audio = self.stream_layout()
        changes = {"visual_dims": visual}
        if audio is not None:
            changes["audio_patch"] = audio
        elif config.use_audio:
            changes["use_audio"] = False
        return config.replace(**changes)

    def clip(self, timeline_id: str, start_s: float, config: PipelineConfig, with_targets=True) -> ClipSample:
        streams = self.embeddings[timeline_id].window(start_s, config)
        targets = None
        if with_targets and timeline_id in self.annotations:
            targets = build_targets(self.annotations[timeline_id], start_s, config)
        return ClipSample(timeline_id, float(start_s), streams, targets)


def eval_window_starts(duration_s: float, config: PipelineConfig) -> list[float]:
    T, stride = config.clip_seconds, config.eval_stride
    if duration_s <= T:
        return [0.0]
    n = int(math.ceil((duration_s - T) / stride - 1e-9)) + 1
    return [k * stride for k in range(n)]


def train_clip_starts(
    dataset: Dataset,
    timeline_ids: Sequence[str],
    config: PipelineConfig,
    rng: np.random.Generator,
    num_clips: Optional[int] = None,
) -> list[tuple[str, float]]:
    durations = np.array([dataset.embeddings[t].duration_s for t in timeline_ids])
    if num_clips is None:
        num_clips = config.clips_per_epoch or int(math.ceil(2 * durations.sum() / config.clip_seconds))
    probs = durations / durations.sum()
    picks = rng.choice(len(timeline_ids), size=num_clips, p=probs)
    out = []
    for i in picks:
        hi = max(int(math.floor(durations[i] - config.clip_seconds)), 0)
        out.append((timeline_ids[i], float(rng.integers(0, hi + 1))))
    return out


def clip_iterator(
    dataset: Dataset,
    mode: str,
    config: PipelineConfig,
    timeline_ids: Optional[Sequence[str]] = None,
    seed: int = 0,
    num_clips: Optional[int] = None,
    worker: int = 0,
    num_workers: int = 1,
) -> Iterator[ClipSample]:
    """Yield clips: random starts with targets (train) or stride-T/2 windows (eval).

    Workers receive disjoint slices of the same deterministic schedule.
    """
    ids = list(timeline_ids) if timeline_ids is not None else dataset.timelines("train" if mode == "train" else "all")
    if mode == "train":
        rng = np.random.default_rng(seed)
        schedule = train_clip_starts(dataset, ids, config, rng, num_clips)
        for k, (tid, start) in enumerate(schedule):
            if k % num_workers == worker:
                yield dataset.clip(tid, start, config)
    elif mode == "eval":
        k = 0
        for tid in ids:
            for start in eval_window_starts(dataset.embeddings[tid].duration_s, config):
                if k % num_workers == worker:
                    yield dataset.clip(tid, start, config)
                k += 1
    else:
        raise ContractError(f"unknown mode {mode!r}")
