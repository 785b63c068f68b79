"""Shared data model and anchor/target encoding."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

import numpy as np

VISUAL = "visual"
AUDIO = "audio"

SOCCERNET_CLASSES = (
    "Ball out of play",
    "Throw-in",
    "Foul",
    "Indirect free-kick",
    "Clearance",
    "Shots on target",
    "Shots off target",
    "Corner",
    "Substitution",
    "Kick-off",
    "Direct free-kick",
    "Offside",
    "Yellow card",
    "Goal",
    "Penalty",
    "Red card",
    "Yellow->red card",
)


class ContractError(ValueError):
    """Raised when an operation is called outside its precondition."""


@dataclass(frozen=True)
class GroundTruthAction:
    class_id: int
    time_s: float
    visible: bool = True


@dataclass(frozen=True)
class MatchAnnotations:
    timeline_id: str
    duration_s: float
    actions: tuple[GroundTruthAction, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.actions, key=lambda a: a.time_s))
        object.__setattr__(self, "actions", ordered)

    def validate(self, num_classes: int) -> None:
        for a in self.actions:
            if not 0 <= a.class_id < num_classes:
                raise ContractError(f"class_id {a.class_id} outside [0, {num_classes})")
            if not 0 <= a.time_s <= self.duration_s:
                raise ContractError(f"action time {a.time_s} outside [0, {self.duration_s}]")

    def to_dict(self) -> dict:
        return {
            "timeline_id": self.timeline_id,
            "duration_s": self.duration_s,
            "actions": [
                {"class_id": a.class_id, "time_s": a.time_s, "visible": a.visible}
                for a in self.actions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatchAnnotations":
        actions = tuple(
            GroundTruthAction(int(a["class_id"]), float(a["time_s"]), bool(a.get("visible", True)))
            for a in d["actions"]
        )
        return cls(str(d["timeline_id"]), float(d["duration_s"]), actions)


@dataclass(frozen=True)
class StreamSpec:
    stream_id: int
    kind: str
    feature_dim: int
    tokens_per_clip: int
    seconds_per_token: float

    def token_times(self) -> np.ndarray:
        """Clip-relative center time of every token."""
        return (np.arange(self.tokens_per_clip) + 0.5) * self.seconds_per_token


@dataclass(frozen=True)
class EmbeddingStream:
    spec: StreamSpec
    features: np.ndarray

    def __post_init__(self):
        if self.features.shape != (self.spec.tokens_per_clip, self.spec.feature_dim):
            raise ContractError(
                f"stream {self.spec.stream_id}: features {self.features.shape} do not match "
                f"({self.spec.tokens_per_clip}, {self.spec.feature_dim})"
            )


@dataclass
class TargetGrid:
    scores: np.ndarray
    displacements: np.ndarray
    displacement_mask: np.ndarray
    # per-entry loss weight for displacement terms; 1 on masked entries unless mixed
    displacement_weight: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.displacement_weight is None:
            self.displacement_weight = self.displacement_mask.astype(np.float32)

    def copy(self) -> "TargetGrid":
        return TargetGrid(
            self.scores.copy(),
            self.displacements.copy(),
            self.displacement_mask.copy(),
            self.displacement_weight.copy(),
        )

    def classes_present(self) -> list[int]:
        """Action classes with at least one positive (hard) anchor."""
        return [int(c) for c in np.flatnonzero((self.scores[:, :-1] >= 1.0).any(axis=0))]


@dataclass
class PredictionGrid:
    scores: np.ndarray
    means: np.ndarray
    variances: np.ndarray


@dataclass
class ClipSample:
    timeline_id: str
    start_s: float
    streams: list[EmbeddingStream]
    targets: Optional[TargetGrid] = None


@dataclass(frozen=True)
class Detection:
    class_id: int
    time_s: float
    confidence: float


@dataclass
class PipelineConfig:
    """Every hyperparameter of the pipeline; defaults are the full-scale setting."""

    clip_seconds: int = 50
    d_model: int = 512
    n_encoder: int = 3
    n_decoder: int = 3
    n_heads: int = 8
    ffn_factor: int = 4
    dropout: float = 0.4
    num_classes: int = 17
    r_c: float = 2.0
    r_d: float = 3.0
    gamma: float = 1.0
    alpha_l: float = 0.3
    w_c: float = 100.0
    mixup: str = "balanced"  # none | plain | balanced
    mixup_alpha: float = 1.0
    mixup_beta: float = 0.6
    p_td: float = 0.5
    p_ts: float = 0.3
    base_lr: float = 5e-5
    epochs: int = 50
    warmup_epochs: int = 3
    batch_size: int = 32
    grad_clip: Optional[float] = 1.0
    l_out: Optional[int] = None
    audio_seconds: float = 0.96
    visual_dims: tuple[int, ...] = (8192,) * 5
    audio_patch: tuple[int, int] = (64, 96)
    audio_channels: int = 16
    use_audio: bool = True
    uncertainty: bool = True
    hierarchical: bool = True
    var_clamp: float = 8.0
    pos_every_layer: bool = True
    nms_window: float = 8.0
    nms_windows: dict[int, float] = field(default_factory=dict)
    nms_sigma: float = 0.5
    score_floor: float = 0.01
    clips_per_epoch: Optional[int] = None
    eval_every: int = 1

    def __post_init__(self):
        self.visual_dims = tuple(int(v) for v in self.visual_dims)
        self.audio_patch = tuple(int(v) for v in self.audio_patch)
        self.nms_windows = {int(k): float(v) for k, v in self.nms_windows.items()}

    @property
    def output_length(self) -> int:
        return self.l_out if self.l_out is not None else 2 * self.clip_seconds

    @property
    def audio_tokens(self) -> int:
        return int(math.floor(self.clip_seconds / self.audio_seconds + 1e-9))

    @property
    def eval_stride(self) -> float:
        return self.clip_seconds / 2

    def nms_window_for(self, class_id: int) -> float:
        return self.nms_windows.get(class_id, self.nms_window)

    def stream_specs(self) -> list[StreamSpec]:
        specs = [
            StreamSpec(j, VISUAL, dim, self.clip_seconds, 1.0)
            for j, dim in enumerate(self.visual_dims)
        ]
        if self.use_audio:
            specs.append(
                StreamSpec(
                    len(specs),
                    AUDIO,
                    self.audio_patch[0] * self.audio_patch[1],
                    self.audio_tokens,
                    self.audio_seconds,
                )
            )
        return specs

    def validate(self) -> None:
        problems = []
        if not self.r_d >= self.r_c > 0:
            problems.append("need r_d >= r_c > 0")
        if self.output_length < 1:
            problems.append("L_out must be >= 1")
        for name in ("dropout", "p_td", "p_ts", "alpha_l"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.gamma < 0:
            problems.append("gamma must be >= 0")
        if self.d_model % self.n_heads:
            problems.append("d_model must be divisible by n_heads")
        if self.mixup not in ("none", "plain", "balanced"):
            problems.append(f"unknown mixup mode {self.mixup!r}")
        if problems:
            raise ContractError("; ".join(problems))

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["visual_dims"] = list(self.visual_dims)
        d["audio_patch"] = list(self.audio_patch)
        d["nms_windows"] = {str(k): v for k, v in self.nms_windows.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AblationFlags:
    """Component toggles; the presets reproduce the M0-M9 model families."""

    use_audio: bool = True
    use_focal: bool = True
    use_uncertainty: bool = True
    mixup: str = "balanced"
    use_hierarchical_encoder: bool = True
    use_other_augmentations: bool = True
    l_out_factor: int = 2
    r_c: Optional[float] = None
    r_d: Optional[float] = None
    plain_mixup_params: tuple[float, float] = (0.6, 0.6)

    def apply(self, config: PipelineConfig, focal_gamma: float = 1.0) -> PipelineConfig:
        if self.l_out_factor not in (1, 2):
            raise ContractError("l_out_factor must be 1 or 2")
        changes: dict[str, Any] = dict(
            use_audio=self.use_audio,
            gamma=focal_gamma if self.use_focal else 0.0,
            uncertainty=self.use_uncertainty,
            mixup=self.mixup,
            hierarchical=self.use_hierarchical_encoder,
            l_out=self.l_out_factor * config.clip_seconds,
        )
        if self.mixup == "plain":
            changes["mixup_alpha"], changes["mixup_beta"] = self.plain_mixup_params
        if not self.use_other_augmentations:
            changes["p_td"] = 0.0
            changes["p_ts"] = 0.0
        if self.r_c is not None:
            changes["r_c"] = self.r_c
        if self.r_d is not None:
            changes["r_d"] = self.r_d
        return config.replace(**changes)

    @classmethod
    def preset(cls, name: str) -> "AblationFlags":
        m0 = cls(
            use_audio=False,
            use_focal=False,
            use_uncertainty=False,
            mixup="none",
            use_hierarchical_encoder=False,
            use_other_augmentations=False,
            r_c=3.0,
            r_d=6.0,
        )
        rows = {"M0": m0}
        rows["M1"] = dataclasses.replace(rows["M0"], use_hierarchical_encoder=True)
        rows["M2"] = dataclasses.replace(rows["M1"], r_c=2.0, r_d=3.0)
        rows["M3"] = dataclasses.replace(rows["M2"], mixup="plain")
        rows["M4"] = dataclasses.replace(rows["M2"], mixup="balanced")
        rows["M5"] = dataclasses.replace(rows["M4"], use_other_augmentations=True)
        rows["M6"] = dataclasses.replace(rows["M5"], l_out_factor=1)
        rows["M7"] = dataclasses.replace(rows["M5"], use_focal=True)
        rows["M8"] = dataclasses.replace(rows["M7"], use_uncertainty=True)
        rows["M9"] = dataclasses.replace(rows["M8"], use_audio=True)
        try:
            return rows[name]
        except KeyError:
            raise ContractError(f"unknown preset {name!r}") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["plain_mixup_params"] = list(self.plain_mixup_params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationFlags":
        d = dict(d)
        if "plain_mixup_params" in d:
            d["plain_mixup_params"] = tuple(d["plain_mixup_params"])
        return cls(**d)


def anchor_time(t: int, config: PipelineConfig) -> float:
    """Clip-relative time of anchor ``t`` (cell center)."""
    n = config.output_length
    if not 0 <= t < n:
        raise ContractError(f"anchor index {t} outside [0, {n})")
    return (t + 0.5) * config.clip_seconds / n


def anchor_times(config: PipelineConfig) -> np.ndarray:
    n = config.output_length
    return (np.arange(n) + 0.5) * config.clip_seconds / n


def build_targets(
    annotations: MatchAnnotations, clip_start_s: float, config: PipelineConfig
) -> TargetGrid:
    n_out, n_cls = config.output_length, config.num_classes
    anchors = clip_start_s + anchor_times(config)
    scores = np.zeros((n_out, n_cls + 1), dtype=np.float32)
    disp = np.zeros((n_out, n_cls + 1), dtype=np.float64)
    mask = np.zeros((n_out, n_cls + 1), dtype=bool)

    lo = clip_start_s - config.r_d
    hi = clip_start_s + config.clip_seconds + config.r_d
    for c in range(n_cls):
        times = np.array(
            [a.time_s for a in annotations.actions if a.class_id == c and lo <= a.time_s <= hi]
        )
        if times.size == 0:
            continue
        offsets = times[None, :] - anchors[:, None]  # (anchor, action)
        dist = np.abs(offsets)
        scores[:, c] = (dist <= config.r_c).any(axis=1)
        # argmin picks the first minimum, i.e. the earlier of equidistant actions
        nearest = dist.argmin(axis=1)
        nearest_offset = offsets[np.arange(n_out), nearest]
        within = np.abs(nearest_offset) <= config.r_d
        mask[:, c] = within
        disp[within, c] = nearest_offset[within]
    scores[:, n_cls] = 1.0 - scores[:, :n_cls].max(axis=1) if n_cls else 1.0
    return TargetGrid(scores, disp, mask)


def validate_grid(grid: Union[TargetGrid, PredictionGrid], config: PipelineConfig) -> list[str]:
    """Check grid invariants; an empty list means the grid is valid."""
    shape = (config.output_length, config.num_classes + 1)
    violations: list[str] = []
    if isinstance(grid, TargetGrid):
        arrays: Sequence[tuple[str, np.ndarray]] = (
            ("scores", grid.scores),
            ("displacements", grid.displacements),
            ("displacement_mask", grid.displacement_mask),
        )
    else:
        arrays = (("scores", grid.scores), ("means", grid.means), ("variances", grid.variances))
    for name, arr in arrays:
        if arr.shape != shape:
            violations.append(f"{name} has shape {arr.shape}, expected {shape}")
    if violations:
        return violations

    if isinstance(grid, TargetGrid):
        s = grid.scores
        if not np.all(np.isfinite(s)) or s.min() < 0 or s.max() > 1:
            violations.append("score outside [0, 1]")
        if not np.all(np.isfinite(grid.displacements)):
            violations.append("non-finite displacement")
        masked = np.abs(grid.displacements[grid.displacement_mask])
        if masked.size and masked.max() > config.r_d + 1e-6:
            violations.append("displacement exceeds radius")
        if grid.displacement_mask[:, -1].any():
            violations.append("background column carries displacement supervision")
        hard = np.all((s == 0) | (s == 1))
        if hard and not np.array_equal(s[:, -1], 1 - s[:, :-1].max(axis=1, initial=0)):
            violations.append("background column is not the complement of action columns")
    else:
        s = grid.scores
        if not np.all(np.isfinite(s)) or s.min() <= 0 or s.max() >= 1:
            violations.append("score outside (0, 1)")
        if not np.all(np.isfinite(grid.means)):
            violations.append("non-finite mean")
        v = grid.variances
        if not np.all(np.isfinite(v)):
            violations.append("non-finite variance")
        elif v.min() <= 0:
            violations.append("non-positive variance")
    return violations
