"""Balanced mixup with a per-class queue, temporal dropout and temporal switch."""

from __future__ import annotations

from collections import deque
from typing import Optional, Sequence

import numpy as np
import torch

from .core import ClipSample, EmbeddingStream, PipelineConfig, TargetGrid, anchor_times


class ClassQueue:
    """Two most recent clips containing each action class."""

    def __init__(self, num_classes: int, capacity: int = 2):
        self.capacity = capacity
        self.buffers: list[deque] = [deque(maxlen=capacity) for _ in range(num_classes)]

    def push(self, clip: ClipSample) -> None:
        for c in clip.targets.classes_present():
            self.buffers[c].append(clip)

    def update(self, clips: Sequence[ClipSample]) -> None:
        for clip in clips:
            self.push(clip)

    def nonempty(self) -> list[int]:
        return [c for c, b in enumerate(self.buffers) if b]

    def state(self) -> list[list[tuple[str, float]]]:
        return [[(c.timeline_id, c.start_s) for c in b] for b in self.buffers]

    def restore(self, state, make_clip) -> None:
        for buf, entries in zip(self.buffers, state):
            buf.clear()
            for tid, start in entries:
                buf.append(make_clip(tid, start))


def mix_clips(a: ClipSample, b: ClipSample, lam: float) -> ClipSample:
    streams = [
        EmbeddingStream(sa.spec, (lam * sa.features + (1.0 - lam) * sb.features).astype(np.float32))
        for sa, sb in zip(a.streams, b.streams)
    ]
    ta, tb = a.targets, b.targets
    scores = (lam * ta.scores + (1.0 - lam) * tb.scores).astype(np.float32)
    mask_a = ta.displacement_mask & (lam > 0)
    mask_b = tb.displacement_mask & (lam < 1)
    take_a = mask_a & (~mask_b | (lam >= 0.5))
    take_b = mask_b & ~take_a
    disp = np.where(take_a, ta.displacements, np.where(take_b, tb.displacements, 0.0))
    weight = np.where(
        take_a, lam * ta.displacement_weight, np.where(take_b, (1.0 - lam) * tb.displacement_weight, 0.0)
    )
    targets = TargetGrid(
        scores, disp, take_a | take_b, weight.astype(np.float32)
    )
    return ClipSample(a.timeline_id, a.start_s, streams, targets)


def balanced_mixup(
    batch: Sequence[ClipSample],
    queue: ClassQueue,
    alpha: float,
    beta: float,
    rng: np.random.Generator,
) -> tuple[list[ClipSample], ClassQueue]:
    """Mix every clip with a partner drawn class-uniformly from the queue, then refresh the queue."""
    mixed = []
    for clip in batch:
        classes = queue.nonempty()
        if not classes:
            mixed.append(clip)
            continue
        c = classes[rng.integers(len(classes))]
        buf = queue.buffers[c]
        partner = buf[rng.integers(len(buf))]
        lam = float(rng.beta(alpha, beta))
        mixed.append(mix_clips(clip, partner, lam))
    queue.update(batch)
    return mixed, queue


def plain_mixup(
    batch: Sequence[ClipSample], alpha: float, beta: float, rng: np.random.Generator
) -> list[ClipSample]:
    """Standard mixup: partners come from a permutation of the same batch."""
    perm = rng.permutation(len(batch))
    return [
        mix_clips(clip, batch[j], float(rng.beta(alpha, beta))) for clip, j in zip(batch, perm)
    ]


# ---------------------------------------------------------------------------
# temporal dropout


def sample_drop_seconds(batch_size: int, clip_seconds: int, p_td: float, rng) -> np.ndarray:
    return rng.random((batch_size, clip_seconds)) < p_td


def apply_temporal_dropout(
    tokens: torch.Tensor,
    token_times: np.ndarray,
    replacement: torch.Tensor,
    drop_seconds: torch.Tensor,
) -> torch.Tensor:
    """Replace tokens whose center time falls in a dropped second by ``replacement``.

    tokens: (B, L, d); token_times: (L,) clip seconds; drop_seconds: (B, T) bool.
    """
    drop_seconds = torch.as_tensor(drop_seconds, dtype=torch.bool)
    seconds = np.minimum(np.floor(token_times).astype(np.int64), drop_seconds.shape[1] - 1)
    hit = drop_seconds[:, torch.from_numpy(seconds)]
    return torch.where(hit[..., None], replacement.to(tokens.dtype).expand_as(tokens), tokens)


def temporal_dropout(
    tokens: Sequence[torch.Tensor],
    token_times: Sequence[np.ndarray],
    replacements: torch.Tensor,
    p_td: float,
    clip_seconds: int,
    rng: np.random.Generator,
) -> list[torch.Tensor]:
    """Drop whole seconds across all streams of a batch."""
    drop = torch.from_numpy(sample_drop_seconds(tokens[0].shape[0], clip_seconds, p_td, rng))
    return [
        apply_temporal_dropout(x, t, replacements[j], drop)
        for j, (x, t) in enumerate(zip(tokens, token_times))
    ]


# ---------------------------------------------------------------------------
# temporal switch


def _pair_permutation(times: np.ndarray, swapped_pairs: Sequence[int]) -> np.ndarray:
    """Index permutation exchanging the contents of seconds 2i and 2i+1.

    Equal-sized blocks swap as blocks; unequal blocks (audio tokens straddling
    second boundaries) are reversed so the operation stays an involution.
    """
    perm = np.arange(len(times))
    seconds = np.floor(times).astype(np.int64)
    for i in swapped_pairs:
        first = np.flatnonzero(seconds == 2 * i)
        second = np.flatnonzero(seconds == 2 * i + 1)
        span = np.concatenate([first, second])
        if len(first) == len(second):
            perm[span] = np.concatenate([second, first])
        else:
            perm[span] = span[::-1]
    return perm


def switch_clip(clip: ClipSample, swapped_pairs: Sequence[int], config: PipelineConfig) -> ClipSample:
    streams = []
    for s in clip.streams:
        perm = _pair_permutation(s.spec.token_times(), swapped_pairs)
        streams.append(EmbeddingStream(s.spec, s.features[perm]))
    targets = None
    if clip.targets is not None:
        perm = _pair_permutation(anchor_times(config), swapped_pairs)
        t = clip.targets
        targets = TargetGrid(
            t.scores[perm], t.displacements[perm], t.displacement_mask[perm], t.displacement_weight[perm]
        )
    return ClipSample(clip.timeline_id, clip.start_s, streams, targets)


def temporal_switch(
    batch: Sequence[ClipSample], p_ts: float, config: PipelineConfig, rng: np.random.Generator
) -> list[ClipSample]:
    n_pairs = config.clip_seconds // 2
    out = []
    for clip in batch:
        pairs = np.flatnonzero(rng.random(n_pairs) < p_ts)
        out.append(switch_clip(clip, pairs, config) if len(pairs) else clip)
    return out
