"""Multimodal hierarchical transformer encoder-decoder with classification and displacement heads."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    AUDIO,
    ClipSample,
    ContractError,
    PipelineConfig,
    PredictionGrid,
    StreamSpec,
    anchor_times,
)


# q/k identity gain at initialisation; without it attention starts nearly uniform
# over the clip and learning to localise takes far longer than a desk-scale run
QK_INIT_SCALE = 3.0


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    @torch.no_grad()
    def local_init(self, scale: float) -> None:
        """Start q/k near a scaled identity so matching positional encodings attend to each other."""
        eye = torch.eye(self.q.weight.shape[0], dtype=self.q.weight.dtype)
        for lin in (self.q, self.k):
            lin.weight.mul_(0.5).add_(scale * eye)

    def forward(self, x, memory=None, allowed: Optional[torch.Tensor] = None, q_pos=None, k_pos=None):
        """``allowed`` is a boolean (queries, keys) matrix; False entries get zero weight.

        ``q_pos``/``k_pos`` are added to the query/key inputs only, never to the values.
        """
        memory = x if memory is None else memory
        b, nq, d = x.shape
        nk = memory.shape[1]
        qin = x if q_pos is None else x + q_pos
        kin = memory if k_pos is None else memory + k_pos
        q = self.q(qin).view(b, nq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(kin).view(b, nk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(memory).view(b, nk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(ctx)


def _ffn(d_model: int, factor: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_model, factor * d_model),
        nn.ReLU(),
        nn.Dropout(dropout),
        nn.Linear(factor * d_model, d_model),
    )


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder block."""

    def __init__(self, d_model, n_heads, factor, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = _ffn(d_model, factor, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, allowed=None, pos=None):
        x = self.norm1(x + self.drop(self.attn(x, allowed=allowed, q_pos=pos, k_pos=pos)))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, factor, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = _ffn(d_model, factor, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, q, memory, q_pos=None, k_pos=None):
        q = self.norm1(q + self.drop(self.self_attn(q, q_pos=q_pos, k_pos=q_pos)))
        q = self.norm2(q + self.drop(self.cross_attn(q, memory, q_pos=q_pos, k_pos=k_pos)))
        return self.norm3(q + self.drop(self.ffn(q)))


def time_encoding(times, d_model: int, clip_seconds: float) -> torch.Tensor:
    """Sinusoidal features of clip time; periods range from 1 s to 4 clip lengths."""
    times = torch.as_tensor(np.asarray(times, dtype=np.float64))
    periods = torch.logspace(0.0, math.log10(4 * clip_seconds), d_model // 2, dtype=torch.float64)
    angles = 2 * math.pi * times[:, None] / periods[None, :]
    enc = torch.zeros(len(times), d_model, dtype=torch.float64)
    enc[:, 0 : 2 * (d_model // 2) : 2] = torch.sin(angles)
    enc[:, 1 : 2 * (d_model // 2) : 2] = torch.cos(angles)
    return enc.float()


def segment_ids(token_times: torch.Tensor, clip_seconds: float, n_segments: int) -> torch.Tensor:
    seg = torch.floor(token_times * n_segments / clip_seconds).long()
    return seg.clamp(0, n_segments - 1)


class HierarchicalEncoder(nn.Module):
    """Layer i restricts self-attention to 2**(n_e - i) equal time spans of the clip."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.clip_seconds = config.clip_seconds
        self.hierarchical = config.hierarchical
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.ffn_factor, config.dropout)
            for _ in range(config.n_encoder)
        )

    def segment_counts(self) -> list[int]:
        n = len(self.layers)
        if not self.hierarchical:
            return [1] * n
        return [2 ** (n - i) for i in range(1, n + 1)]

    def forward(self, x: torch.Tensor, token_times: torch.Tensor, return_all=False, pos=None):
        outputs = []
        for layer, n_seg in zip(self.layers, self.segment_counts()):
            allowed = None
            if n_seg > 1:
                seg = segment_ids(token_times, self.clip_seconds, n_seg)
                allowed = seg[:, None] == seg[None, :]
            x = layer(x, allowed, pos)
            outputs.append(x)
        return outputs if return_all else x


class AudioEmbedder(nn.Module):
    """Small convolutional stack applied independently to each log-mel patch."""

    def __init__(self, patch: Sequence[int], channels: int, d_model: int):
        super().__init__()
        self.patch = tuple(patch)
        self.convs = nn.Sequential(
            nn.Conv2d(1, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
        )
        self.proj = nn.Linear(channels, d_model)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        b, n, _ = patches.shape
        x = patches.reshape(b * n, 1, *self.patch)
        x = self.convs(x).mean(dim=(2, 3))
        return self.proj(x).view(b, n, -1)


class StreamProjection(nn.Module):
    """Two-layer point-wise feed-forward projection to the model dimension."""

    def __init__(self, in_dim: int, d_model: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, d_model),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(d_model, d_model),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ClassificationHead(nn.Module):
    def __init__(self, d_model, n_out, dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, d_model), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_model, n_out)
        )

    def forward(self, q):
        return torch.sigmoid(self.net(q))


class DisplacementHead(nn.Module):
    """Gaussian displacement head: mean (linear) and variance (exp of a clamped pre-activation).

    With ``uncertainty=False`` only the mean branch exists and the variance is fixed at 1.
    """

    def __init__(self, d_model, n_out, dropout, uncertainty=True, var_clamp=8.0):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Linear(d_model, d_model),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(d_model, d_model),
            nn.ReLU(),
            nn.Dropout(dropout),
        )
        self.mean = nn.Linear(d_model, n_out)
        self.log_var = nn.Linear(d_model, n_out) if uncertainty else None
        self.var_clamp = var_clamp

    def forward(self, q):
        h = self.trunk(q)
        mu = self.mean(h)
        if self.log_var is None:
            return mu, torch.ones_like(mu)
        pre = self.log_var(h).clamp(-self.var_clamp, self.var_clamp)
        return mu, torch.exp(pre)


class Astra(nn.Module):
    """Action-spotting transformer.

    ``forward`` takes one tensor per stream, shaped (batch, tokens, features), and
    returns a dict with ``scores``, ``means`` and ``variances`` of shape
    (batch, L_out, C + 1).
    """

    def __init__(self, config: PipelineConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.specs: list[StreamSpec] = config.stream_specs()
        d = config.d_model
        n_streams = len(self.specs)
        self.projections = nn.ModuleDict()
        for s in self.specs:
            if s.kind != AUDIO:
                self.projections[str(s.stream_id)] = StreamProjection(s.feature_dim, d, config.dropout)
        # learnable, initialised from the token/anchor clip times
        self.positional = nn.ParameterList(
            nn.Parameter(time_encoding(s.token_times(), d, config.clip_seconds)) for s in self.specs
        )
        self.source = nn.Parameter(torch.randn(n_streams, d) * 0.02)
        self.drop_tokens = nn.Parameter(torch.randn(n_streams, d) * 0.02)
        self.encoder = HierarchicalEncoder(config)
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.ffn_factor, config.dropout)
            for _ in range(config.n_decoder)
        )
        self.queries = nn.Parameter(
            time_encoding(anchor_times(config), d, config.clip_seconds)
            + torch.randn(config.output_length, d) * 0.02
        )
        self.cls_head = ClassificationHead(d, config.num_classes + 1, config.dropout)
        # optional parts come last so toggling them leaves the other initial weights unchanged
        self.audio = None
        if any(s.kind == AUDIO for s in self.specs):
            self.audio = AudioEmbedder(config.audio_patch, config.audio_channels, d)
        self.disp_head = DisplacementHead(
            d, config.num_classes + 1, config.dropout, config.uncertainty, config.var_clamp
        )
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)) and m.bias is not None:
                nn.init.zeros_(m.bias)
        for m in self.modules():
            if isinstance(m, MultiHeadAttention):
                m.local_init(QK_INIT_SCALE)
        if self.disp_head.log_var is not None:
            # untrained models predict unit variance
            nn.init.zeros_(self.disp_head.log_var.weight)
        times = torch.cat([torch.as_tensor(s.token_times()) for s in self.specs]).float()
        self.register_buffer("token_times", times, persistent=False)

    # -- stages -------------------------------------------------------------

    def embed_stream(self, j: int, x: torch.Tensor) -> torch.Tensor:
        spec = self.specs[j]
        if x.shape[1:] != (spec.tokens_per_clip, spec.feature_dim):
            raise ContractError(
                f"stream {j}: got {tuple(x.shape[1:])}, expected "
                f"({spec.tokens_per_clip}, {spec.feature_dim})"
            )
        if spec.kind == AUDIO:
            return self.audio(x)
        return self.projections[str(spec.stream_id)](x)

    def add_encodings(self, j: int, tokens: torch.Tensor) -> torch.Tensor:
        return tokens + self.positional[j] + self.source[j]

    def project_streams(
        self, streams: Sequence[torch.Tensor], drop_seconds: Optional[torch.Tensor] = None
    ) -> list[torch.Tensor]:
        from .augment import apply_temporal_dropout

        out = []
        for j, x in enumerate(streams):
            tok = self.embed_stream(j, x)
            if drop_seconds is not None:
                tok = apply_temporal_dropout(
                    tok, self.specs[j].token_times(), self.drop_tokens[j], drop_seconds
                )
            out.append(self.add_encodings(j, tok))
        return out

    def token_encodings(self) -> torch.Tensor:
        """Positional + source encoding of every token, concatenated over streams."""
        return torch.cat([p + self.source[j] for j, p in enumerate(self.positional)], dim=0)

    def decode(self, memory: torch.Tensor, memory_pos: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Run the queries through the decoder; works for any number of memory tokens."""
        q = self.queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        q_pos = self.queries if self.config.pos_every_layer else None
        for layer in self.decoder:
            q = layer(q, memory, q_pos, memory_pos)
        return q

    def forward(self, streams: Sequence[torch.Tensor], drop_seconds=None) -> dict:
        if len(streams) != len(self.specs):
            raise ContractError(f"expected {len(self.specs)} streams, got {len(streams)}")
        tokens = torch.cat(self.project_streams(streams, drop_seconds), dim=1)
        pos = self.token_encodings() if self.config.pos_every_layer else None
        memory = self.encoder(tokens, self.token_times, pos=pos)
        q = self.decode(memory, pos)
        scores = self.cls_head(q)
        means, variances = self.disp_head(q)
        return {"scores": scores, "means": means, "variances": variances}


def build_model(config: PipelineConfig, seed: int = 0) -> Astra:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Astra(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def collate_streams(clips: Sequence[ClipSample], dtype=torch.float32) -> list[torch.Tensor]:
    n = len(clips[0].streams)
    return [
        torch.from_numpy(np.stack([c.streams[j].features for c in clips])).to(dtype)
        for j in range(n)
    ]


def to_grids(out: dict) -> list[PredictionGrid]:
    s = out["scores"].detach().cpu().numpy()
    m = out["means"].detach().cpu().numpy()
    v = out["variances"].detach().cpu().numpy()
    return [PredictionGrid(s[i], m[i], v[i]) for i in range(s.shape[0])]


@torch.no_grad()
def predict_clips(model: Astra, clips: Sequence[ClipSample], batch_size: int = 16) -> list[PredictionGrid]:
    """Eval-mode forward over clips (dropout off, no augmentation)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    grids = []
    for i in range(0, len(clips), batch_size):
        grids.extend(to_grids(model(collate_streams(clips[i:i + batch_size], dtype))))
    model.train(was_training)
    return grids


def forward_clip(clip: ClipSample, model: Astra, train_mode: bool = False) -> PredictionGrid:
    if not train_mode:
        return predict_clips(model, [clip])[0]
    model.train()
    dtype = next(model.parameters()).dtype
    return to_grids(model(collate_streams([clip], dtype)))[0]
