"""Focal classification loss, Gaussian displacement NLL and their combination."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

EPS = 1e-7


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message: str, payload: dict):
        super().__init__(f"{message}: {payload}")
        self.payload = payload


@dataclass
class LossBreakdown:
    l_c: float
    l_d: float
    total: float
    n_dis: int

    def to_dict(self) -> dict:
        return {"L_c": self.l_c, "L_d": self.l_d, "total": self.total, "N_dis": self.n_dis}


def focal_bce(targets, preds, gamma: float) -> torch.Tensor:
    """Mean over all entries of -|s - p|^gamma * (s ln p + (1 - s) ln(1 - p))."""
    s = torch.as_tensor(targets)
    p = torch.as_tensor(preds)
    if s.shape != p.shape:
        raise ValueError(f"shape mismatch: targets {tuple(s.shape)} vs predictions {tuple(p.shape)}")
    s = s.to(p.dtype)
    p = p.clamp(EPS, 1.0 - EPS)
    bce = -(s * torch.log(p) + (1.0 - s) * torch.log(1.0 - p))
    if gamma == 0:
        return bce.mean()
    return ((s - p).abs() ** gamma * bce).mean()


def gaussian_nll(disp, mask, means, variances, alpha_l: float, weight=None) -> tuple[torch.Tensor, int]:
    """Weighted Gaussian NLL over supervised entries; returns (loss, number of entries)."""
    mu = torch.as_tensor(means)
    d = torch.as_tensor(disp).to(mu.dtype)
    var = torch.as_tensor(variances).to(mu.dtype)
    m = torch.as_tensor(mask, dtype=torch.bool)
    n_dis = int(m.sum())
    if n_dis == 0:
        return mu.sum() * 0.0, 0
    w = m.to(mu.dtype) if weight is None else torch.as_tensor(weight).to(mu.dtype) * m
    term = alpha_l / var * (d - mu) ** 2 + (1.0 - alpha_l) * torch.log(var)
    return (w * term).sum() / n_dis, n_dis


def mse_displacement(disp, mask, means, weight=None) -> tuple[torch.Tensor, int]:
    """Plain squared-error regression loss used when the uncertainty head is disabled."""
    mu = torch.as_tensor(means)
    m = torch.as_tensor(mask, dtype=torch.bool)
    n_dis = int(m.sum())
    if n_dis == 0:
        return mu.sum() * 0.0, 0
    w = m.to(mu.dtype) if weight is None else torch.as_tensor(weight).to(mu.dtype) * m
    return (w * (torch.as_tensor(disp).to(mu.dtype) - mu) ** 2).sum() / n_dis, n_dis


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def combine_losses(l_c, l_d, w_c: float):
    vals = {"L_c": _scalar(l_c), "L_d": _scalar(l_d), "w_c": w_c}
    total = w_c * l_c + l_d
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingDivergenceError("non-finite loss", vals)
    return total


def compute_losses(out: dict, targets: dict, config) -> tuple[torch.Tensor, LossBreakdown]:
    """Total training loss for a batch of model outputs and stacked target tensors."""
    l_c = focal_bce(targets["scores"], out["scores"], config.gamma)
    if config.uncertainty:
        l_d, n_dis = gaussian_nll(
            targets["displacements"], targets["mask"], out["means"], out["variances"],
            config.alpha_l, targets.get("weight"),
        )
    else:
        l_d, n_dis = mse_displacement(
            targets["displacements"], targets["mask"], out["means"], targets.get("weight")
        )
    total = combine_losses(l_c, l_d, config.w_c)
    return total, LossBreakdown(_scalar(l_c), _scalar(l_d), _scalar(total), n_dis)
