"""Checkpoint archive: a JSON header plus raw little-endian float32 payloads."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import PipelineConfig
from .model import Astra, build_model

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def _f32(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def save_checkpoint(
    path,
    model: Astra,
    optimizer: Optional[torch.optim.Optimizer] = None,
    state: Optional[dict] = None,
) -> Path:
    path = Path(path)
    params = model.state_dict()
    header = {
        "format": "astra-checkpoint/1",
        "config": model.config.to_dict(),
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "state": state or {},
        "optimizer": None,
    }
    payloads = {f"params/{k}.f32": _f32(v) for k, v in params.items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        opt_entries = []
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                opt_entries.append({"name": name, "step": float(st["step"])})
                payloads[f"optim/{name}/exp_avg.f32"] = _f32(st["exp_avg"])
                payloads[f"optim/{name}/exp_avg_sq.f32"] = _f32(st["exp_avg_sq"])
        header["optimizer"] = {"lr": optimizer.param_groups[0]["lr"], "entries": opt_entries}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode())
        for name in sorted(payloads):
            _write(zf, name, payloads[name])
    tmp.replace(path)
    return path


def _read_tensor(zf, name, shape) -> torch.Tensor:
    arr = np.frombuffer(zf.read(name), dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def load_checkpoint(path, optimizer_factory=None):
    """Returns (model, header, optimizer-or-None)."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        config = PipelineConfig.from_dict(header["config"])
        model = build_model(config)
        state = {
            e["name"]: _read_tensor(zf, f"params/{e['name']}.f32", e["shape"])
            for e in header["parameters"]
        }
        model.load_state_dict(state)
        optimizer = None
        if optimizer_factory is not None:
            optimizer = optimizer_factory(model)
            opt = header.get("optimizer")
            if opt:
                params = dict(model.named_parameters())
                for e in opt["entries"]:
                    p = params[e["name"]]
                    optimizer.state[p] = {
                        "step": torch.tensor(e["step"]),
                        "exp_avg": _read_tensor(zf, f"optim/{e['name']}/exp_avg.f32", p.shape),
                        "exp_avg_sq": _read_tensor(zf, f"optim/{e['name']}/exp_avg_sq.f32", p.shape),
                    }
    return model, header, optimizer
