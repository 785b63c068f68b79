"""Training loop: Adam with linear warmup + cosine decay, validation-based model selection."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import ClassQueue, balanced_mixup, plain_mixup, sample_drop_seconds, temporal_switch
from .checkpoint import load_checkpoint, save_checkpoint
from .core import AblationFlags, ClipSample, PipelineConfig
from .data import Dataset, train_clip_starts
from .evaluation import EvalReport, evaluate
from .inference import detect_dataset, ensemble_average  # noqa: F401  (re-exported)
from .losses import LossBreakdown, compute_losses
from .model import Astra, build_model, collate_streams

log = logging.getLogger(__name__)


def lr_schedule(step: int, steps_per_epoch: int, config: PipelineConfig) -> float:
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warmup:
        return config.base_lr * step / warmup
    if total <= warmup:
        return config.base_lr
    progress = min((step - warmup) / (total - warmup), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def collate_targets(clips: Sequence[ClipSample], dtype=torch.float32) -> dict:
    def stack(attr):
        return torch.from_numpy(np.stack([getattr(c.targets, attr) for c in clips]))

    return {
        "scores": stack("scores").to(dtype),
        "displacements": stack("displacements").to(dtype),
        "mask": stack("displacement_mask"),
        "weight": stack("displacement_weight").to(dtype),
    }


def make_optimizer(model: Astra) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=model.config.base_lr)


@dataclass
class TrainState:
    model: Astra
    optimizer: torch.optim.Optimizer
    seed: int
    epoch: int = 0  # epochs completed
    step: int = 0
    queue: Optional[ClassQueue] = None
    best_metric: float = -math.inf
    best_epoch: int = -1
    best_params: Optional[dict] = None
    checkpoint_path: Optional[Path] = None
    history: list[dict] = field(default_factory=list)

    def header_state(self) -> dict:
        return {
            "seed": self.seed,
            "epoch": self.epoch,
            "step": self.step,
            "best_metric": self.best_metric if math.isfinite(self.best_metric) else None,
            "best_epoch": self.best_epoch,
            "queue": self.queue.state() if self.queue is not None else None,
            "history": self.history,
        }


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 7])


def train_step(state: TrainState, clips: list[ClipSample], rng, steps_per_epoch: int) -> LossBreakdown:
    model, config = state.model, state.model.config
    if config.mixup == "balanced":
        clips, state.queue = balanced_mixup(clips, state.queue, config.mixup_alpha, config.mixup_beta, rng)
    elif config.mixup == "plain":
        clips = plain_mixup(clips, config.mixup_alpha, config.mixup_beta, rng)
    if config.p_ts > 0:
        clips = temporal_switch(clips, config.p_ts, config, rng)
    drop = None
    if config.p_td > 0:
        drop = torch.from_numpy(sample_drop_seconds(len(clips), config.clip_seconds, config.p_td, rng))
    model.train()
    out = model(collate_streams(clips), drop)
    total, breakdown = compute_losses(out, collate_targets(clips), config)
    lr = lr_schedule(state.step, steps_per_epoch, config)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.zero_grad()
    total.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.step += 1
    return breakdown


def validate(model: Astra, dataset: Dataset, timeline_ids: Sequence[str], metrics=("tight", "loose")) -> EvalReport:
    dets = detect_dataset(dataset, model, timeline_ids)
    ann = {t: dataset.annotations[t] for t in timeline_ids}
    return evaluate(dets, ann, model.config.num_classes, metrics=metrics, subsets=("all",))


def train_run(
    dataset: Dataset,
    config: PipelineConfig,
    flags: Optional[AblationFlags] = None,
    seed: int = 0,
    out_dir=None,
    resume=None,
    stop_after_epoch: Optional[int] = None,
    val_metrics: Sequence[str] = ("tight", "loose"),
) -> TrainState:
    """Train one model; the returned state's model holds the best-validation weights.

    ``stop_after_epoch`` halts early (for resumption tests) without restoring the best weights.
    """
    if flags is not None:
        config = flags.apply(config, focal_gamma=config.gamma or 1.0)
    config = dataset.configure(config)
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as f:
            json.dump(
                {"pipeline": config.to_dict(), "flags": flags.to_dict() if flags else None, "seed": seed},
                f, indent=1, sort_keys=True,
            )

    train_ids = dataset.timelines("train")
    valid_ids = dataset.timelines("valid")
    if resume is not None:
        model, header, optimizer = load_checkpoint(resume, make_optimizer)
        st = header["state"]
        state = TrainState(model, optimizer, seed, st["epoch"], st["step"], history=st["history"])
        state.best_metric = st["best_metric"] if st["best_metric"] is not None else -math.inf
        state.best_epoch = st["best_epoch"]
        state.queue = ClassQueue(config.num_classes)
        if st.get("queue"):
            state.queue.restore(st["queue"], lambda t, s: dataset.clip(t, s, config))
        best_path = Path(resume).with_name("best.ckpt")
        if best_path.exists():
            state.best_params = load_checkpoint(best_path)[0].state_dict()
    else:
        model = build_model(config, seed)
        state = TrainState(model, make_optimizer(model), seed, queue=ClassQueue(config.num_classes))

    probe = train_clip_starts(dataset, train_ids, config, np.random.default_rng(0))
    steps_per_epoch = math.ceil(len(probe) / config.batch_size)
    log_file = open(out / "train_log.jsonl", "a") if out is not None else None
    try:
        while state.epoch < config.epochs:
            epoch = state.epoch
            rng = _epoch_rng(seed, epoch)
            torch.manual_seed(seed * 100003 + epoch)
            schedule = train_clip_starts(dataset, train_ids, config, rng)
            losses = []
            for i in range(0, len(schedule), config.batch_size):
                clips = [dataset.clip(t, s, config) for t, s in schedule[i:i + config.batch_size]]
                br = train_step(state, clips, rng, steps_per_epoch)
                losses.append(br.total)
                if log_file is not None:
                    log_file.write(json.dumps({"step": state.step, **br.to_dict()}) + "\n")
            state.epoch += 1
            row = {"epoch": state.epoch, "train_loss": float(np.mean(losses))}
            if valid_ids and (state.epoch % config.eval_every == 0 or state.epoch == config.epochs):
                report = validate(state.model, dataset, valid_ids, val_metrics)
                row["tight"] = report.tight
                row["loose"] = report.loose if "loose" in val_metrics else None
                row["per_class"] = [
                    None if np.isnan(v) else float(v) for v in report.slice("tight").per_class_average_ap
                ]
                if row["tight"] > state.best_metric:
                    state.best_metric, state.best_epoch = row["tight"], state.epoch
                    state.best_params = copy.deepcopy(state.model.state_dict())
                    if out is not None:
                        save_checkpoint(out / "best.ckpt", state.model, state={"epoch": state.epoch})
            state.history.append(row)
            log.info("epoch %d: %s", state.epoch, {k: v for k, v in row.items() if k != "per_class"})
            if out is not None:
                state.checkpoint_path = save_checkpoint(
                    out / "last.ckpt", state.model, state.optimizer, state.header_state()
                )
            if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
                return state
    finally:
        if log_file is not None:
            log_file.close()

    if state.best_params is not None:
        state.model.load_state_dict(state.best_params)
    else:
        state.best_params = copy.deepcopy(state.model.state_dict())
    if out is not None:
        save_checkpoint(out / "model.ckpt", state.model, state={"best_epoch": state.best_epoch})
        write_history_csv(state.history, out / "history.csv")
    return state


def write_history_csv(history: Sequence[dict], path) -> None:
    n_cls = max((len(r.get("per_class") or []) for r in history), default=0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "loose", "tight"] + [f"ap_class_{c}" for c in range(n_cls)])
        for r in history:
            pcs = r.get("per_class") or [None] * n_cls
            w.writerow(
                [r["epoch"], r["train_loss"], r.get("loose"), r.get("tight")]
                + ["n/a" if v is None else v for v in pcs]
            )
