"""Momentum SGD with a two-phase step-decay learning-rate curve."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import Sample, stack
from .models import Backbone, to_batch

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    epochs: int = 10
    lr: float = 0.05
    decay_epoch: int = 7  # first epoch of the low-rate phase
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    clip_norm: float | None = 1.0  # global gradient-norm clipping; None disables
    seed: int = 0
    # retrain for only the first ``replay_epochs`` epochs of the curve after pruning
    replay_epochs: int | None = None

    def validate(self) -> "Schedule":
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid schedule {self}")
        if self.replay_epochs is not None and not 1 <= self.replay_epochs <= self.epochs:
            raise ValueError("replay_epochs must lie in [1, epochs]")
        return self


def lr_curve(schedule: Schedule) -> list[float]:
    return [schedule.lr if e < schedule.decay_epoch else schedule.lr * schedule.decay_factor for e in range(schedule.epochs)]


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    steps: int = 0


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, dict):
        return data["images"], data["labels"]
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], Sample):
        a = stack(list(data))
        return a["images"], a["labels"]
    if isinstance(data, tuple) and len(data) == 2:
        return data
    raise ValueError("empty or unrecognised dataset")


def apply_mask(model: Backbone, mask: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, m in mask.items():
            params[name].mul_(torch.as_tensor(m, dtype=params[name].dtype))


def train(
    model: Backbone,
    data,
    schedule: Schedule,
    mask: dict[str, np.ndarray] | None = None,
    epochs: int | None = None,
    seed_offset: int = 0,
) -> TrainResult:
    """Train in place.  With a ``mask`` attached, masked weights are zeroed
    after every optimizer step (and their gradients before it)."""
    schedule.validate()
    images, labels = _arrays(data)
    if len(images) == 0:
        raise ValueError("empty dataset")
    x_all = to_batch(images, model)
    y_all = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    curve = lr_curve(schedule)[: epochs or schedule.epochs]

    params = dict(model.named_parameters())
    tmask = {k: torch.as_tensor(v, dtype=params[k].dtype) for k, v in (mask or {}).items()}
    if mask:
        apply_mask(model, mask)
    opt = torch.optim.SGD(model.parameters(), lr=curve[0], momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    gen = torch.Generator().manual_seed(schedule.seed * 100_003 + seed_offset)
    result = TrainResult()
    model.train()
    for epoch, lr in enumerate(curve):
        for g in opt.param_groups:
            g["lr"] = lr
        order = torch.randperm(len(x_all), generator=gen)
        total, count = 0.0, 0
        for i in range(0, len(order), schedule.batch_size):
            idx = order[i : i + schedule.batch_size]
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            opt.zero_grad(set_to_none=False)
            loss.backward()
            with torch.no_grad():
                for name, m in tmask.items():
                    params[name].grad.mul_(m)
            if schedule.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.clip_norm)
            opt.step()
            with torch.no_grad():
                for name, m in tmask.items():
                    params[name].mul_(m)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            total += loss.item() * len(idx)
            count += len(idx)
            result.steps += 1
        result.losses.append(total / count)
        result.lrs.append(lr)
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, result.losses[-1])
    model.eval()
    return result
