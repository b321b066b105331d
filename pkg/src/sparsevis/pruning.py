"""Global magnitude pruning and the learning-rate-rewinding sweep.

A mask is a plain ``dict`` mapping each prunable parameter name to a 0/1
``uint8`` array of the parameter's shape.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .io import config_hash, read_json, save_arrays, load_arrays, write_json
from .models import Backbone, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .training import Schedule, TrainResult, apply_mask, lr_curve, train

log = logging.getLogger(__name__)

PruneMask = dict[str, np.ndarray]
MANIFEST = "manifest.json"


class PruningError(ValueError):
    pass


def init_mask(model: Backbone) -> PruneMask:
    params = dict(model.named_parameters())
    return {name: np.ones(tuple(params[name].shape), dtype=np.uint8) for name in model.prunable}


def _check_mask(model: Backbone, mask: PruneMask) -> None:
    params = dict(model.named_parameters())
    if set(mask) != set(model.prunable):
        raise PruningError("mask does not cover exactly the prunable tensors")
    for name, m in mask.items():
        if tuple(m.shape) != tuple(params[name].shape):
            raise PruningError(f"mask shape {m.shape} != weight shape {tuple(params[name].shape)} for {name}")


def n_to_prune(k: float, survivors: int) -> int:
    """round-half-up(k * survivors), computed exactly."""
    x = Fraction(k).limit_denominator(10**9) * survivors
    return int(x + Fraction(1, 2)) if x >= 0 else 0


def global_magnitude_prune(model: Backbone, mask: PruneMask, k: float) -> PruneMask:
    """Zero the ``k`` fraction of surviving prunable weights with the smallest
    magnitude, ranked jointly across all tensors.

    Ties at the threshold go to the earliest weight in (tensor name, flat
    index) order.  Returns a new mask; the model's weights are zeroed in place.
    """
    if not 0 <= k < 1:
        raise PruningError(f"k must lie in [0, 1), got {k}")
    _check_mask(model, mask)
    params = dict(model.named_parameters())
    names = sorted(mask)
    mags = np.concatenate([np.abs(params[n].detach().cpu().numpy().astype(np.float64)).ravel() for n in names])
    alive = np.concatenate([mask[n].ravel() for n in names]).astype(bool)
    survivors = np.flatnonzero(alive)
    n_prune = n_to_prune(k, survivors.size)

    flat = alive.astype(np.uint8)
    if n_prune:
        order = np.argsort(mags[survivors], kind="stable")
        flat[survivors[order[:n_prune]]] = 0

    new_mask, start = {}, 0
    for n in names:
        size = mask[n].size
        new_mask[n] = flat[start : start + size].reshape(mask[n].shape).copy()
        start += size
    apply_mask(model, new_mask)
    return new_mask


def sparsity_of(mask: PruneMask) -> float:
    total = sum(m.size for m in mask.values())
    if total == 0:
        return 0.0
    return sum(int(m.size - np.count_nonzero(m)) for m in mask.values()) / total


def sparsity_all(model: Backbone, mask: PruneMask) -> float:
    """Masked weights as a fraction of every parameter, biases and norms included."""
    total = sum(p.numel() for p in model.parameters())
    return sum(int(m.size - np.count_nonzero(m)) for m in mask.values()) / total


@dataclass
class PoolEntry:
    index: int
    sparsity: float  # over prunable weights
    sparsity_all: float  # over all parameters
    checkpoint: str  # relative to the pool directory
    mask: str
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    train_epochs: int = 0


@dataclass
class Pool:
    directory: Path
    entries: list[PoolEntry]
    meta: dict

    @classmethod
    def load(cls, directory: str | Path) -> "Pool":
        directory = Path(directory)
        data = read_json(directory / MANIFEST)
        entries = [PoolEntry(**e) for e in data.pop("entries")]
        return cls(directory, entries, data)

    def save(self) -> None:
        write_json(self.directory / MANIFEST, {**self.meta, "entries": [asdict(e) for e in self.entries]})

    def load_model(self, entry: PoolEntry | int) -> tuple[Backbone, PruneMask]:
        if isinstance(entry, int):
            entry = self.entries[entry]
        model, _ = load_checkpoint(self.directory / entry.checkpoint)
        arrays, _ = load_arrays(self.directory / entry.mask)
        model.eval()
        return model, {k: v.astype(np.uint8) for k, v in arrays.items()}


def pool_hash(spec: ModelSpec, schedule: Schedule, k: float, T: float, data_key) -> str:
    return config_hash({"model": asdict(spec), "schedule": asdict(schedule), "k": k, "T": T, "data": data_key})


def _persist(pool: Pool, model: Backbone, mask: PruneMask, n: int, result: TrainResult) -> PoolEntry:
    ckpt, mpath = f"entry_{n:02d}/checkpoint", f"entry_{n:02d}/mask"
    save_checkpoint(model, pool.directory / ckpt, {"entry": n, "schedule": pool.meta["schedule"], "epochs": len(result.lrs)})
    save_arrays(pool.directory / mpath, mask, {"entry": n})
    entry = PoolEntry(
        index=n,
        sparsity=sparsity_of(mask),
        sparsity_all=sparsity_all(model, mask),
        checkpoint=ckpt + ".npz",
        mask=mpath + ".npz",
        lrs=list(result.lrs),
        losses=list(result.losses),
        train_epochs=len(result.lrs),
    )
    pool.entries.append(entry)
    pool.save()
    return entry


@dataclass
class SweepStats:
    train_steps: int = 0
    trained_entries: int = 0


def lrr_sweep(
    spec: ModelSpec,
    data,
    k: float,
    T: float,
    schedule: Schedule,
    directory: str | Path,
    resume: bool = True,
    data_key=None,
    stats: SweepStats | None = None,
) -> Pool:
    """Train, then repeatedly prune-and-retrain, stopping at the first entry
    with sparsity >= T.  Each retraining continues from the current weights
    and replays the original learning-rate curve.

    Every entry is written to ``directory`` before the next iteration starts,
    so an interrupted sweep resumes from its last persisted entry.
    """
    if not 0 < k < 1:
        raise PruningError(f"k must lie in (0, 1), got {k}")
    if not 0 < T < 1:
        raise PruningError(f"T must lie in (0, 1), got {T}")
    schedule.validate()
    stats = stats if stats is not None else SweepStats()
    directory = Path(directory)
    h = pool_hash(spec, schedule, k, T, data_key)

    if resume and (directory / MANIFEST).exists():
        pool = Pool.load(directory)
        if pool.meta.get("config_hash") != h:
            raise PruningError(f"pool at {directory} was built with a different configuration")
    else:
        directory.mkdir(parents=True, exist_ok=True)
        pool = Pool(directory, [], {"config_hash": h, "model_spec": asdict(spec), "schedule": asdict(schedule),
                                    "k": k, "T": T, "lr_curve": lr_curve(schedule)})
        pool.save()

    replay = schedule.replay_epochs or schedule.epochs
    if not pool.entries:
        model = build_model(spec)
        mask = init_mask(model)
        result = train(model, data, schedule, mask=None, seed_offset=0)
        stats.train_steps += result.steps
        stats.trained_entries += 1
        e = _persist(pool, model, mask, 0, result)
        log.info("entry 0: dense, final loss %.4f", e.losses[-1])

    while pool.entries[-1].sparsity < T:
        n = len(pool.entries)
        model, mask = pool.load_model(pool.entries[-1])
        survivors = int(sum(np.count_nonzero(m) for m in mask.values()))
        if n_to_prune(k, survivors) == 0:
            log.warning("k * survivors rounds to zero at entry %d; stopping below T", n)
            break
        mask = global_magnitude_prune(model, mask, k)
        result = train(model, data, schedule, mask=mask, epochs=replay, seed_offset=n)
        stats.train_steps += result.steps
        stats.trained_entries += 1
        e = _persist(pool, model, mask, n, result)
        log.info("entry %d: sparsity %.4f, final loss %.4f", n, e.sparsity, e.losses[-1])
    return pool
