"""Relevance Mass Accuracy and Relevance Rank Accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import SaliencyMap


class MetricError(ValueError):
    pass


class DegenerateMapError(MetricError):
    """The map carries no relevance at all, so the mass ratio is undefined."""


@dataclass
class RelevanceScore:
    rma: float | None
    rra: float
    k_used: int
    degenerate: bool


def _prepare(saliency, mask) -> tuple[np.ndarray, np.ndarray]:
    values = saliency.values if isinstance(saliency, SaliencyMap) else saliency
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape:
        raise MetricError(f"saliency shape {values.shape} != mask shape {mask.shape}")
    if not mask.any():
        raise MetricError("ground-truth mask is empty")
    return values, mask


def rma(saliency, mask) -> float:
    """Share of the total relevance that falls inside the mask."""
    values, mask = _prepare(saliency, mask)
    if np.any(values < 0):
        raise MetricError("relevance must be non-negative; reduce the map first")
    total = values.sum()
    if total == 0:
        raise DegenerateMapError("total relevance is zero")
    return float(values[mask].sum() / total)


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest values; ties go to the lower flat index."""
    return np.argsort(-values.ravel(), kind="stable")[:k]


def rra(saliency, mask) -> float:
    """Fraction of the |GT| highest-relevance pixels that lie inside the mask."""
    values, mask = _prepare(saliency, mask)
    k = int(mask.sum())
    top = top_k_indices(values, k)
    return float(mask.ravel()[top].sum() / k)


def score(saliency, mask) -> RelevanceScore:
    values, m = _prepare(saliency, mask)
    try:
        mass = rma(values, m)
        degenerate = False
    except DegenerateMapError:
        mass, degenerate = None, True
    return RelevanceScore(rma=mass, rra=rra(values, m), k_used=int(m.sum()), degenerate=degenerate)


@dataclass
class Aggregate:
    mean: float
    std: float
    n: int
    degenerate: int


def aggregate(scores, degenerate: int = 0) -> Aggregate:
    """Mean and population std over defined scores; ``None`` entries count as
    degenerate and are left out of the mean."""
    vals = [s for s in scores if s is not None]
    degenerate += sum(1 for s in scores if s is None)
    if not vals:
        return Aggregate(float("nan"), float("nan"), 0, degenerate)
    a = np.asarray(vals, dtype=np.float64)
    return Aggregate(float(a.mean()), float(a.std()), len(vals), degenerate)


def score_maps(maps: np.ndarray, masks: np.ndarray) -> dict[str, Aggregate]:
    """Aggregate RMA and RRA over a stack of ``N x H x W`` maps.

    Degenerate (all-zero) maps are excluded from both metrics and counted.
    """
    if len(maps) == 0:
        raise MetricError("empty dataset")
    rmas, rras, degenerate = [], [], 0
    for m, gt in zip(maps, masks):
        s = score(m, gt)
        if s.degenerate:
            degenerate += 1
            continue
        rmas.append(s.rma)
        rras.append(s.rra)
    return {"rma": aggregate(rmas, degenerate), "rra": aggregate(rras, degenerate)}


def score_dataset(model, samples, methods, cfg=None) -> list[dict]:
    """Score every method on ``samples`` with one model.

    Returns rows ``{method, metric, mean, std, n, degenerate}``.
    """
    from .attribution import AttributionConfig, attribute_batch, targets_for
    from .dataset import stack

    if not samples:
        raise MetricError("empty dataset")
    cfg = cfg or AttributionConfig()
    data = stack(samples)
    targets = targets_for(model, data["images"], data["labels"], cfg.target)
    rows = []
    for method in methods:
        maps, _ = attribute_batch(model, data["images"], method, targets, cfg)
        for metric, agg in score_maps(maps, data["masks"].astype(bool)).items():
            rows.append({"method": method, "metric": metric, "mean": agg.mean, "std": agg.std, "n": agg.n, "degenerate": agg.degenerate})
    return rows
