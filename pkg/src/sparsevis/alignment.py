"""Accuracy of every pool model across the distortion catalogue."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import DISTORTION_RANGES, DistortionGrid, DistortionSpec, Sample, apply_distortion
from .models import Backbone, predict_labels

KIND_IDS = {k: i for i, k in enumerate(sorted(DISTORTION_RANGES))}


@dataclass
class AlignmentRow:
    entry: int
    sparsity: float
    kind: str
    level: float
    accuracy: float
    correct: int
    n_samples: int


def derive_seed(base: int, kind: str, sample_index: int, level_index: int) -> int:
    ss = np.random.SeedSequence([base, KIND_IDS[kind], sample_index, level_index])
    return int(ss.generate_state(1)[0])


def distorted_images(samples: Sequence[Sample], kind: str, level: float, level_index: int, seed: int = 0) -> np.ndarray:
    return np.stack([
        apply_distortion(s.image, DistortionSpec(kind, level, derive_seed(seed, kind, i, level_index)), mask=s.mask)
        for i, s in enumerate(samples)
    ])


def clean_accuracy(model: Backbone, images: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    pred = predict_labels(model, images)
    return int((pred == np.asarray(labels)).sum()), len(labels)


def distortion_accuracy_sweep(
    models: Sequence[tuple[int, float, Backbone]],
    samples: Sequence[Sample],
    grid: dict[str, list[float]] | DistortionGrid,
    seed: int = 0,
) -> list[AlignmentRow]:
    """One row per (model, kind, level).  ``models`` holds
    ``(entry index, sparsity, model)`` triples.  Each kind's identity level is
    always evaluated first, so the clean baseline is part of the output."""
    if not models:
        raise ValueError("empty pool")
    if not samples:
        raise ValueError("empty dataset")
    grid = grid if isinstance(grid, DistortionGrid) else DistortionGrid(dict(grid))
    levels = grid.normalized()
    if not levels:
        raise ValueError("empty distortion grid")
    labels = np.array([s.label for s in samples])
    rows = []
    for kind, kind_levels in levels.items():
        for li, level in enumerate(kind_levels):
            images = distorted_images(samples, kind, level, li, seed)
            for entry, sparsity, model in models:
                correct, n = clean_accuracy(model, images, labels)
                rows.append(AlignmentRow(entry, sparsity, kind, level, correct / n, correct, n))
    rows.sort(key=lambda r: (r.entry, r.kind, levels[r.kind].index(r.level)))
    return rows
