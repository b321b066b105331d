"""Unsupervised single-object localisation from patch features (LOST) and
box scoring.

Boxes are ``(xmin, ymin, xmax, ymax)`` in pixels, half-open.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .models import Backbone, to_batch

Box = tuple[int, int, int, int]


class DiscoveryError(ValueError):
    pass


@dataclass
class ODConfig:
    center: bool = True  # subtract the per-image mean patch feature
    normalize: bool = False  # L2-normalise rows (after centring)
    seed_features: str = "mean"  # "mean" of the expanded set, or "seed"
    threshold: float = 0.5
    n_images: int | None = None


@dataclass
class PatchFeatures:
    features: np.ndarray  # P x d, row-major over the patch grid
    grid: tuple[int, int]
    patch_size: int
    layer: str

    def __post_init__(self):
        if self.features.shape[0] != self.grid[0] * self.grid[1]:
            raise DiscoveryError(f"{self.features.shape[0]} rows do not match grid {self.grid}")


def _raw_features(model: Backbone, images: np.ndarray) -> tuple[np.ndarray, tuple[int, int], int, str]:
    spec = model.spec
    with torch.no_grad():
        out = model.run(to_batch(images, model))
    if spec.family == "cnn":
        fmap = out["acts"]["features"].numpy()  # N x C x h x w
        n, c, h, w = fmap.shape
        feats = fmap.transpose(0, 2, 3, 1).reshape(n, h * w, c)
        return feats, (h, w), spec.image_size // h, "features"
    if spec.family == "vit":
        g = spec.image_size // spec.patch_size
        return out["keys"].numpy(), (g, g), spec.patch_size, "keys"
    raise DiscoveryError(f"unsupported family {spec.family!r}")


def _postprocess(f: np.ndarray, cfg: ODConfig) -> np.ndarray:
    f = f.astype(np.float64)
    if cfg.center:
        f = f - f.mean(axis=-2, keepdims=True)
    if cfg.normalize:
        norms = np.linalg.norm(f, axis=-1, keepdims=True)
        f = f / np.where(norms > 0, norms, 1.0)
    return f


def patch_features(model: Backbone, image: np.ndarray, cfg: ODConfig | None = None) -> PatchFeatures:
    cfg = cfg or ODConfig()
    feats, grid, ps, layer = _raw_features(model, image[None])
    return PatchFeatures(_postprocess(feats[0], cfg), grid, ps, layer)


def similarity_graph(f: PatchFeatures | np.ndarray) -> np.ndarray:
    x = np.asarray(f.features if isinstance(f, PatchFeatures) else f, dtype=np.float64)
    if x.shape[0] < 2:
        raise DiscoveryError("need at least two patches")
    sim = x @ x.T
    return 0.5 * (sim + sim.T)


def positive_degrees(sim: np.ndarray) -> np.ndarray:
    pos = sim > 0
    np.fill_diagonal(pos, False)
    return pos.sum(axis=1)


def select_seed(sim: np.ndarray) -> int:
    """Patch with the fewest positive correlations to other patches
    (lowest index on ties)."""
    return int(np.argmin(positive_degrees(sim)))


def expand_seed(sim: np.ndarray, seed: int) -> np.ndarray:
    keep = sim[seed] > 0
    keep[seed] = True
    return np.flatnonzero(keep)


def patch_box(rows: np.ndarray, cols: np.ndarray, patch_size: int, image_hw: tuple[int, int]) -> Box:
    h, w = image_hw
    return (
        int(cols.min()) * patch_size,
        int(rows.min()) * patch_size,
        min(w, (int(cols.max()) + 1) * patch_size),
        min(h, (int(rows.max()) + 1) * patch_size),
    )


def extract_box(
    f: PatchFeatures, expanded, seed: int, image_hw: tuple[int, int], seed_features: str = "mean"
) -> tuple[Box, np.ndarray]:
    """Box around the 4-connected component (containing the seed) of patches
    whose features correlate positively with the seed features.

    Returns the box and the component as a boolean patch grid.
    """
    expanded = np.asarray(expanded)
    if expanded.size == 0:
        raise DiscoveryError("expanded set is empty")
    x = np.asarray(f.features, dtype=np.float64)
    s = x[expanded].mean(axis=0) if seed_features == "mean" else x[seed]
    grid_mask = (x @ s > 0).reshape(f.grid)
    r0, c0 = divmod(int(seed), f.grid[1])
    grid_mask[r0, c0] = True
    labels, _ = ndimage.label(grid_mask)  # default structure is 4-connectivity
    comp = labels == labels[r0, c0]
    rows, cols = np.nonzero(comp)
    return patch_box(rows, cols, f.patch_size, image_hw), comp


@dataclass
class LostResult:
    seed: int
    expanded: np.ndarray
    box: Box


def lost(f: PatchFeatures, image_hw: tuple[int, int], seed_features: str = "mean") -> LostResult:
    sim = similarity_graph(f)
    seed = select_seed(sim)
    expanded = expand_seed(sim, seed)
    box, _ = extract_box(f, expanded, seed, image_hw, seed_features)
    return LostResult(seed, expanded, box)


def iou(a: Box, b: Box) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def corloc(ious, threshold: float = 0.5) -> dict:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise DiscoveryError("empty dataset")
    return {
        "mean_iou": float(ious.mean()),
        "std_iou": float(ious.std()),
        "corloc_at_threshold": float((ious >= threshold).mean()),
        "corloc_std": float((ious >= threshold).std()),
        "n": int(ious.size),
    }


def corloc_dataset(model: Backbone, samples, cfg: ODConfig | None = None, dump: str | Path | None = None, batch_size: int = 250) -> dict:
    """Run LOST on every sample and score its box against the ground truth.

    Reports the mean per-image IoU and the fraction of images with
    IoU >= threshold.  ``dump`` writes one JSON line per image.
    """
    cfg = cfg or ODConfig()
    if not samples:
        raise DiscoveryError("empty dataset")
    images = np.stack([s.image for s in samples])
    hw = images.shape[1:3]
    boxes, ious = [], []
    for i in range(0, len(images), batch_size):
        feats, grid, ps, layer = _raw_features(model, images[i : i + batch_size])
        feats = _postprocess(feats, cfg)
        for fi in feats:
            res = lost(PatchFeatures(fi, grid, ps, layer), hw, cfg.seed_features)
            boxes.append(res.box)
    for s, b in zip(samples, boxes):
        ious.append(iou(b, s.box))
    out = corloc(ious, cfg.threshold)
    if dump is not None:
        dump = Path(dump)
        dump.parent.mkdir(parents=True, exist_ok=True)
        with dump.open("w") as fh:
            for idx, (b, v) in enumerate(zip(boxes, ious)):
                fh.write(json.dumps({"image": idx, "box": list(b), "iou": v}) + "\n")
    out["ious"] = ious
    out["boxes"] = boxes
    return out
