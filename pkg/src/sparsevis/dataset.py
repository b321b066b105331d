"""Procedural shapes dataset and parametric image distortions.

Every sample is a single solid-coloured shape drawn on a (optionally
textured) background.  Masks are rasterised at pixel centres without
anti-aliasing, so the segmentation mask and the bounding box are exact by
construction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import load_arrays, save_arrays

SHAPE_CLASSES = ("circle", "square", "triangle", "cross")
MIN_IMAGE_SIZE = 16


class ConfigError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    label: int
    mask: np.ndarray  # H x W, bool
    box: tuple[int, int, int, int]  # xmin, ymin, xmax, ymax, half-open


@dataclass
class DatasetSpec:
    n_samples: int
    image_size: int = 32
    shape_classes: tuple[str, ...] = SHAPE_CLASSES
    texture_background: bool = True
    seed: int = 0

    def __post_init__(self):
        self.shape_classes = tuple(self.shape_classes)


def mask_to_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        h = 0.8 * r
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if kind == "triangle":
        # equilateral, circumradius r: three half-planes at distance r/2
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * np.pi * k / 3 + np.pi / 2
            inside &= np.cos(a) * u + np.sin(a) * v <= r / 2
        return inside
    if kind == "cross":
        arm = r / 3
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(u) <= arm) & (np.abs(v) <= r))
    raise ConfigError(f"unknown shape class {kind!r}")


def _background(rng: np.random.Generator, size: int, textured: bool) -> np.ndarray:
    c0 = rng.uniform(0.0, 0.5, size=3)
    if not textured:
        return np.broadcast_to(c0, (size, size, 3)).copy()
    c1 = np.clip(c0 + rng.uniform(-0.35, 0.35, size=3), 0, 1)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.zeros((size, size))
    for _ in range(2):
        freq = rng.uniform(0.15, 0.6)
        ang = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        t += np.sin(freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
    t = (t - t.min()) / (np.ptp(t) + 1e-12)
    img = (1 - t)[..., None] * c0 + t[..., None] * c1
    img += rng.normal(0, 0.06, size=img.shape)
    return np.clip(img, 0, 1)


def _make_sample(spec: DatasetSpec, index: int) -> Sample:
    size = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    label = index % len(spec.shape_classes)
    kind = spec.shape_classes[label]

    bg = _background(rng, size, spec.texture_background)
    r = rng.uniform(0.15, 0.3) * size
    cx = rng.uniform(r + 1, size - r - 1)
    cy = rng.uniform(r + 1, size - r - 1)
    theta = rng.uniform(0, 2 * np.pi) if kind != "circle" else 0.0
    mask = _shape_mask(kind, size, cx, cy, r, theta)

    # shapes are brighter than the background so edge polarity is consistent
    colour = rng.uniform(0.5, 1.0, size=3)
    img = np.where(mask[..., None], colour, bg).astype(np.float32)
    return Sample(image=img, label=label, mask=mask, box=mask_to_box(mask))


def generate_shapes_dataset(spec: DatasetSpec) -> list[Sample]:
    """Deterministic list of samples; labels cycle through the classes so the
    class counts differ by at most one."""
    if spec.n_samples < 0:
        raise ConfigError("n_samples must be >= 0")
    if spec.image_size < MIN_IMAGE_SIZE:
        raise ConfigError(f"image_size {spec.image_size} < {MIN_IMAGE_SIZE}: no room for the minimum shape")
    if len(spec.shape_classes) < 2:
        raise ConfigError("need at least two shape classes")
    for kind in spec.shape_classes:
        if kind not in SHAPE_CLASSES:
            raise ConfigError(f"unknown shape class {kind!r}")
    return [_make_sample(spec, i) for i in range(spec.n_samples)]


def stack(samples: list[Sample]) -> dict[str, np.ndarray]:
    if not samples:
        raise ValueError("empty dataset")
    return {
        "images": np.stack([s.image for s in samples]).astype(np.float32),
        "labels": np.array([s.label for s in samples], dtype=np.int32),
        "masks": np.stack([s.mask for s in samples]).astype(np.int32),
        "boxes": np.array([s.box for s in samples], dtype=np.int32),
    }


def save_dataset(samples: list[Sample], spec: DatasetSpec, directory: str | Path, split: str) -> Path:
    if samples:
        arrays = stack(samples)
    else:
        s = spec.image_size
        arrays = {
            "images": np.zeros((0, s, s, 3), np.float32),
            "labels": np.zeros(0, np.int32),
            "masks": np.zeros((0, s, s), np.int32),
            "boxes": np.zeros((0, 4), np.int32),
        }
    return save_arrays(Path(directory) / split, arrays, {"spec": asdict(spec), "seed": spec.seed, "split": split})


def load_dataset(directory: str | Path, split: str) -> tuple[list[Sample], DatasetSpec]:
    arrays, meta = load_arrays(Path(directory) / split)
    spec = DatasetSpec(**meta["spec"])
    samples = [
        Sample(image=img, label=int(lab), mask=m.astype(bool), box=tuple(int(v) for v in b))
        for img, lab, m, b in zip(arrays["images"], arrays["labels"], arrays["masks"], arrays["boxes"])
    ]
    return samples, spec


# ---------------------------------------------------------------- distortions

# kind -> (min level, max level, identity level)
DISTORTION_RANGES: dict[str, tuple[float, float, float]] = {
    "greyscale": (0.0, 1.0, 0.0),  # blend fraction towards luminance
    "false_colour": (0.0, 1.0, 0.0),  # blend fraction towards opponent colours
    "contrast": (0.0, 2.0, 1.0),  # factor c in 0.5 + c (p - 0.5)
    "uniform_noise": (0.0, 100.0, 0.0),  # noise half-width
    "low_pass": (0.0, 10.0, 0.0),  # Gaussian sigma in pixels
    "high_pass": (0.0, 10.0, 0.0),  # Gaussian sigma; 0 disables the filter
    "rotation": (-180.0, 180.0, 0.0),  # degrees, counter-clockwise
    "silhouette": (0.0, 1.0, 0.0),  # blend fraction towards the silhouette
    "edge": (0.0, 1.0, 0.0),  # blend fraction towards the binarised edge map
}
EDGE_THRESHOLD = 0.2
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: float
    seed: int = 0


def identity_level(kind: str) -> float:
    if kind not in DISTORTION_RANGES:
        raise ConfigError(f"unknown distortion kind {kind!r}")
    return DISTORTION_RANGES[kind][2]


def _blend(p: np.ndarray, target: np.ndarray, a: float) -> np.ndarray:
    return (1.0 - a) * p + a * target


def apply_distortion(image: np.ndarray, d: DistortionSpec, mask: np.ndarray | None = None) -> np.ndarray:
    """Distort an H x W x 3 image in [0, 1].

    ``silhouette`` needs the foreground ``mask``; every other kind ignores it.
    Arithmetic runs in float64 and the result is cast back to float32.
    """
    if d.kind not in DISTORTION_RANGES:
        raise ConfigError(f"unknown distortion kind {d.kind!r}")
    lo, hi, ident = DISTORTION_RANGES[d.kind]
    if not lo <= d.level <= hi:
        raise ConfigError(f"{d.kind} level {d.level} outside [{lo}, {hi}]")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    if d.level == ident:
        return np.array(image, dtype=np.float32, copy=True)

    p = image.astype(np.float64)
    a = float(d.level)
    if d.kind == "greyscale":
        out = _blend(p, (p @ _LUMA)[..., None], a)
    elif d.kind == "false_colour":
        lum = (p @ _LUMA)[..., None]
        out = _blend(p, 2.0 * lum - p, a)
    elif d.kind == "contrast":
        out = 0.5 + a * (p - 0.5)
    elif d.kind == "uniform_noise":
        rng = np.random.default_rng(d.seed)
        out = p + rng.uniform(-a, a, size=p.shape)
    elif d.kind == "low_pass":
        out = ndimage.gaussian_filter(p, sigma=(a, a, 0), mode="reflect")
    elif d.kind == "high_pass":
        out = p - ndimage.gaussian_filter(p, sigma=(a, a, 0), mode="reflect") + 0.5
    elif d.kind == "rotation":
        out = ndimage.rotate(p, a, axes=(1, 0), reshape=False, order=1, mode="nearest")
    elif d.kind == "silhouette":
        if mask is None:
            raise ValueError("silhouette distortion needs the foreground mask")
        sil = np.where(np.asarray(mask, bool), 0.0, 1.0)[..., None]
        out = _blend(p, np.broadcast_to(sil, p.shape), a)
    else:  # edge
        lum = p @ _LUMA
        mag = np.hypot(ndimage.sobel(lum, axis=0), ndimage.sobel(lum, axis=1))
        if mag.max() > 0:
            mag = mag / mag.max()
        edges = np.where(mag > EDGE_THRESHOLD, 0.0, 1.0)[..., None]
        out = _blend(p, np.broadcast_to(edges, p.shape), a)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class DistortionGrid:
    levels: dict[str, list[float]] = field(default_factory=dict)

    def normalized(self) -> dict[str, list[float]]:
        """Validated grid with each kind's identity level first."""
        out = {}
        for kind, levels in self.levels.items():
            ident = identity_level(kind)
            lo, hi, _ = DISTORTION_RANGES[kind]
            vals = [float(v) for v in levels]
            for v in vals:
                if not lo <= v <= hi:
                    raise ConfigError(f"{kind} level {v} outside [{lo}, {hi}]")
            rest = [v for v in dict.fromkeys(vals) if v != ident]
            out[kind] = [ident] + rest
        return out
