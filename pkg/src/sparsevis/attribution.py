"""Saliency maps: GradCAM, guided backpropagation, guided GradCAM, integrated
gradients and transformer attention maps.

Signed attributions (guided backprop, IG) come back as ``H x W x C`` arrays;
``reduce_to_relevance`` turns them into non-negative ``SaliencyMap``s that
the metrics consume.  Maps are scored raw; min-max scaling happens only in
``render_png``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .io import save_arrays
from .models import Backbone, ModelError, _check_image, to_batch

METHODS = ("gradcam", "guided_bp", "guided_gradcam", "ig", "attention")
POLICIES = ("clamp_negative", "absolute")


class AttributionError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W
    method: str
    target_class: int | None = None
    degenerate: bool = False
    meta: dict = field(default_factory=dict)


@dataclass
class AttributionConfig:
    methods: tuple[str, ...] = ("gradcam", "guided_gradcam", "ig")
    ig_steps: int = 64
    policy: str = "clamp_negative"
    target: str = "predicted"  # or "label"
    n_images: int | None = None  # score only the first n test images
    batch_size: int = 1024  # max rows per forward/backward pass

    def __post_init__(self):
        self.methods = tuple(self.methods)
        for m in self.methods:
            if m not in METHODS:
                raise AttributionError(f"unknown attribution method {m!r}")
        if self.policy not in POLICIES:
            raise AttributionError(f"unknown reduction policy {self.policy!r}")
        if self.target not in ("predicted", "label"):
            raise AttributionError(f"unknown target mode {self.target!r}")


class GuidedReLU(torch.autograd.Function):
    """ReLU whose backward pass also blocks negative upstream gradients."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(min=0)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        keep = (x > 0) & (grad_out >= 0)
        return grad_out * keep.to(grad_out.dtype)


guided_relu = GuidedReLU.apply


def _as_targets(targets, n: int) -> torch.Tensor:
    t = torch.as_tensor(np.broadcast_to(np.asarray(targets), (n,)).copy(), dtype=torch.long)
    return t


def _selected(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return logits.gather(1, targets[:, None]).sum()


def bilinear_upsample(maps: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """``N x h x w`` -> ``N x H x W`` (half-pixel centres, edge clamped)."""
    return F.interpolate(maps[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


def input_gradients(model: Backbone, images: np.ndarray, targets, relu: Callable | None = None) -> np.ndarray:
    """Gradients of the target logits w.r.t. a batch of ``N x H x W x C`` images."""
    x = to_batch(images, model).requires_grad_(True)
    t = _as_targets(targets, x.shape[0])
    (g,) = torch.autograd.grad(_selected(model(x, relu=relu), t), x)
    return g.permute(0, 2, 3, 1).detach().numpy()


# -------------------------------------------------------------------- GradCAM

def gradcam_from(activation: torch.Tensor, grad: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """GradCAM from ``N x C x h x w`` activations and their gradients."""
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * activation).sum(dim=1))
    return bilinear_upsample(cam, size)


def gradcam_batch(model: Backbone, images: np.ndarray, targets) -> np.ndarray:
    if model.spec.family != "cnn":
        raise AttributionError("GradCAM needs a spatial conv feature map; the vit family has none")
    x = to_batch(images, model)
    out = model.run(x)
    A = out["acts"]["features"]
    (G,) = torch.autograd.grad(_selected(out["logits"], _as_targets(targets, x.shape[0])), A)
    return gradcam_from(A.detach(), G, tuple(x.shape[2:])).detach().numpy().astype(np.float64)


def gradcam(model: Backbone, image: np.ndarray, target_class: int) -> SaliencyMap:
    _check_image(model, image)
    values = gradcam_batch(model, image[None], [target_class])[0]
    return SaliencyMap(values, "gradcam", target_class, degenerate=not values.any())


# --------------------------------------------------------- guided backprop

def guided_backprop(model: Backbone, image: np.ndarray, target_class: int) -> np.ndarray:
    """Signed H x W x C guided-backprop gradient."""
    _check_image(model, image)
    return input_gradients(model, image[None], [target_class], relu=guided_relu)[0]


def combine_guided_gradcam(cam: np.ndarray, guided: np.ndarray) -> np.ndarray:
    return np.asarray(cam, np.float64) * np.asarray(guided, np.float64)


def guided_gradcam(model: Backbone, image: np.ndarray, target_class: int, policy: str = "clamp_negative") -> SaliencyMap:
    cam = gradcam(model, image, target_class).values
    guided = reduce_to_relevance(guided_backprop(model, image, target_class), policy).values
    values = combine_guided_gradcam(cam, guided)
    return SaliencyMap(values, "guided_gradcam", target_class, degenerate=not values.any())


# ------------------------------------------------------ integrated gradients

def trapezoid_weights(steps: int) -> np.ndarray:
    w = np.full(steps + 1, 1.0 / steps)
    w[0] = w[-1] = 0.5 / steps
    return w


def integrated_gradients_tensor(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    baseline: torch.Tensor,
    steps: int,
    chunk: int = 1024,
) -> tuple[torch.Tensor, float, float]:
    """IG of a scalar-per-row function ``fn`` for one input ``x``.

    Returns (attributions, F(x) - F(baseline), completeness residual).
    """
    if steps < 1:
        raise AttributionError("IG needs at least one step")
    if x.shape != baseline.shape:
        raise AttributionError("baseline shape differs from input shape")
    alphas = torch.linspace(0, 1, steps + 1, dtype=x.dtype)
    w = torch.as_tensor(trapezoid_weights(steps), dtype=x.dtype)
    total = torch.zeros_like(x)
    ends = []
    for i in range(0, steps + 1, chunk):
        a = alphas[i : i + chunk].reshape((-1,) + (1,) * x.dim())
        path = (baseline + a * (x - baseline)).requires_grad_(True)
        f = fn(path)
        (g,) = torch.autograd.grad(f.sum(), path)
        total += (w[i : i + chunk].reshape(a.shape) * g).sum(0)
        ends.append(f.detach())
    f_all = torch.cat(ends)
    attr = (x - baseline) * total
    delta = float(f_all[-1] - f_all[0])
    return attr.detach(), delta, abs(float(attr.sum()) - delta)


def integrated_gradients_batch(
    model: Backbone, images: np.ndarray, targets, baseline: np.ndarray | None = None, steps: int = 64, chunk: int = 1024
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched IG.  Returns (N x H x W x C attributions, deltas, residuals)."""
    if steps < 1:
        raise AttributionError("IG needs at least one step")
    x = to_batch(images, model)
    b = torch.zeros_like(x) if baseline is None else to_batch(np.broadcast_to(baseline, np.shape(images)), model)
    t = _as_targets(targets, x.shape[0])
    w = torch.as_tensor(trapezoid_weights(steps), dtype=x.dtype)
    alphas = torch.linspace(0, 1, steps + 1, dtype=x.dtype)
    per = max(1, chunk // (steps + 1))
    attrs, deltas = [], []
    for i in range(0, x.shape[0], per):
        xs, bs, ts = x[i : i + per], b[i : i + per], t[i : i + per]
        n = xs.shape[0]
        a = alphas.reshape(1, -1, 1, 1, 1)
        path = (bs[:, None] + a * (xs - bs)[:, None]).reshape((-1,) + xs.shape[1:]).requires_grad_(True)
        logits = model(path)
        sel = logits.gather(1, ts.repeat_interleave(steps + 1)[:, None])[:, 0]
        (g,) = torch.autograd.grad(sel.sum(), path)
        g = g.reshape((n, steps + 1) + xs.shape[1:])
        avg = (w.reshape(1, -1, 1, 1, 1) * g).sum(1)
        attrs.append(((xs - bs) * avg).detach())
        f = sel.detach().reshape(n, steps + 1)
        deltas.append(f[:, -1] - f[:, 0])
    attr = torch.cat(attrs)
    delta = torch.cat(deltas).numpy().astype(np.float64)
    residual = np.abs(attr.sum(dim=(1, 2, 3)).numpy().astype(np.float64) - delta)
    return attr.permute(0, 2, 3, 1).numpy(), delta, residual


@dataclass
class IGResult:
    attributions: np.ndarray  # H x W x C, signed
    delta: float  # F(x) - F(baseline)
    residual: float  # |sum(attributions) - delta|
    steps: int


def integrated_gradients(
    model: Backbone, image: np.ndarray, target_class: int, baseline: np.ndarray | None = None, steps: int = 64
) -> IGResult:
    """Integrated gradients from ``baseline`` (black image by default) with
    the trapezoid rule on ``steps`` intervals."""
    _check_image(model, image)
    if baseline is not None and np.shape(baseline) != np.shape(image):
        raise AttributionError("baseline shape differs from image shape")
    attr, delta, res = integrated_gradients_batch(model, image[None], [target_class], baseline, steps)
    return IGResult(attr[0], float(delta[0]), float(res[0]), steps)


# ------------------------------------------------------------ attention maps

def attention_to_map(attn: torch.Tensor, grid: tuple[int, int], size: tuple[int, int]) -> torch.Tensor:
    """``N x heads x T x T`` last-block attention -> ``N x H x W`` class-token map.

    The class-token row is averaged over heads and renormalised over the
    patch tokens, so the grid sums to 1 before upsampling.
    """
    cls = attn[:, :, 0, 1:].mean(dim=1)
    cls = cls / cls.sum(dim=-1, keepdim=True)
    return bilinear_upsample(cls.reshape(-1, *grid), size)


def attention_batch(model: Backbone, images: np.ndarray) -> np.ndarray:
    if model.spec.family != "vit":
        raise AttributionError("attention maps need the vit family")
    x = to_batch(images, model)
    with torch.no_grad():
        attn = model.run(x)["attn"][-1]
    g = model.spec.image_size // model.spec.patch_size
    return attention_to_map(attn, (g, g), tuple(x.shape[2:])).numpy().astype(np.float64)


def attention_map(model: Backbone, image: np.ndarray) -> SaliencyMap:
    _check_image(model, image)
    values = attention_batch(model, image[None])[0]
    return SaliencyMap(values, "attention", None, degenerate=not values.any())


# ------------------------------------------------------------------ reduction

def reduce_to_relevance(signed: np.ndarray, policy: str = "clamp_negative", method: str = "", target_class=None) -> SaliencyMap:
    """Sum channels (if present), then clamp negatives or take magnitudes."""
    if policy not in POLICIES:
        raise AttributionError(f"unknown reduction policy {policy!r}")
    a = np.asarray(signed, dtype=np.float64)
    if a.ndim == 3:
        a = a.sum(axis=2)
    values = np.maximum(a, 0.0) if policy == "clamp_negative" else np.abs(a)
    return SaliencyMap(values, method, target_class, degenerate=not values.any())


def _reduce_batch(signed: np.ndarray, policy: str) -> np.ndarray:
    a = signed.astype(np.float64).sum(axis=-1)
    return np.maximum(a, 0.0) if policy == "clamp_negative" else np.abs(a)


def attribute_batch(model: Backbone, images: np.ndarray, method: str, targets, cfg: AttributionConfig) -> tuple[np.ndarray, dict]:
    """Non-negative ``N x H x W`` relevance maps for one method."""
    n = len(images)
    bs = max(1, cfg.batch_size // (cfg.ig_steps + 1)) if method == "ig" else cfg.batch_size
    maps, extra = [], {"residual": [], "delta": []}
    for i in range(0, n, bs):
        im, tg = images[i : i + bs], np.asarray(targets)[i : i + bs]
        if method == "gradcam":
            maps.append(gradcam_batch(model, im, tg))
        elif method == "guided_bp":
            maps.append(_reduce_batch(input_gradients(model, im, tg, relu=guided_relu), cfg.policy))
        elif method == "guided_gradcam":
            cam = gradcam_batch(model, im, tg)
            maps.append(cam * _reduce_batch(input_gradients(model, im, tg, relu=guided_relu), cfg.policy))
        elif method == "ig":
            attr, delta, res = integrated_gradients_batch(model, im, tg, steps=cfg.ig_steps, chunk=cfg.batch_size)
            maps.append(_reduce_batch(attr, cfg.policy))
            extra["residual"].extend(res.tolist())
            extra["delta"].extend(delta.tolist())
        elif method == "attention":
            maps.append(attention_batch(model, im))
        else:
            raise AttributionError(f"unknown attribution method {method!r}")
    return np.concatenate(maps), extra


def attribute(model: Backbone, image: np.ndarray, method: str, target_class: int, cfg: AttributionConfig | None = None) -> SaliencyMap:
    cfg = cfg or AttributionConfig()
    _check_image(model, image)
    if not 0 <= target_class < model.spec.n_classes:
        raise ModelError(f"target_class {target_class} out of range")
    values, extra = attribute_batch(model, image[None], method, [target_class], cfg)
    meta = {k: v[0] for k, v in extra.items() if v}
    return SaliencyMap(values[0], method, None if method == "attention" else target_class, not values[0].any(), meta)


def save_saliency(smap: SaliencyMap, path: str | Path, meta: dict | None = None) -> Path:
    side = {"method": smap.method, "target_class": smap.target_class, "degenerate": smap.degenerate, **smap.meta, **(meta or {})}
    return save_arrays(path, {"values": smap.values.astype(np.float32)}, side)


def render_png(smap: SaliencyMap, path: str | Path, image: np.ndarray | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    v = smap.values
    span = v.max() - v.min()
    v = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    fig, axes = plt.subplots(1, 2 if image is not None else 1, figsize=(6 if image is not None else 3, 3))
    axes = np.atleast_1d(axes)
    if image is not None:
        axes[0].imshow(image)
        axes[0].set_axis_off()
    axes[-1].imshow(v, cmap="inferno")
    axes[-1].set_title(smap.method)
    axes[-1].set_axis_off()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def targets_for(model: Backbone, images: np.ndarray, labels: Sequence[int], mode: str) -> np.ndarray:
    from .models import predict_labels

    return np.asarray(labels) if mode == "label" else predict_labels(model, images)
