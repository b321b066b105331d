"""Two small differentiable backbones: a plain CNN and a tiny ViT.

Both expose the same surface:

* ``model(x, relu=...)`` returns logits for an ``N x C x H x W`` batch.  The
  ``relu`` argument swaps the rectifier for one call, which is how guided
  backpropagation installs its modified backward pass without touching
  shared state.
* ``model.run(x, relu=...)`` returns logits plus every recorded
  intermediate (activations, attention, tokens, keys).
* ``model.prunable`` lists the names of conv/linear weights, fixed at
  construction.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .io import load_arrays, save_arrays

FAMILIES = ("cnn", "vit")
# inputs are centred per image and channel, then scaled; the map is linear, so
# a black image still maps to zero
INPUT_SCALE = 4.0


def standardize(x: torch.Tensor) -> torch.Tensor:
    return (x - x.mean(dim=(2, 3), keepdim=True)) * INPUT_SCALE


class ModelError(ValueError):
    pass


@dataclass
class ModelSpec:
    family: str = "cnn"
    image_size: int = 32
    in_channels: int = 3
    n_classes: int = 4
    # cnn: 3x3 convs, 2x2 average pooling after the listed conv indices
    widths: tuple[int, ...] = (16, 32, 32, 64)
    pool_after: tuple[int, ...] = (0, 1)
    activation: str = "relu"  # "relu" or "linear"
    # vit
    patch_size: int = 8
    dim: int = 48
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.pool_after = tuple(self.pool_after)

    def validate(self) -> "ModelSpec":
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if self.activation not in ("relu", "linear"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.n_classes < 1:
            raise ModelError("n_classes must be positive")
        if self.family == "vit":
            if self.image_size % self.patch_size:
                raise ModelError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
            if self.dim % self.heads:
                raise ModelError("dim must be divisible by heads")
        else:
            if not self.widths:
                raise ModelError("cnn needs at least one conv layer")
            if any(i >= len(self.widths) - 1 or i < 0 for i in self.pool_after):
                raise ModelError("pooling is only allowed between conv layers")
            side = self.image_size // 2 ** len(set(self.pool_after))
            if side < 4:
                raise ModelError(f"last conv map would be {side}x{side}; need at least 4x4")
        return self

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, h, w) of the last conv map (cnn) or the patch grid (vit)."""
        if self.family == "cnn":
            side = self.image_size // 2 ** len(set(self.pool_after))
            return self.widths[-1], side, side
        g = self.image_size // self.patch_size
        return self.dim, g, g


def n_parameters(spec: ModelSpec) -> tuple[int, int]:
    """Closed-form (total, prunable) parameter counts."""
    if spec.family == "cnn":
        total = prunable = 0
        c_in = spec.in_channels
        for w in spec.widths:
            prunable += c_in * w * 9
            total += c_in * w * 9 + w
            c_in = w
        prunable += c_in * spec.n_classes
        total += c_in * spec.n_classes + spec.n_classes
        return total, prunable
    d, h = spec.dim, spec.mlp_ratio * spec.dim
    patch_in = spec.patch_size ** 2 * spec.in_channels
    prunable = patch_in * d + spec.depth * (3 * d * d + d * d + d * h + h * d) + d * spec.n_classes
    biases = d + spec.depth * (3 * d + d + h + d) + spec.n_classes
    norms = 2 * d * (2 * spec.depth + 1)
    tokens = d + (spec.n_patches + 1) * d
    return prunable + biases + norms + tokens, prunable


class Backbone(nn.Module):
    spec: ModelSpec
    prunable: tuple[str, ...]

    def _collect_prunable(self) -> None:
        names = [f"{n}.weight" for n, m in self.named_modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
        self.prunable = tuple(sorted(names))

    def forward(self, x: torch.Tensor, relu: Callable | None = None) -> torch.Tensor:
        return self.run(x, relu=relu)["logits"]

    def run(self, x: torch.Tensor, relu: Callable | None = None) -> dict:
        raise NotImplementedError


class SmallCNN(Backbone):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        chans = (spec.in_channels,) + spec.widths
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        self.head = nn.Linear(spec.widths[-1], spec.n_classes)
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        self._collect_prunable()

    def run(self, x, relu=None):
        if self.spec.activation == "linear":
            act = lambda t: t  # noqa: E731
        else:
            act = relu or F.relu
        x = standardize(x)
        acts = {}
        for i, conv in enumerate(self.convs):
            x = act(conv(x))
            acts[f"conv{i}"] = x
            if i in self.spec.pool_after:
                x = F.avg_pool2d(x, 2)
        acts["features"] = x
        logits = self.head(x.mean(dim=(2, 3)))
        return {"logits": logits, "acts": acts, "attn": [], "tokens": None, "keys": None}


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        B, T, D = x.shape
        hd = D // self.heads
        qkv = self.qkv(self.norm1(x)).reshape(B, T, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / hd ** 0.5, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.proj(y)
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        keys = k.transpose(1, 2).reshape(B, T, D)
        return x, attn, keys


class TinyViT(Backbone):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d = spec.dim
        self.patch_embed = nn.Linear(spec.patch_size ** 2 * spec.in_channels, d)
        self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, spec.n_patches + 1, d) * 0.02)
        self.blocks = nn.ModuleList(_Block(d, spec.heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, spec.n_classes)
        self._collect_prunable()

    def patchify(self, x):
        p = self.spec.patch_size
        B, C, H, W = x.shape
        x = x.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def run(self, x, relu=None):
        B = x.shape[0]
        x = standardize(x)
        t = self.patch_embed(self.patchify(x))
        t = torch.cat([self.cls_token.expand(B, -1, -1), t], dim=1) + self.pos_embed
        attn, keys = [], None
        for blk in self.blocks:
            t, a, keys = blk(t)
            attn.append(a)
        t = self.norm(t)
        logits = self.head(t[:, 0])
        return {"logits": logits, "acts": {}, "attn": attn, "tokens": t[:, 1:], "keys": keys[:, 1:]}


def build_model(spec: ModelSpec) -> Backbone:
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        model = SmallCNN(spec) if spec.family == "cnn" else TinyViT(spec)
    return model


def to_batch(images: np.ndarray, model: nn.Module | None = None) -> torch.Tensor:
    """H x W x C (or N x H x W x C) numpy images -> N x C x H x W tensor."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    dtype = next(model.parameters()).dtype if model is not None else torch.float32
    return torch.as_tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).to(dtype)


def _check_image(model: Backbone, image: np.ndarray) -> None:
    s = model.spec
    want = (s.image_size, s.image_size, s.in_channels)
    if tuple(np.shape(image)) != want:
        raise ModelError(f"image shape {np.shape(image)} does not match model input {want}")


@dataclass
class ForwardTrace:
    logits: np.ndarray
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    attention: list[np.ndarray] = field(default_factory=list)  # per block: heads x T x T
    tokens: np.ndarray | None = None  # last block patch tokens, P x d
    keys: np.ndarray | None = None  # last block patch keys, P x d


def predict_with_trace(model: Backbone, image: np.ndarray) -> ForwardTrace:
    _check_image(model, image)
    with torch.no_grad():
        out = model.run(to_batch(image, model))
    np_ = lambda t: t[0].numpy()  # noqa: E731
    return ForwardTrace(
        logits=np_(out["logits"]),
        activations={k: np_(v) for k, v in out["acts"].items()},
        attention=[np_(a) for a in out["attn"]],
        tokens=None if out["tokens"] is None else np_(out["tokens"]),
        keys=None if out["keys"] is None else np_(out["keys"]),
    )


def gradients(model: Backbone, image: np.ndarray, target_class: int, wanted: Iterable[str]) -> dict[str, np.ndarray]:
    """Gradients of the target-class logit (pre-softmax).

    ``wanted`` may contain ``"input"``, activation names from the trace
    (e.g. ``"features"``) and parameter names.  The input gradient is
    returned in H x W x C layout.
    """
    _check_image(model, image)
    wanted = list(wanted)
    if not 0 <= target_class < model.spec.n_classes:
        raise ModelError(f"target_class {target_class} out of range")
    params = dict(model.named_parameters())
    x = to_batch(image, model).requires_grad_(True)
    out = model.run(x)
    sources = {}
    for name in wanted:
        if name == "input":
            sources[name] = x
        elif name in out["acts"]:
            sources[name] = out["acts"][name]
        elif name in params:
            sources[name] = params[name]
        else:
            raise ModelError(f"unknown gradient source {name!r}")
    grads = torch.autograd.grad(out["logits"][0, target_class], list(sources.values()), allow_unused=True)
    result = {}
    for (name, src), g in zip(sources.items(), grads):
        g = torch.zeros_like(src) if g is None else g
        if name == "input":
            result[name] = g[0].permute(1, 2, 0).detach().numpy()
        elif name in out["acts"]:
            result[name] = g[0].detach().numpy()
        else:
            result[name] = g.detach().numpy()
    return result


def predict_logits(model: Backbone, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(to_batch(images[i : i + batch_size], model)).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.spec.n_classes), np.float32)


def predict_labels(model: Backbone, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
    return predict_logits(model, images, batch_size).argmax(axis=1)


def as_double(model: Backbone) -> Backbone:
    return copy.deepcopy(model).double()


def save_checkpoint(model: Backbone, path: str | Path, meta: dict | None = None) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    side = {"spec": asdict(model.spec), **(meta or {})}
    return save_arrays(path, arrays, side)


def load_checkpoint(path: str | Path) -> tuple[Backbone, dict]:
    arrays, meta = load_arrays(path)
    model = build_model(ModelSpec(**meta["spec"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model, meta
