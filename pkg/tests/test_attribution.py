import numpy as np
import pytest
import torch

from conftest import TINY_CNN, TINY_VIT
from sparsevis.attribution import (
    AttributionConfig,
    AttributionError,
    GuidedReLU,
    attention_map,
    attention_to_map,
    attribute,
    attribute_batch,
    combine_guided_gradcam,
    gradcam,
    gradcam_from,
    guided_backprop,
    guided_gradcam,
    guided_relu,
    integrated_gradients,
    integrated_gradients_tensor,
    reduce_to_relevance,
    save_saliency,
    render_png,
)
from sparsevis.io import load_arrays
from sparsevis.models import ModelSpec, as_double, build_model, gradients, predict_with_trace

LINEAR = ModelSpec(widths=(4, 8), pool_after=(0,), activation="linear", seed=2)


def bilinear_oracle(a: np.ndarray, H: int, W: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping, written out."""
    h, w = a.shape
    out = np.zeros((H, W))
    for i in range(H):
        sy = max((i + 0.5) * h / H - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(W):
            sx = max((j + 0.5) * w / W - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
                         + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))
    return out


def gradcam_oracle(model, image, target):
    A = predict_with_trace(model, image).activations["features"]
    G = gradients(model, image, target, ["features"])["features"]
    cam = np.zeros(A.shape[1:])
    for c in range(A.shape[0]):
        cam += G[c].mean() * A[c]
    return bilinear_oracle(np.maximum(cam, 0), *image.shape[:2])


@pytest.fixture
def image(rng):
    return rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)


# ---------------------------------------------------------------- GradCAM

def test_gradcam_shape_and_sign(image):
    m = gradcam(build_model(TINY_CNN), image, 1)
    assert m.values.shape == (32, 32) and m.values.min() >= 0


def test_gradcam_unit_gradient_is_upsampled_activation(rng):
    A = torch.as_tensor(rng.uniform(0, 1, (1, 1, 4, 4)))
    cam = gradcam_from(A, torch.ones_like(A), (32, 32))[0].numpy()
    np.testing.assert_allclose(cam, bilinear_oracle(A[0, 0].numpy(), 32, 32), atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcam_matches_direct_formula(seed, rng):
    model = build_model(ModelSpec(widths=(4, 8), pool_after=(0,), seed=seed))
    x = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    np.testing.assert_allclose(gradcam(model, x, 2).values, gradcam_oracle(model, x, 2), atol=1e-6)


def test_gradcam_needs_conv_map(image):
    with pytest.raises(AttributionError):
        gradcam(build_model(TINY_VIT), image, 0)


# ---------------------------------------------------------- guided backprop

def test_guided_equals_plain_without_relus(image):
    model = build_model(LINEAR)
    np.testing.assert_allclose(guided_backprop(model, image, 0), gradients(model, image, 0, ["input"])["input"], atol=1e-7)


def test_guided_hand_example():
    x = torch.tensor([1.0, -1.0], requires_grad=True)
    guided_relu(x).sum().backward()
    assert x.grad.tolist() == [1.0, 0.0]


def test_guided_blocks_negative_upstream(rng):
    x = torch.as_tensor(rng.normal(size=200), dtype=torch.float64)
    up = torch.as_tensor(rng.normal(size=200), dtype=torch.float64)
    xg = x.clone().requires_grad_(True)
    GuidedReLU.apply(xg).backward(up)
    g = xg.grad.numpy()
    assert np.all(g[(up < 0).numpy() | (x <= 0).numpy()] == 0)
    keep = (up >= 0).numpy() & (x > 0).numpy()
    np.testing.assert_array_equal(g[keep], up.numpy()[keep])


def test_guided_gradcam_product_rules(image):
    model = build_model(TINY_CNN)
    gg = guided_gradcam(model, image, 1).values
    cam = gradcam(model, image, 1).values
    assert np.all(gg[cam == 0] == 0)
    guided = reduce_to_relevance(guided_backprop(model, image, 1)).values
    np.testing.assert_array_equal(combine_guided_gradcam(np.ones_like(cam), guided), guided)


def test_guided_gradcam_hand_example():
    out = combine_guided_gradcam(np.array([[1, 0], [0.5, 1]]), np.array([[2, 3], [4, 0]]))
    np.testing.assert_array_equal(out, [[2, 0], [2, 0]])


# ---------------------------------------------------- integrated gradients

def test_ig_linear_hand_example():
    w = torch.tensor([2.0, -1.0], dtype=torch.float64)
    x = torch.tensor([1.0, 3.0], dtype=torch.float64)
    attr, delta, res = integrated_gradients_tensor(lambda p: p @ w, x, torch.zeros(2, dtype=torch.float64), 8)
    assert attr.tolist() == [2.0, -3.0]
    assert attr.sum().item() == delta == -1.0 and res == 0


def test_ig_zero_path(image):
    r = integrated_gradients(build_model(TINY_CNN), image, 0, baseline=image.copy(), steps=4)
    assert not np.any(r.attributions)


@pytest.mark.parametrize("steps", [1, 3, 64])
def test_ig_affine_backbone_exact(steps, rng):
    """A backbone without nonlinearities is affine in its input."""
    model = as_double(build_model(LINEAR))
    x, b = rng.uniform(0, 1, (32, 32, 3)), rng.uniform(0, 1, (32, 32, 3))
    w = gradients(model, x, 1, ["input"])["input"]
    r = integrated_gradients(model, x, 1, baseline=b, steps=steps)
    np.testing.assert_allclose(r.attributions, (x - b) * w, atol=1e-10)
    assert r.residual <= 1e-9


def test_ig_rejects_bad_steps(image):
    with pytest.raises(AttributionError):
        integrated_gradients(build_model(TINY_CNN), image, 0, steps=0)


def test_ig_completeness_improves_with_steps(trained_cnn, small_data):
    x = small_data[0].image
    coarse = integrated_gradients(trained_cnn, x, 0, steps=2).residual
    fine = integrated_gradients(trained_cnn, x, 0, steps=128).residual
    assert fine <= coarse + 1e-6


# ------------------------------------------------------------ attention

def test_attention_map_properties(image):
    model = build_model(TINY_VIT)
    m = attention_map(model, image)
    assert m.values.shape == (32, 32) and m.values.min() >= 0
    attn = torch.as_tensor(predict_with_trace(model, image).attention[-1])[None]
    grid = attention_to_map(attn, (4, 4), (4, 4))
    assert abs(grid.sum().item() - 1) <= 1e-6


def test_uniform_attention_constant_map():
    attn = torch.full((1, 2, 17, 17), 1 / 17)
    m = attention_to_map(attn, (4, 4), (32, 32))
    assert torch.allclose(m, torch.full_like(m, 1 / 16))


def test_attention_needs_vit(image):
    with pytest.raises(AttributionError):
        attention_map(build_model(TINY_CNN), image)


# ------------------------------------------------------------- reduction

def test_channel_sum():
    signed = np.zeros((2, 2, 3))
    signed[0, 1] = 0.7
    assert reduce_to_relevance(signed).values[0, 1] == pytest.approx(2.1)


def test_all_negative_is_degenerate():
    m = reduce_to_relevance(-np.ones((3, 3)), "clamp_negative")
    assert m.degenerate and not m.values.any()


def test_absolute_policy():
    np.testing.assert_array_equal(reduce_to_relevance(np.array([[-2.0, 1.0]]), "absolute").values, [[2, 1]])


def test_unknown_policy_and_method(image):
    with pytest.raises(AttributionError):
        reduce_to_relevance(np.ones((2, 2)), "square")
    with pytest.raises(AttributionError):
        AttributionConfig(methods=("lime",))


# -------------------------------------------------------------- dispatch

@pytest.mark.parametrize("method", ["gradcam", "guided_bp", "guided_gradcam", "ig"])
def test_batch_matches_single(method, trained_cnn, small_data):
    cfg = AttributionConfig(ig_steps=8)
    images = np.stack([s.image for s in small_data[:3]])
    maps, _ = attribute_batch(trained_cnn, images, method, [0, 1, 2], cfg)
    for i in range(3):
        single = attribute(trained_cnn, images[i], method, i, cfg).values
        np.testing.assert_allclose(maps[i], single, rtol=1e-5, atol=1e-7)
        assert maps[i].min() >= 0


def test_save_and_render(tmp_path, image):
    m = gradcam(build_model(TINY_CNN), image, 0)
    save_saliency(m, tmp_path / "s", {"image": 3})
    arrays, meta = load_arrays(tmp_path / "s")
    np.testing.assert_allclose(arrays["values"], m.values.astype(np.float32))
    assert meta["method"] == "gradcam" and meta["image"] == 3
    assert render_png(m, tmp_path / "s.png", image).stat().st_size > 0
