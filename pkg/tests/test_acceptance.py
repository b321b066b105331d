"""Acceptance checks 1-8.  A summary line per criterion is printed at the end
of the pytest run (see ``conftest.py``)."""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from sparsevis.attribution import integrated_gradients_batch, integrated_gradients_tensor
from sparsevis.config import load_config
from sparsevis.dataset import DatasetSpec, generate_shapes_dataset, load_dataset
from sparsevis.discovery import PatchFeatures, iou, lost
from sparsevis.harness import run_sweep
from sparsevis.metrics import rma, rra
from sparsevis.models import ModelSpec, as_double, build_model, gradients, predict_labels
from sparsevis.pruning import Pool, lrr_sweep
from sparsevis.training import Schedule, lr_curve

DESK = Path(__file__).resolve().parents[1] / "scripts" / "configs" / "desk.yaml"
TIME_LIMIT = 30 * 60


# ------------------------------------------------------------------ helpers

def rma_loop(s, m):
    inside = total = 0.0
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            total += s[i, j]
            inside += s[i, j] if m[i, j] else 0.0
    return inside / total


def rra_loop(s, m):
    """Select the top |GT| pixels by repeated max search (lowest index on ties)."""
    flat, gt = list(s.ravel()), list(m.ravel())
    k = sum(gt)
    taken = []
    for _ in range(k):
        best = None
        for idx, v in enumerate(flat):
            if idx in taken:
                continue
            if best is None or v > flat[best]:
                best = idx
        taken.append(best)
    return sum(gt[i] for i in taken) / k


def iou_enumerate(a, b):
    pa = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    pb = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    union = len(pa | pb)
    return len(pa & pb) / union if union else 0.0


def random_box(rng, size=20):
    x0, x1 = sorted(rng.choice(size + 1, 2, replace=False))
    y0, y1 = sorted(rng.choice(size + 1, 2, replace=False))
    return int(x0), int(y0), int(x1), int(y1)


# ------------------------------------------------------- shared desk sweep

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_a")
    cfg = load_config(DESK, output_dir=str(out))
    t0 = time.perf_counter()
    result = run_sweep(cfg)
    elapsed = time.perf_counter() - t0
    pool = Pool.load(out / "pool")
    test, _ = load_dataset(out / "data", "test")
    return {"cfg": cfg, "result": result, "elapsed": elapsed, "pool": pool, "test": test, "out": out}


@pytest.fixture(scope="module")
def dense(desk):
    model, _ = desk["pool"].load_model(0)
    return model


# ---------------------------------------------------------------- criterion 1

@pytest.mark.criterion(1)
def test_c1_metric_and_iou_oracles():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    for _ in range(1000):
        s = rng.uniform(0, 1, (8, 8))
        if rng.uniform() < 0.3:
            s = np.round(s * 4) / 4  # plenty of ties
        m = rng.uniform(size=(8, 8)) < rng.uniform(0.05, 0.95)
        if not m.any():
            m[rng.integers(8), rng.integers(8)] = True
        if s.sum() > 0:
            assert abs(rma(s, m) - rma_loop(s, m)) <= 1e-12
        assert abs(rra(s, m) - rra_loop(s, m)) <= 1e-12
    for _ in range(1000):
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == iou_enumerate(a, b)
    assert time.perf_counter() - t0 < 10


# ---------------------------------------------------------------- criterion 2

@pytest.mark.criterion(2)
@pytest.mark.parametrize("steps", [1, 2, 7, 32, 128])
def test_c2_ig_exact_on_affine_model(steps):
    rng = np.random.default_rng(steps)
    w = torch.as_tensor(rng.normal(size=50))
    c = float(rng.normal())
    x, b = torch.as_tensor(rng.normal(size=50)), torch.as_tensor(rng.normal(size=50))
    attr, _, _ = integrated_gradients_tensor(lambda p: p @ w + c, x, b, steps)
    np.testing.assert_allclose(attr.numpy(), ((x - b) * w).numpy(), atol=1e-6, rtol=0)

    model = as_double(build_model(ModelSpec(widths=(4, 8), pool_after=(0,), activation="linear", seed=steps)))
    img, base = rng.uniform(0, 1, (2, 32, 32, 3)), rng.uniform(0, 1, (2, 32, 32, 3))
    grad = np.stack([gradients(model, i, 1, ["input"])["input"] for i in img])
    got, _, _ = integrated_gradients_batch(model, img, [1, 1], base, steps)
    np.testing.assert_allclose(got, (img - base) * grad, atol=1e-6, rtol=0)


@pytest.mark.criterion(2)
def test_c2_ig_completeness_on_trained_cnn(desk, dense):
    images = np.stack([s.image for s in desk["test"][:200]])
    targets = predict_labels(dense, images)
    _, delta, residual = integrated_gradients_batch(dense, images, targets, steps=128, chunk=1024)
    ok = residual <= 0.01 * np.abs(delta)
    print(f"IG completeness within 1%: {ok.mean():.3f} of {len(ok)} images")
    assert ok.mean() >= 0.95


# ---------------------------------------------------------------- criterion 3

def _relu_pattern(model, x):
    """Sign pattern of every ReLU input; empty for models without ReLUs."""
    signs = []

    def recorder(t):
        signs.append((t > 0).flatten())
        return torch.relu(t)

    with torch.no_grad():
        logits = model(torch.as_tensor(x.transpose(2, 0, 1)[None]), relu=recorder)
    return logits, torch.cat(signs) if signs else torch.zeros(0, dtype=torch.bool)


def _fd_check(model, images, rng, n_images=20, per_image=10, h=1e-3, max_draws=100):
    """Worst relative error over ``per_image`` pixels on ``n_images`` images.

    Central differences only estimate the derivative when the stencil
    x-h..x+h stays inside one linear region of the ReLU network, so pixels
    whose stencil flips a ReLU are redrawn.  An image where no stencil is
    kink-free within ``max_draws`` draws (a unit sits on its kink) is
    replaced by the next one.  Both counts are printed.
    """
    model = as_double(model)
    worst, redrawn, replaced, done = 0.0, 0, 0, 0
    for img in images:
        if done == n_images:
            break
        img = img.astype(np.float64)
        target = int(rng.integers(model.spec.n_classes))
        g = gradients(model, img, target, ["input"])["input"]
        _, pattern = _relu_pattern(model, img)
        floor = 1e-3 * np.abs(g).max()
        errors, draws = [], 0
        while len(errors) < per_image and draws < max_draws:
            draws += 1
            y, x, c = rng.integers(32), rng.integers(32), rng.integers(3)
            xp, xm = img.copy(), img.copy()
            xp[y, x, c] += h
            xm[y, x, c] -= h
            lp, pp = _relu_pattern(model, xp)
            lm, pm = _relu_pattern(model, xm)
            if not (torch.equal(pp, pattern) and torch.equal(pm, pattern)):
                redrawn += 1
                continue
            fd = (lp[0, target].item() - lm[0, target].item()) / (2 * h)
            errors.append(abs(g[y, x, c] - fd) / max(abs(fd), floor))
        if len(errors) < per_image:
            replaced += 1
            continue
        worst = max(worst, *errors)
        done += 1
    print(f"finite differences on {done} images: worst relative error {worst:.2e}; "
          f"{redrawn} stencils crossed a ReLU kink, {replaced} images replaced")
    assert done == n_images, "ran out of images"
    return worst, redrawn


@pytest.mark.criterion(3)
def test_c3_finite_differences_cnn(desk, dense):
    worst, _ = _fd_check(dense, [s.image for s in desk["test"]], np.random.default_rng(3))
    assert worst <= 1e-3, worst


@pytest.mark.criterion(3)
def test_c3_finite_differences_vit(desk):
    vit = build_model(ModelSpec(family="vit", seed=5))
    worst, redrawn = _fd_check(vit, [s.image for s in desk["test"]], np.random.default_rng(4))
    assert worst <= 1e-3 and redrawn == 0, worst


# ---------------------------------------------------------------- criterion 4

@pytest.mark.criterion(4)
def test_c4_k02_sweep_to_095(tmp_path):
    data = generate_shapes_dataset(DatasetSpec(n_samples=96, seed=21))
    spec = ModelSpec(widths=(4, 8), pool_after=(0,))
    sched = Schedule(epochs=2, decay_epoch=1, lr=0.1, batch_size=32)
    pool = lrr_sweep(spec, data, 0.2, 0.95, sched, tmp_path / "pool")
    n_prunable = sum(m.size for m in pool.load_model(0)[1].values())
    assert pool.entries[-1].sparsity >= 0.95 > pool.entries[-2].sparsity
    assert len(pool.entries) == math.ceil(math.log(0.05) / math.log(0.8)) + 1
    for n, entry in enumerate(pool.entries):
        assert abs(entry.sparsity - (1 - 0.8**n)) <= n / n_prunable + 1e-15
        assert entry.lrs == lr_curve(sched)
        model, mask = pool.load_model(entry)
        params = dict(model.named_parameters())
        for name, m in mask.items():
            assert not np.any(params[name].detach().numpy()[m == 0])


# ---------------------------------------------------------------- criterion 5

def planted_fixture(rng):
    gr, gc = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    while True:
        h, w = int(rng.integers(1, gr + 1)), int(rng.integers(1, gc + 1))
        if 2 * h * w < gr * gc:
            break
    r0, c0 = int(rng.integers(0, gr - h + 1)), int(rng.integers(0, gc - w + 1))
    d = int(rng.integers(2, 16))
    u = rng.normal(size=d)
    v = rng.normal(size=d)
    v -= (v @ u / (u @ u) + rng.uniform(0.1, 2.0)) * u  # force u.v < 0
    obj = np.zeros((gr, gc), bool)
    obj[r0 : r0 + h, c0 : c0 + w] = True
    feats = np.where(obj.ravel()[:, None], u, v)
    ps = int(rng.integers(2, 17))
    box = (c0 * ps, r0 * ps, (c0 + w) * ps, (r0 + h) * ps)
    return PatchFeatures(feats, (gr, gc), ps, "planted"), obj, box, (gr * ps, gc * ps)


@pytest.mark.criterion(5)
def test_c5_lost_planted_fixtures():
    rng = np.random.default_rng(5)
    for _ in range(50):
        f, obj, box, hw = planted_fixture(rng)
        res = lost(f, hw)
        assert res.seed == int(np.flatnonzero(obj.ravel())[0])
        assert res.expanded.tolist() == np.flatnonzero(obj.ravel()).tolist()
        assert res.box == box


# ---------------------------------------------------------------- criterion 6

@pytest.mark.criterion(6)
def test_c6_end_to_end(desk, tmp_path):
    cfg, result = desk["cfg"], desk["result"]
    assert cfg.data.n_train >= 2000 and cfg.data.n_test >= 500 and cfg.data.image_size == 32
    assert set(cfg.tasks) == {"accuracy", "interp", "od", "ha"}
    assert len(desk["pool"].entries) == 11  # dense + 10 pruning rounds
    assert desk["elapsed"] <= TIME_LIMIT, desk["elapsed"]
    print(f"desk sweep: {desk['elapsed']:.0f} s")
    assert result.complete and not result.errors

    acc = {r.entry: r.mean for r in result.rows if r.task == "accuracy"}
    assert acc[0] >= 0.90
    n_levels = sum(len(v) for v in cfg.grid.normalized().values())
    per_entry = 1 + 2 * len(cfg.attribution.methods) + 2 + n_levels
    assert len(result.rows) == 11 * per_entry
    lines = (desk["out"] / "report.csv").read_text().splitlines()
    assert len(lines) == 1 + len(result.rows)

    rerun = load_config(DESK, output_dir=str(tmp_path / "desk_b"))
    second = run_sweep(rerun)
    assert second.complete and second.train_steps > 0
    assert (tmp_path / "desk_b" / "report.csv").read_bytes() == (desk["out"] / "report.csv").read_bytes()


# ---------------------------------------------------------------- criterion 7

@pytest.mark.criterion(7)
def test_c7a_high_sparsity_loses_accuracy(desk):
    rows = [r for r in desk["result"].rows if r.task == "accuracy"]
    dense_acc = next(r.mean for r in rows if r.entry == 0)
    sparse = [r for r in rows if r.sparsity_prunable >= 0.95]
    assert sparse
    assert all(r.mean < dense_acc for r in sparse), [(r.sparsity_prunable, r.mean) for r in sparse]


@pytest.mark.criterion(7)
def test_c7b_dense_lost_iou(desk):
    row = next(r for r in desk["result"].rows if r.task == "iou" and r.entry == 0)
    assert row.n == desk["cfg"].data.n_test
    assert row.mean >= 0.3


@pytest.mark.criterion(7)
def test_c7c_identity_distortion_equals_clean(desk):
    rows = desk["result"].rows
    levels = desk["cfg"].grid.normalized()
    for entry in {r.entry for r in rows}:
        clean = next(r.mean for r in rows if r.task == "accuracy" and r.entry == entry)
        ident = [r for r in rows if r.task == "distortion-accuracy" and r.entry == entry and r.level == levels[r.kind][0]]
        assert len(ident) == len(levels)
        assert all(r.mean == clean for r in ident)


# ---------------------------------------------------------------- criterion 8

TRANSFORMS = [
    lambda a: a * 3 + 1,
    np.exp,
    lambda a: a**3,
    np.sqrt,
    np.log1p,
    lambda a: np.arctan(a) * 7,
]


@pytest.mark.criterion(8)
def test_c8_rra_monotone_invariance():
    rng = np.random.default_rng(8)
    for case in range(600):
        # values on a 1/1024 grid, so each transform keeps distinct values distinct
        s = rng.integers(0, 1025, (8, 8)) / 1024
        m = rng.uniform(size=(8, 8)) < 0.3
        m[0, 0] |= not m.any()
        f = TRANSFORMS[case % len(TRANSFORMS)]
        assert rra(f(s), m) == rra(s, m)


@pytest.mark.criterion(8)
def test_c8_rma_scale_invariance():
    rng = np.random.default_rng(9)
    for _ in range(600):
        s = rng.uniform(0, 1, (8, 8))
        m = rng.uniform(size=(8, 8)) < 0.4
        m[0, 0] |= not m.any()
        c = 2.0 ** int(rng.integers(-20, 21))
        assert rma(c * s, m) == rma(s, m)
        assert abs(rma(rng.uniform(1e-3, 1e3) * s, m) - rma(s, m)) <= 1e-12


@pytest.mark.criterion(8)
def test_c8_lost_scale_invariance():
    rng = np.random.default_rng(10)
    for _ in range(600):
        gr, gc = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        x = rng.normal(size=(gr * gc, int(rng.integers(2, 9))))
        c = 2.0 ** int(rng.integers(-10, 11))
        a = lost(PatchFeatures(x, (gr, gc), 4, "r"), (4 * gr, 4 * gc))
        b = lost(PatchFeatures(c * x, (gr, gc), 4, "r"), (4 * gr, 4 * gc))
        assert a.seed == b.seed and a.expanded.tolist() == b.expanded.tolist() and a.box == b.box
