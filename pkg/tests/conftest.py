import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparsevis.dataset import DatasetSpec, generate_shapes_dataset, stack
from sparsevis.models import ModelSpec, build_model
from sparsevis.training import Schedule, train

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_CNN = ModelSpec(family="cnn", image_size=32, widths=(4, 8), pool_after=(0,), seed=0)
TINY_VIT = ModelSpec(family="vit", image_size=32, patch_size=8, dim=16, depth=1, heads=2, seed=0)


@pytest.fixture(scope="session")
def small_data():
    return generate_shapes_dataset(DatasetSpec(n_samples=64, image_size=32, seed=11))


@pytest.fixture(scope="session")
def trained_cnn(small_data):
    model = build_model(TINY_CNN)
    train(model, stack(small_data), Schedule(epochs=3, decay_epoch=2, lr=0.1, batch_size=16))
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------- acceptance lines

_criteria: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in getattr(report, "criterion_marks", ()):
        _criteria.setdefault(mark, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep.criterion_marks = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok = all(o == "passed" for o in _criteria[n])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({len(_criteria[n])} checks)")
