import numpy as np
import pytest
import torch

from nodule_detect import kernels

torch.set_num_threads(1)

ACCEPTANCE_RESULTS = []


def random_boxes(rng, n, lo=0.0, hi=100.0, min_wh=1.0, max_wh=40.0):
    xy = rng.uniform(lo, hi, size=(n, 2))
    wh = rng.uniform(min_wh, max_wh, size=(n, 2))
    return np.hstack([xy, xy + wh])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    impl = kernels.BACKENDS[request.param]
    for name in ("iou_matrix", "nms", "greedy_match"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
