"""Shared fixtures: small trained flows reused by several test modules."""
import time

import numpy as np
import pytest

from flowprior.flow import FlowStack, save
from flowprior.numerics import RngStream
from flowprior.training import TrainConfig, make_smooth_patches, make_toy_2d, train

GMM_STEPS = 10000
PATCH_STEPS = 3000

# wall-clock seconds spent building session fixtures, keyed by fixture name
TIMINGS = {}
# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def gmm_data():
    return make_toy_2d("gaussian-mixture-2", 5000, 0.25, RngStream(1))


@pytest.fixture(scope="session")
def gmm_trained(gmm_data):
    """(flow, train log) for a 2D flow fitted to two Gaussian blobs at (+-2, 0)."""
    t0 = time.perf_counter()
    G = FlowStack.build(2, steps=8, seed=0)
    log = train(G, gmm_data, TrainConfig(steps=GMM_STEPS, warmup_steps=500, seed=0))
    TIMINGS["gmm_trained"] = time.perf_counter() - t0
    return G, log


@pytest.fixture(scope="session")
def patch_flow():
    """16-dimensional flow fitted to smooth 4x4 patches."""
    t0 = time.perf_counter()
    data = make_smooth_patches(5000, 4, RngStream(1))
    G = FlowStack.build(16, steps=8, seed=0)
    train(G, data, TrainConfig(steps=PATCH_STEPS, warmup_steps=300, seed=0))
    TIMINGS["patch_flow"] = time.perf_counter() - t0
    return G


@pytest.fixture(scope="session")
def patch_ckpt(patch_flow, tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "patch.ckpt"
    save(patch_flow, path)
    return path


@pytest.fixture
def random_stack():
    def make(n, steps=4, mixing="permutation", seed=0, scale=0.3):
        G = FlowStack.build(n, steps=steps, mixing=mixing, seed=seed)
        return G.randomize(RngStream(seed, 0xBEEF), scale)
    return make


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
