import numpy as np
import pytest

from geost.nets import NetConfig
from geost.pointcloud import OrganizedScan

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    return NetConfig(d=8, k=4, blocks=1, dtype="float64")


def random_cloud(rng, n=200, spread=1.0):
    return rng.normal(size=(n, 3)) * spread


def asymmetric_cloud(rng, n=300):
    """Anisotropic blob with a dense lobe on one side, so no rotation maps it onto itself."""
    pts = rng.normal(size=(n, 3)) * [3.0, 1.5, 0.5]
    pts[: n // 4] += [4.0, 1.0, 0.0]
    return pts


def scan_from_gt(gt, valid=None):
    gt = np.asarray(gt, dtype=bool)
    valid = np.ones(gt.shape, dtype=bool) if valid is None else valid
    h, w = gt.shape
    v, u = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return OrganizedScan(np.stack([u, v, np.zeros_like(u)], -1), valid, gt)
