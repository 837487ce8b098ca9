import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

from dui.datasets import DatasetTable, GraphDataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# single-threaded BLAS keeps timings and floating point reproducible
_limits = threadpool_limits(limits=1)

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        gf[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def tiny_table():
    rng = np.random.default_rng(3)
    return DatasetTable(rng.normal(size=(8, 4)), np.array([0, 1, 2, 0, 1, 2, 0, 1]), 3)


@pytest.fixture
def tiny_graph():
    rng = np.random.default_rng(4)
    A = np.zeros((7, 7))
    for i, j in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 6), (1, 4)]:
        A[i, j] = A[j, i] = 1.0
    table = DatasetTable(rng.normal(size=(7, 4)), np.array([0, 1, 2, 0, 1, 2, 0]), 3)
    return GraphDataset(table, sp.csr_matrix(A))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
