import numpy as np
import pytest

from robust_gfm.autograd import Tensor
from robust_gfm.graph import Graph, generate_sbm, make_dataset


def numeric_grad(f, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        up = f()
        array[idx] = old - h
        down = f()
        array[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gradcheck(loss_fn, params: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Relative error of the analytic gradient for every parameter tensor."""
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    return {k: rel_error(analytic[k], numeric_grad(lambda: loss_fn().item(), p.data, h)) for k, p in params.items()}


def two_cliques(k: int = 4, bridge: bool = False) -> Graph:
    edges = [(i, j) for i in range(k) for j in range(i + 1, k)]
    edges += [(i + k, j + k) for i, j in edges]
    if bridge:
        edges.append((k - 1, k))
    return Graph.from_edges(2 * k, edges)


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


@pytest.fixture
def barbell():
    return two_cliques(4, bridge=True)


@pytest.fixture
def disjoint_k4():
    return two_cliques(4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sbm_small():
    return generate_sbm(60, 3, 0.5, 0.02, 8, 2.0, seed=3, domain_id="sbm-small")


@pytest.fixture
def tiny_dataset():
    g = two_cliques(3, bridge=True)
    x = np.random.default_rng(0).normal(size=(6, 4))
    return make_dataset(g, x, [0, 0, 0, 1, 1, 1], "tiny")


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
