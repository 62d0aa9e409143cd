import numpy as np
import pytest

from graphtune.dataio import VectorSet, compute_ground_truth, make_synthetic


@pytest.fixture(scope="session")
def small_data():
    base, queries = make_synthetic("uniform", 1000, 16, seed=3, n_queries=50)
    return base, queries, compute_ground_truth(base, queries, 10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_knn(base: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Quadratic scan with (distance, id) ordering, independent of the package kernel."""
    out = []
    for q in queries.astype(np.float64):
        d = ((base.astype(np.float64) - q) ** 2).sum(axis=1)
        order = sorted(range(len(d)), key=lambda i: (d[i], i))
        out.append(order[:k])
    return np.array(out)


def vs(rows) -> VectorSet:
    return VectorSet(np.asarray(rows, dtype=np.float32).reshape(len(rows), -1))


def grad_check(net, loss_fn, x, h=1e-4, tol=1e-4, abs_floor=1e-7):
    """Worst relative error between backprop and central differences over every parameter.

    ``loss_fn(out) -> (loss, dloss/dout)``; the net should be float64.
    Entries where both gradients are below ``abs_floor`` are compared absolutely.
    """
    out, cache = net.forward_batch(x, keep_cache=True)
    _, g = loss_fn(out)
    gw, gb, _ = net.backward(cache, g)
    worst = 0.0
    for p, ga in zip(net.weights + net.biases, gw + gb):
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn(net.forward_batch(x))[0]
            flat[i] = old - h
            lm = loss_fn(net.forward_batch(x))[0]
            flat[i] = old
            num = (lp - lm) / (2 * h)
            a = gflat[i]
            scale = max(abs(a), abs(num))
            err = abs(a - num) if scale < abs_floor else abs(a - num) / scale
            worst = max(worst, err)
    return worst


def smooth_inputs(net, rows, seed=0, margin=1e-3, tries=200):
    """Random inputs whose hidden pre-activations all stay ``margin`` away from the LeakyReLU kink.

    Central differences are only valid where the loss is smooth on [p - h, p + h].
    """
    rng = np.random.default_rng(seed)
    for _ in range(tries):
        x = rng.standard_normal((rows, net.layer_dims[0]))
        _, (_, pre) = net.forward_batch(x, keep_cache=True)
        if min(np.abs(z).min() for z in pre[:-1]) > margin:
            return x
    raise RuntimeError("no smooth input batch found")


# acceptance criteria report one line each at the end of the run

CRITERIA: dict[int, str] = {}


class criterion:
    """Context manager: records PASS/FAIL (with a detail string) for acceptance criterion ``n``."""

    def __init__(self, n: int, name: str):
        self.n = n
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.n:2d} {status}  {self.name}"
        if self.detail:
            line += f"  [{self.detail}]"
        if exc_type is not None and exc is not None:
            line += f"  ({exc_type.__name__}: {str(exc).splitlines()[0][:160] if str(exc) else ''})"
        CRITERIA[self.n] = line
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
