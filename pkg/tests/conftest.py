import numpy as np
import pytest

from kivla import autodiff as ad


def central_diff(fn, x, h=1e-6):
    """Independent finite-difference oracle for a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return out


def rel_err(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return 0.0 if denom == 0 else float(np.abs(a - b).max() / denom)


def grad_of(build, x):
    """Analytic gradient of ``build(graph, tensor)`` at ``x`` (float64)."""
    g = ad.Graph()
    t = g.tensor(x, trainable=True)
    return ad.backward(build(g, t))[t]


def value_of(build, x):
    g = ad.Graph()
    return float(build(g, g.tensor(x)).value)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
