import numpy as np
import pytest

from mlb_boot.model import ModelParams


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(*x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def hflip_equivariant(params: ModelParams) -> ModelParams:
    """Parameters under which the network commutes with a horizontal flip.

    Full- and half-resolution kernels are made mirror symmetric.  The stride-2
    kernel samples columns 2m-1..2m+1 of an even-width grid, so equivariance
    additionally needs its left column zero and its two right columns equal.
    """
    out = params.copy()
    for name, v in out.items():
        if not name.endswith(".w") or v.shape[-1] == 1:
            continue
        if name.startswith("down"):
            v[..., 0] = 0.0
            v[..., 2] = v[..., 1]
        else:
            out[name] = 0.5 * (v + v[..., ::-1])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL (or REPORT) line per acceptance criterion and assert it."""

    def record(number, ok, detail, exploratory=False):
        status = "REPORT" if exploratory else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
