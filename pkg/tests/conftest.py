import numpy as np
import pytest


def fd_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.ravel()
    for i in range(x.size):
        xp = x.copy()
        xp.ravel()[i] += eps
        xm = x.copy()
        xm.ravel()[i] -= eps
        flat[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray) -> None:
    """Tolerance contract: 1e-4 relative or 1e-7 absolute, whichever is larger."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    tol = np.maximum(1e-4 * np.abs(numeric), 1e-7)
    err = np.abs(analytic - numeric)
    worst = float((err - tol).max())
    assert np.all(err <= tol), f"gradient mismatch, worst excess {worst:.3e}"


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)
