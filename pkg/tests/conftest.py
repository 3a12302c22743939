"""Shared finite-difference oracle."""

import numpy as np
import pytest

from jointsal.autodiff import Tensor

FD_STEP = 1e-6
FD_TOL = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(loss_fn, arrays, k, step=FD_STEP, coords=None):
    """Central differences of ``loss_fn(*arrays)`` wrt ``arrays[k]`` (all or selected flat coords)."""
    x = arrays[k]
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    for i, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + step
        up = loss_fn(*arrays)
        flat[c] = old - step
        down = loss_fn(*arrays)
        flat[c] = old
        out[i] = (up - down) / (2 * step)
    return out


def check_gradients(fn, arrays, rng, tol=FD_TOL):
    """Compare autodiff against central differences for a tensor-valued ``fn``.

    The output is contracted with a fixed random tensor so every output
    element contributes. Returns the worst relative error over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(*arrs):
        nonlocal probe
        out = fn(*[Tensor(a) for a in arrs])
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return float((out.data * probe).sum())

    scalar(*arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    (out * Tensor(probe)).sum().backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, k).reshape(t.shape)
        worst = max(worst, rel_error(t.grad, num))
    assert worst < tol, f"max relative gradient error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
