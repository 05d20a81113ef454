"""Shared fixtures and numeric helpers for the test suite."""

import os

import numpy as np
import pytest

from ldtprune.tensor import Tape, Tensor, backward


def rng(seed, stream=0):
    return np.random.Generator(np.random.Philox(key=(seed, stream)))


def fd_grad_scalar(fn, x, eps=1e-2, coords=None, seed=0):
    """Central finite differences of scalar fn(array) at selected coords.

    Returns a dict coord -> derivative.  ``coords`` defaults to a random
    sample of at most 24 coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    if coords is None:
        g = rng(seed, 0xFD)
        n = min(24, flat.size)
        coords = sorted(g.choice(flat.size, size=n, replace=False).tolist())
    out = {}
    for c in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[c] += eps
        xm[c] -= eps
        fp = fn(xp.reshape(x.shape))
        fm = fn(xm.reshape(x.shape))
        out[c] = (fp - fm) / (2.0 * eps)
    return out


def check_grad(build_loss, x0, eps=1e-2, rtol=1e-3, atol=1e-4, coords=None,
               seed=0):
    """Compare autodiff d(loss)/dx against central finite differences.

    ``build_loss(tensor)`` must construct the scalar loss from a watched
    Tensor.  Comparison is per sampled coordinate with combined
    absolute/relative tolerance.  The default step 1e-2 balances float32
    round-off against truncation (central differences are exact for
    quadratics, so larger steps only reduce round-off).
    """
    x0 = np.asarray(x0, dtype=np.float32)
    t = Tensor(x0)
    with Tape() as tape:
        tape.watch(t)
        loss = build_loss(t)
        grads = backward(tape, loss)
    auto = grads.get(t).astype(np.float64).reshape(-1)

    def f(arr):
        return build_loss(Tensor(arr.astype(np.float32))).item()

    numeric = fd_grad_scalar(f, x0, eps=eps, coords=coords, seed=seed)
    worst = 0.0
    for c, fd in numeric.items():
        err = abs(auto[c] - fd)
        denom = max(abs(fd), abs(auto[c]), atol / rtol)
        rel = err / denom
        worst = max(worst, rel)
        assert rel <= rtol or err <= atol, (
            f"coord {c}: autodiff {auto[c]:.6g} vs fd {fd:.6g} "
            f"(rel {rel:.2e})"
        )
    return worst


@pytest.fixture
def philox():
    return rng


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the one-line acceptance verdicts collected by test_acceptance."""
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                        os.pardir, ".acceptance_cache", "criteria.txt")
    if os.path.exists(path):
        terminalreporter.section("acceptance criteria")
        with open(path) as fh:
            for line in fh.read().splitlines():
                terminalreporter.write_line(line)
