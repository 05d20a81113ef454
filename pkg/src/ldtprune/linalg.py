"""Dense symmetric linear algebra: Cholesky and a cyclic Jacobi eigensolver.

All internal arithmetic is double precision; the Tensor-level wrappers cast
back to float32.  Intended for small matrices (C <= 256).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NotPositiveDefiniteError, ShapeError
from .tensor import Tensor


@dataclass
class EigenSolution:
    """Eigenvalues sorted descending; column k of ``vectors`` pairs with
    ``values[k]``."""

    values: np.ndarray   # (C,) float64, descending
    vectors: np.ndarray  # (C,C) float64, columns are eigenvectors


def _as_square(m):
    a = m.data if isinstance(m, Tensor) else np.asarray(m)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    return a


def cholesky_np(a):
    """Lower-triangular L with L @ L.T == a, row-by-row, float64."""
    a = _as_square(a)
    n = a.shape[0]
    lo = np.zeros_like(a)
    for i in range(n):
        for j in range(i):
            lo[i, j] = (a[i, j] - lo[i, :j] @ lo[j, :j]) / lo[j, j]
        piv = a[i, i] - lo[i, :i] @ lo[i, :i]
        if piv <= 0.0 or not np.isfinite(piv):
            raise NotPositiveDefiniteError(i, piv)
        lo[i, i] = np.sqrt(piv)
    return lo


def cholesky_lower(m):
    """Tensor wrapper around :func:`cholesky_np` (not differentiable)."""
    return Tensor(cholesky_np(m).astype(np.float32))


def solve_lower(lo, b):
    """Solve L x = b for lower-triangular L (forward substitution)."""
    lo = np.asarray(lo, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    n = lo.shape[0]
    for i in range(n):
        x[i] = (x[i] - lo[i, :i] @ x[:i]) / lo[i, i]
    return x

def solve_lower_t(lo, b):
    """Solve L.T x = b for lower-triangular L (back substitution)."""
    lo = np.asarray(lo, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    n = lo.shape[0]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - lo[i + 1:, i] @ x[i + 1:]) / lo[i, i]
    return x


def jacobi_eigh(a, tol=1e-10, max_sweeps=100):
    """Full spectrum of a symmetric matrix by cyclic Jacobi rotations.

    Converged when the off-diagonal Frobenius norm drops below
    ``tol * ||a||_F``.  Returns an :class:`EigenSolution` with eigenvalues
    descending and orthonormal eigenvector columns.
    """
    a = _as_square(a)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    norm = np.linalg.norm(a)
    v = np.eye(n)
    if n == 1 or norm == 0.0:
        vals = np.diag(a).copy()
        order = np.argsort(-vals, kind="stable")
        return EigenSolution(vals[order], v[:, order])

    w = a.copy()

    def offnorm():
        return np.sqrt(max(np.sum(w * w) - np.sum(np.diag(w) ** 2), 0.0))

    # round-robin tournament schedule: each round pairs every index once,
    # so the rotations of a round touch disjoint rows/columns and can be
    # applied as one vectorized block
    m = n + (n % 2)
    circle = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(circle[i], circle[m - 1 - i]) for i in range(m // 2)]
        rounds.append([(min(p, q), max(p, q)) for p, q in pairs if
                       p < n and q < n])
        circle = [circle[0]] + [circle[-1]] + circle[1:-1]

    prev_off = np.inf
    for _sweep in range(max_sweeps):
        off = offnorm()
        if off <= tol * norm:
            break
        if off >= 0.5 * prev_off and off <= 1e3 * tol * norm:
            # stagnated at the float64 round-off plateau; accept
            break
        prev_off = off
        for pairs in rounds:
            pp = np.array([p for p, _ in pairs])
            qq = np.array([q for _, q in pairs])
            apq = w[pp, qq]
            live = np.abs(apq) > 0.0
            if not np.any(live):
                continue
            pp, qq, apq = pp[live], qq[live], apq[live]
            diff = w[qq, qq] - w[pp, pp]
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = diff / (2.0 * apq)
            huge = np.abs(diff) > 1e100 * np.abs(apq)
            t = np.where(
                huge,
                np.where(diff != 0.0, apq / np.where(diff == 0, 1, diff), 1.0),
                np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau)),
            )
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp = w[pp, :].copy()
            rq = w[qq, :].copy()
            w[pp, :] = c[:, None] * rp - s[:, None] * rq
            w[qq, :] = s[:, None] * rp + c[:, None] * rq
            cp = w[:, pp].copy()
            cq = w[:, qq].copy()
            w[:, pp] = c[None, :] * cp - s[None, :] * cq
            w[:, qq] = s[None, :] * cp + c[None, :] * cq
            w[pp, qq] = 0.0
            w[qq, pp] = 0.0
            vp = v[:, pp].copy()
            vq = v[:, qq].copy()
            v[:, pp] = c[None, :] * vp - s[None, :] * vq
            v[:, qq] = s[None, :] * vp + c[None, :] * vq
    else:
        raise ConvergenceError(
            f"Jacobi failed to converge after {max_sweeps} sweeps; "
            f"off-diagonal residual {offnorm():.3e}"
        )

    vals = np.diag(w).copy()
    order = np.argsort(-vals, kind="stable")
    return EigenSolution(vals[order], v[:, order])


def sym_eigh(m):
    """Spec-level symmetric eigensolver entry point (float32 in, float64
    solution out)."""
    return jacobi_eigh(_as_square(m))
