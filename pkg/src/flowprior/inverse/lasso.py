"""Sparsity baseline: l1-regularised least squares in a 2D DCT basis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .metrics import default_shape


def dct_basis(shape) -> np.ndarray:
    """Orthonormal 2D DCT-II synthesis matrix: ``image.ravel() = Phi @ coeffs.ravel()``."""
    H, W = shape
    N = H * W
    unit = np.eye(N).reshape(N, H, W)
    return scipy.fft.idctn(unit, axes=(1, 2), norm="ortho").reshape(N, N).T


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


@dataclass
class LassoResult:
    z: np.ndarray
    objective: list
    cycles: int
    converged: bool


def lasso_cd(D, y, lam: float = 0.01, max_cycles: int = 1000, tol: float = 1e-10, z0=None) -> LassoResult:
    """Cyclic coordinate descent on ``||D z - y||^2 + lam ||z||_1``.

    Each coordinate update is the exact minimiser
    ``S(d_j . r_j, lam/2) / ||d_j||^2`` with ``r_j`` the residual excluding j.
    ``objective[k]`` is the value after k full cycles.
    """
    D = np.asarray(D, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    m, n = D.shape
    z = np.zeros(n) if z0 is None else np.array(z0, dtype=np.float64)
    r = y - D @ z
    col_sq = np.einsum("ij,ij->j", D, D)
    half = 0.5 * lam

    def objective():
        return float(r @ r + lam * np.abs(z).sum())

    trace = [objective()]
    converged = False
    cycles = 0
    while cycles < max_cycles:
        biggest = 0.0
        for j in range(n):
            if col_sq[j] == 0.0:
                continue
            d = D[:, j]
            old = z[j]
            new = soft_threshold(d @ r + col_sq[j] * old, half) / col_sq[j]
            if new != old:
                r -= d * (new - old)
                z[j] = new
                biggest = max(biggest, abs(new - old))
        cycles += 1
        trace.append(objective())
        if biggest < tol:
            converged = True
            break
    return LassoResult(z, trace, cycles, converged)


def lasso_dct(A, y, lam: float = 0.01, iters: int = 1000, shape=None, basis=None, tol: float = 1e-10):
    """Recover ``x = Phi z`` from ``y ~ A x`` with an l1 penalty on DCT coefficients.

    ``basis`` overrides the synthesis matrix Phi (default: 2D DCT on ``shape``,
    itself defaulting to the squarest grid for ``A.shape[1]``).  Returns the
    signal estimate and the full :class:`LassoResult`.
    """
    A = np.asarray(A, dtype=np.float64)
    if basis is None:
        basis = dct_basis(default_shape(A.shape[1]) if shape is None else shape)
    res = lasso_cd(A @ basis, y, lam, iters, tol)
    return basis @ res.z, res
