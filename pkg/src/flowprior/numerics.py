"""Dense float64 linear algebra and counter-based randomness.

Everything downstream (flows, solvers, the linear-model lab) builds on the
handful of routines here: a one-sided Jacobi SVD, a minimum-norm solver, a
Gaussian matrix sampler and a central-difference Jacobian.

Randomness comes from :class:`RngStream`, an immutable ``(base_seed,
stream_id)`` pair.  Draws are produced by the Philox4x64 counter-based
generator keyed on that pair, so the k-th 64-bit word of a stream depends on
nothing but ``(base_seed, stream_id, k)``.  Normals are made from uniforms by
Box-Muller rather than numpy's ziggurat so the transform is explicit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "RngStream",
    "Sampler",
    "SvdTriple",
    "SvdConvergenceError",
    "RankDeficientError",
    "svd",
    "null_space",
    "pseudo_solve",
    "gaussian_matrix",
    "finite_diff_jacobian",
]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Identifies one reproducible random sequence.

    ``RngStream`` is a value.  Call :meth:`sampler` to get a fresh consumer
    positioned at the start of the sequence, and :meth:`child` to derive a
    disjoint stream for a parallel worker or an experiment cell.
    """

    base_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("base_seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) <= _MASK64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit integer, got {v}")

    def child(self, *keys: int) -> "RngStream":
        sid = self.stream_id
        for k in keys:
            sid = _splitmix64(sid ^ _splitmix64(int(k) & _MASK64))
        return RngStream(self.base_seed, sid)

    def sampler(self) -> "Sampler":
        return Sampler(self)


class Sampler:
    """Sequential consumer of an :class:`RngStream`.

    Not thread safe; give each thread its own stream via ``RngStream.child``.
    """

    def __init__(self, stream: RngStream):
        self.stream = stream
        key = np.array([stream.base_seed, stream.stream_id], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)
        self.words_used = 0

    def raw(self, size: int) -> np.ndarray:
        self.words_used += int(size)
        return self._bits.random_raw(int(size))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform doubles in the open interval (0, 1)."""
        count = int(np.prod(shape, dtype=np.int64))
        words = self.raw(count)
        u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self.uniform((2, pairs))
        r = np.sqrt(-2.0 * np.log(u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return (std * z).reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in ``[0, high)`` (multiply-shift; bias below 2^-40 for small ``high``)."""
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


class SvdConvergenceError(RuntimeError):
    pass


class RankDeficientError(ValueError):
    def __init__(self, sigma_min: float, threshold: float):
        super().__init__(
            f"matrix is rank deficient: smallest singular value {sigma_min:.3e} <= {threshold:.1e}"
        )
        self.sigma_min = sigma_min
        self.threshold = threshold


@dataclass(frozen=True)
class SvdTriple:
    """Thin SVD ``M = U diag(sigma) V^T`` with sigma descending."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def _round_robin(n: int):
    """Tournament pairings covering every (p, q) once per sweep; n must be even."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(Q: np.ndarray, dim: int) -> np.ndarray:
    """Extend orthonormal columns of ``Q`` to ``dim`` columns with Gram-Schmidt."""
    cols = [Q[:, j] for j in range(Q.shape[1])]
    for i in range(Q.shape[0]):
        if len(cols) == dim:
            break
        v = np.zeros(Q.shape[0])
        v[i] = 1.0
        for _ in range(2):
            for c in cols:
                v -= (c @ v) * c
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            cols.append(v / nv)
    return np.column_stack(cols) if cols else np.zeros((Q.shape[0], 0))


def svd(M, max_sweeps: int = 60, tol: float = 1e-15) -> SvdTriple:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Column pairs are visited in round-robin order so that each round applies
    n/2 disjoint rotations at once.  Raises :class:`SvdConvergenceError` if the
    columns are not mutually orthogonal after ``max_sweeps`` sweeps.
    """
    A = np.array(M, dtype=np.float64, ndmin=2)
    if A.ndim != 2 or A.size == 0:
        raise ValueError("svd expects a non-empty 2-D matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("svd input contains non-finite entries")
    if A.shape[0] < A.shape[1]:
        t = svd(A.T, max_sweeps, tol)
        return SvdTriple(t.V, t.sigma, t.U)

    m, n = A.shape
    npad = n + (n % 2)
    W = np.zeros((m, npad))
    W[:, :n] = A
    V = np.eye(npad)
    rounds = _round_robin(npad) if npad > 1 else []
    # columns below this squared norm are numerically zero and never rotated
    floor = (np.finfo(np.float64).eps * np.linalg.norm(A)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            wp, wq = W[:, p], W[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            vp, vq = V[:, p], V[:, q]
            W[:, p], W[:, q] = c * wp - s * wq, s * wp + c * wq
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    W, V = W[:, :n], V[:n, :n]
    sigma = np.linalg.norm(W, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[:, order], V[:, order]
    scale = sigma[0] if sigma[0] > 0 else 1.0
    keep = sigma > 1e-14 * scale
    U = np.zeros((m, n))
    U[:, keep] = W[:, keep] / sigma[keep]
    if not keep.all():
        U = _complete_basis(U[:, keep], n)
        sigma = np.where(keep, sigma, 0.0)
    return SvdTriple(U, sigma, V)


def null_space(B, rcond: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (as columns) of the null space of ``B``."""
    B = np.asarray(B, dtype=np.float64)
    t = svd(B)
    scale = t.sigma[0] if t.sigma[0] > 0 else 1.0
    rank = int(np.sum(t.sigma > rcond * scale))
    row_basis = t.V[:, :rank]
    full = _complete_basis(row_basis, B.shape[1])
    return full[:, rank:]


def pseudo_solve(B, y, threshold: float = 1e-10) -> np.ndarray:
    """Minimum-norm solution of the underdetermined system ``B z = y``.

    ``B`` must have full row rank; the solution ``B^T (B B^T)^{-1} y`` is
    evaluated through the SVD as ``V diag(1/sigma) U^T y``.
    """
    B = np.asarray(B, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if B.ndim != 2 or B.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: B {B.shape}, y {y.shape}")
    if B.shape[0] > B.shape[1]:
        raise RankDeficientError(0.0, threshold)
    t = svd(B)
    if t.sigma[-1] <= threshold:
        raise RankDeficientError(float(t.sigma[-1]), threshold)
    return t.V @ ((t.U.T @ y) / t.sigma)


def gaussian_matrix(m: int, n: int, variance: float, rng) -> np.ndarray:
    """``m x n`` matrix of i.i.d. N(0, variance) entries.

    ``rng`` is a :class:`Sampler` or an :class:`RngStream` (which is read from
    its start).
    """
    if m < 1 or n < 1:
        raise ValueError(f"matrix dimensions must be positive, got {m}x{n}")
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    if isinstance(rng, RngStream):
        rng = rng.sampler()
    return rng.normal((m, n), std=float(np.sqrt(variance)))


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian; column j is (f(x+h e_j) - f(x-h e_j)) / 2h."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = np.asarray(f(x + e), dtype=np.float64).reshape(-1)
        fm = np.asarray(f(x - e), dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite function value while perturbing coordinate {j}")
        cols.append((fp - fm) / (2.0 * h))
    return np.column_stack(cols)
