"""Linear invertible generators: exact maximum-likelihood recovery and its error bounds.

For x0 = G z0 with z0 ~ N(0, I) and noiseless measurements A x0, the most
likely signal consistent with the data has latent ``P z0`` where P projects
orthogonally onto range(G^T A^T).  Averaged over z0 the squared error is
``||G (P - I)||_F^2``; averaged further over Gaussian A it lies between
``sum_{i>m} sigma_i^2`` and ``m * sum_{i>m-2} sigma_i^2`` for 4 <= m < n.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .numerics import RankDeficientError, RngStream, SvdTriple, svd

__all__ = [
    "PROFILES",
    "LinearGenerator",
    "BoundReport",
    "sigma_profile",
    "random_orthogonal",
    "projector",
    "mle_linear",
    "expected_error_closed_form",
    "monte_carlo_error",
    "theorem1_bounds",
    "relative_error",
    "lemma_frobenius_check",
    "projector_commutativity_check",
    "eckart_young_check",
    "bound_report",
    "bound_reports_csv",
]

PROFILES = ("flat", "1/i", "1/i^2")
RANK_TOL = 1e-10
_CHUNK = 1000


def sigma_profile(name: str, n: int) -> np.ndarray:
    i = np.arange(1, n + 1, dtype=np.float64)
    if name == "flat":
        return np.ones(n)
    if name == "1/i":
        return 1.0 / i
    if name in ("1/i^2", "1/i2"):
        return 1.0 / i ** 2
    raise ValueError(f"unknown sigma profile {name!r}; choose from {PROFILES}")


def _sampler(rng):
    return rng.sampler() if isinstance(rng, RngStream) else rng


def random_orthogonal(n: int, rng) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    Q, R = np.linalg.qr(_sampler(rng).normal((n, n)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


@dataclass(frozen=True)
class LinearGenerator:
    svd: SvdTriple

    def __post_init__(self):
        s = self.svd.sigma
        if self.svd.U.shape[0] != self.svd.U.shape[1] or self.svd.V.shape != self.svd.U.shape:
            raise ValueError("U and V must be square and of equal size")
        if np.any(np.diff(s) > 0) or s[-1] <= 0:
            raise ValueError("singular values must be descending and strictly positive")

    @classmethod
    def from_sigma(cls, sigma, rng=None) -> "LinearGenerator":
        """``U diag(sigma) V^T`` with random orthogonal factors, or diagonal if ``rng`` is None."""
        sigma = np.asarray(sigma, dtype=np.float64)
        n = sigma.size
        if rng is None:
            return cls(SvdTriple(np.eye(n), sigma, np.eye(n)))
        s = _sampler(rng)
        return cls(SvdTriple(random_orthogonal(n, s), sigma, random_orthogonal(n, s)))

    @classmethod
    def from_matrix(cls, G) -> "LinearGenerator":
        return cls(svd(G))

    @property
    def n(self) -> int:
        return self.svd.sigma.size

    @property
    def sigma(self) -> np.ndarray:
        return self.svd.sigma

    @property
    def matrix(self) -> np.ndarray:
        return self.svd.reconstruct()


def projector(M) -> np.ndarray:
    """Orthogonal projector onto range(M) for M of full column rank, via QR."""
    Q, R = np.linalg.qr(np.asarray(M, dtype=np.float64))
    d = np.abs(np.diag(R))
    if d.size and d.min() <= RANK_TOL * max(1.0, d.max()):
        raise RankDeficientError(float(d.min()), RANK_TOL)
    return Q @ Q.T


def _check_rank(AG):
    s = svd(AG).sigma
    if s[-1] <= RANK_TOL:
        raise RankDeficientError(float(s[-1]), RANK_TOL)


def mle_linear(G: LinearGenerator, A, z0):
    """Most likely latent and signal consistent with ``A G z = A G z0``."""
    Gm = G.matrix
    AG = np.asarray(A, dtype=np.float64) @ Gm
    _check_rank(AG)
    z_hat = projector(AG.T) @ np.asarray(z0, dtype=np.float64)
    return z_hat, Gm @ z_hat


def expected_error_closed_form(G: LinearGenerator, A) -> float:
    """``E_{z0} ||x_hat - x0||^2 = ||G (P - I)||_F^2``."""
    Gm = G.matrix
    AG = np.asarray(A, dtype=np.float64) @ Gm
    _check_rank(AG)
    P = projector(AG.T)
    return float(np.sum((Gm @ P - Gm) ** 2))


def _closed_form_batch(Gm: np.ndarray, A: np.ndarray):
    """Closed-form errors for a stack of operators A with shape (T, m, n).

    Returns (errors, ok) where ``ok`` flags draws whose G^T A^T had full rank.
    """
    B = Gm.T @ A.transpose(0, 2, 1)
    Q, R = np.linalg.qr(B)
    d = np.abs(np.diagonal(R, axis1=1, axis2=2))
    ok = d.min(axis=1) > RANK_TOL * np.maximum(1.0, d.max(axis=1))
    GQ = Gm @ Q
    resid = GQ @ Q.transpose(0, 2, 1) - Gm
    return np.einsum("tij,tij->t", resid, resid), ok


def monte_carlo_error(G: LinearGenerator, m: int, trials: int, rng, max_skip_fraction: float = 0.01):
    """Mean and standard error over Gaussian A (i.i.d. N(0,1)) of the closed-form error.

    Draws are generated in fixed chunks, chunk k from ``rng.child(k)``, so the
    result depends only on the stream and ``trials``.  Returns
    ``(mean, stderr, skipped)``.
    """
    if not 1 <= m < G.n:
        raise ValueError(f"need 1 <= m < n, got m={m}, n={G.n}")
    if trials < 2:
        raise ValueError("need at least 2 trials")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    Gm = G.matrix
    errs, skipped = [], 0
    for k, start in enumerate(range(0, trials, _CHUNK)):
        size = min(_CHUNK, trials - start)
        A = stream.child(k).sampler().normal((size, m, G.n))
        e, ok = _closed_form_batch(Gm, A)
        skipped += int(np.count_nonzero(~ok))
        errs.append(e[ok])
    if skipped > max_skip_fraction * trials:
        raise RankDeficientError(0.0, RANK_TOL)
    e = np.concatenate(errs)
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size)), skipped


def theorem1_bounds(sigma, m: int):
    """(lower, upper) = (sum_{i>m} sigma_i^2, m * sum_{i>m-2} sigma_i^2), 1-based indices."""
    sigma = np.asarray(sigma, dtype=np.float64)
    n = sigma.size
    if not 4 <= m < n:
        raise ValueError(f"bounds need 4 <= m < n (n={n}), got m={m}")
    if np.any(sigma <= 0) or np.any(np.diff(sigma) > 0):
        raise ValueError("sigma must be positive and descending")
    sq = sigma ** 2
    return float(sq[m:].sum()), float(m * sq[m - 2:].sum())


@dataclass
class BoundReport:
    n: int
    m: int
    lower: float
    upper: float
    mc_mean: float
    mc_stderr: float
    trials: int
    closed_form_mean: float
    sigma_profile: str = ""
    skipped: int = 0

    @property
    def contained(self) -> bool:
        return self.lower - 3 * self.mc_stderr <= self.mc_mean <= self.upper + 3 * self.mc_stderr

    @property
    def slack(self) -> float:
        return self.upper / self.mc_mean if self.mc_mean > 0 else math.inf


def relative_error(report: BoundReport, sigma) -> float:
    total = float(np.sum(np.asarray(sigma, dtype=np.float64) ** 2))
    if total <= 0:
        raise ValueError("sum of squared singular values must be positive")
    return report.mc_mean / total


def bound_report(G: LinearGenerator, m: int, trials: int, rng, profile: str = "") -> BoundReport:
    lower, upper = theorem1_bounds(G.sigma, m)
    mean, se, skipped = monte_carlo_error(G, m, trials, rng)
    return BoundReport(G.n, m, lower, upper, mean, se, trials, mean, profile, skipped)


def bound_reports_csv(reports, sigmas) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "m", "sigma_profile", "trials", "lower", "mc_mean", "mc_stderr", "upper", "relative_error"])
    for r, s in zip(reports, sigmas):
        w.writerow([r.n, r.m, r.sigma_profile, r.trials, repr(r.lower), repr(r.mc_mean),
                    repr(r.mc_stderr), repr(r.upper), repr(relative_error(r, s))])
    return buf.getvalue()


def lemma_frobenius_check(M, samples: int, rng):
    """Compare the sample mean of ||M z||^2, z ~ N(0, I), with ||M||_F^2.

    Returns ``(empirical, exact, z_score)``; the z-score is 0 when the sample
    variance vanishes (M = 0).
    """
    M = np.asarray(M, dtype=np.float64)
    s = _sampler(rng)
    vals = np.empty(samples)
    for start in range(0, samples, 10000):
        size = min(10000, samples - start)
        Z = s.normal((size, M.shape[1]))
        vals[start:start + size] = np.sum((Z @ M.T) ** 2, axis=1)
    emp = float(vals.mean())
    exact = float(np.sum(M * M))
    se = float(vals.std(ddof=1) / math.sqrt(samples))
    return emp, exact, (emp - exact) / se if se > 0 else 0.0


def projector_commutativity_check(M, U) -> float:
    """``|| U^T P_M U - P_{U^T M} ||_F`` for orthogonal U."""
    M = np.asarray(M, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    return float(np.linalg.norm(U.T @ projector(M) @ U - projector(U.T @ M)))


def eckart_young_check(G: LinearGenerator, m: int, draws: int = 100, rng=0):
    """Best rank-m error versus the closed-form error of random Gaussian A.

    Returns ``(truncation_error, min_error, all_above)`` where ``all_above`` is
    True when every sampled error is at least ``truncation_error - 1e-9``.
    """
    trunc = float(np.sum(G.sigma[m:] ** 2))
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    A = stream.sampler().normal((draws, m, G.n))
    errs, ok = _closed_form_batch(G.matrix, A)
    errs = errs[ok]
    lo = float(errs.min()) if errs.size else math.nan
    return trunc, lo, bool(np.all(errs >= trunc - 1e-9))
