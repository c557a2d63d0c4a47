"""Latent-space recovery: minimise ||A G(z) - y||^2 + gamma ||z||^2 over z."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..flow import FlowNumericalError, FlowStack
from ..numerics import RngStream
from .metrics import psnr, ssim
from .operators import MeasurementOperator


@dataclass(frozen=True)
class InitStrategy:
    """Where the latent search starts: ``zero``, ``gaussian`` (with ``std``) or ``from_image``."""

    kind: str = "zero"
    std: float = 0.0
    image: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("zero", "gaussian", "from_image"):
            raise ValueError(f"unknown init strategy {self.kind!r}")
        if self.kind == "from_image" and self.image is None:
            raise ValueError("from_image needs an image")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def gaussian(cls, std: float):
        return cls("gaussian", float(std))

    @classmethod
    def from_image(cls, image):
        return cls("from_image", image=np.asarray(image, dtype=np.float64).reshape(-1))

    def latent(self, G: FlowStack, stream: RngStream) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(G.n)
        if self.kind == "gaussian":
            return stream.child(0x1417).sampler().normal(G.n, std=self.std)
        if self.image.size != G.n:
            raise ValueError(f"init image has length {self.image.size}, flow expects {G.n}")
        return G.inverse(self.image)


@dataclass
class InverseProblemSpec:
    operator: MeasurementOperator
    y: np.ndarray
    gamma: float = 0.0
    init: InitStrategy = field(default_factory=InitStrategy)
    max_iters: int = 500
    tolerance: float = 1e-8
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.y.size != self.operator.m:
            raise ValueError(f"y has length {self.y.size}, operator outputs {self.operator.m}")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class RecoveryReport:
    x_hat: np.ndarray
    z_hat: np.ndarray
    objective_trace: list
    psnr: float
    ssim: float
    iterations: int
    wall_time: float
    seed: int
    status: str


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    trace: list
    iterations: int
    status: str


def lbfgs(fun_grad, x0, max_iters: int = 500, tol: float = 1e-8, history: int = 10,
          c1: float = 1e-4, shrink: float = 0.5, max_backtracks: int = 60,
          ftol: float = 1e-15) -> LbfgsResult:
    """Limited-memory BFGS with Armijo backtracking.

    Stops when the gradient norm drops below ``tol`` ("converged"), after
    ``max_iters`` accepted steps ("max_iters"), when an accepted step lowers
    the objective by no more than ``ftol`` relative ("stalled", i.e. at the
    floating-point floor), or when backtracking cannot find sufficient
    decrease ("line_search_failed").  The best point so far is returned in
    every case.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun_grad(x)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the initial point")
    trace = [f]
    S, Y, rho = [], [], []
    status = "max_iters"
    it = 0
    while it < max_iters:
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            status = "converged"
            break
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        d = -q
        slope = float(g @ d)
        if not slope < 0:
            S.clear(), Y.clear(), rho.clear()
            d = -g
            slope = -gnorm * gnorm
        step = 1.0 if S else min(1.0, 1.0 / gnorm)
        for _ in range(max_backtracks):
            x_new = x + step * d
            try:
                f_new, g_new = fun_grad(x_new)
            except FlowNumericalError:
                f_new = np.inf
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                break
            step *= shrink
        else:
            status = "line_search_failed"
            break
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s), Y.append(y), rho.append(1.0 / sy)
            if len(S) > history:
                S.pop(0), Y.pop(0), rho.pop(0)
        stalled = f - f_new <= ftol * max(abs(f), abs(f_new), 1.0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        it += 1
        if stalled and np.linalg.norm(g) >= tol:
            status = "stalled"
            break
    else:
        if np.linalg.norm(g) < tol:
            status = "converged"
    return LbfgsResult(x, f, float(np.linalg.norm(g)), trace, it, status)


def solve(G: FlowStack, spec: InverseProblemSpec, x_true=None, shape=None) -> RecoveryReport:
    """Recover a signal from ``spec.y`` by quasi-Newton descent in latent space.

    PSNR and SSIM are filled in when ``x_true`` is given (NaN otherwise).
    """
    t0 = time.perf_counter()
    A = spec.operator
    if A.n != G.n:
        raise ValueError(f"operator acts on {A.n}-vectors, flow has n={G.n}")
    z0 = spec.init.latent(G, RngStream(spec.seed, spec.stream_id))

    def fg(z):
        return G.data_fit(z, A, spec.y, spec.gamma)

    res = lbfgs(fg, z0, spec.max_iters, spec.tolerance)
    x_hat = G.forward(res.x)
    if x_true is not None:
        p, s = psnr(x_hat, x_true), ssim(x_hat, x_true, shape)
    else:
        p = s = float("nan")
    return RecoveryReport(x_hat, res.x, res.trace, p, s, res.iterations,
                          time.perf_counter() - t0, spec.seed, res.status)
