"""Sweeps over regularisation weight and measurement count, and the latent perturbation study."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..flow import FlowStack
from ..numerics import RngStream
from .lasso import lasso_dct
from .metrics import psnr, ssim
from .operators import MeasurementOperator, make_measurements
from .solver import InitStrategy, InverseProblemSpec, solve

SWEEP_HEADER = ["m_or_gamma", "sample_id", "seed", "psnr_db", "ssim", "iters", "status"]


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class Cell:
    param: float
    sample_id: int
    seed: int
    psnr_db: float
    ssim: float
    iters: int
    status: str

    @property
    def ok(self) -> bool:
        return not self.status.startswith("error")


@dataclass
class SweepTable:
    cells: list
    integer_param: bool = False

    def means(self):
        """[(param, mean PSNR, mean SSIM)] over successful cells, in first-seen param order."""
        out = []
        for p in dict.fromkeys(c.param for c in self.cells):
            good = [c for c in self.cells if c.param == p and c.ok]
            if good:
                out.append((p, float(np.mean([c.psnr_db for c in good])), float(np.mean([c.ssim for c in good]))))
            else:
                out.append((p, math.nan, math.nan))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for c in self.cells:
            w.writerow([int(c.param) if self.integer_param else _fmt(c.param), c.sample_id, c.seed,
                        _fmt(c.psnr_db), _fmt(c.ssim), c.iters, c.status])
        return buf.getvalue()


def run_cells(fn, items, threads: int = 1):
    """Map ``fn`` over ``items`` keeping input order; the result does not depend on ``threads``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _guarded(param, sample_id, seed, work):
    try:
        return work()
    except Exception as exc:  # one bad cell must not sink the sweep
        msg = str(exc).replace(",", ";").replace("\n", " ")
        return Cell(param, sample_id, seed, math.nan, math.nan, 0, f"error: {type(exc).__name__}: {msg}")


def gamma_sweep(G: FlowStack, signals, gammas, operator: MeasurementOperator, seed: int = 0,
                init: InitStrategy | None = None, max_iters: int = 500, tolerance: float = 1e-8,
                shape=None, threads: int = 1) -> SweepTable:
    """Solve every (gamma, sample) cell with a fixed operator.

    The noisy measurement of sample i depends only on ``(seed, i)``, so all
    gamma values see the same data.
    """
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise ValueError("need at least one gamma value")
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    init = init or InitStrategy.zero()
    root = RngStream(seed)
    ys = [make_measurements(x, operator, root.child(i, 0x9015E)) for i, x in enumerate(signals)]

    def cell(item):
        gi, i = item
        g = gammas[gi]

        def work():
            spec = InverseProblemSpec(operator, ys[i], g, init, max_iters, tolerance, seed, stream_id=root.child(i).stream_id)
            rep = solve(G, spec, signals[i], shape)
            return Cell(g, i, seed, rep.psnr, rep.ssim, rep.iterations, rep.status)

        return _guarded(g, i, seed, work)

    items = [(gi, i) for gi in range(len(gammas)) for i in range(len(signals))]
    return SweepTable(run_cells(cell, items, threads))


def measurement_sweep(G: FlowStack, signals, ms, noise_level: float = 0.0, seed: int = 0, gamma: float = 0.0,
                      init: InitStrategy | None = None, max_iters: int = 500, tolerance: float = 1e-8,
                      shape=None, threads: int = 1, method: str = "flow", lasso_lambda: float = 0.01) -> SweepTable:
    """Compressive sensing over a grid of measurement counts.

    Each (m, sample) cell draws its own N(0, 1/m) operator and noise.
    ``method="lasso"`` runs the DCT Lasso baseline instead of the flow prior.
    """
    ms = [int(m) for m in ms]
    if not ms:
        raise ValueError("need at least one measurement count")
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    n = signals.shape[1]
    if any(m < 1 or m > n for m in ms):
        raise ValueError(f"measurement counts must lie in [1, {n}]")
    if method not in ("flow", "lasso"):
        raise ValueError(f"unknown method {method!r}")
    init = init or InitStrategy.zero()
    root = RngStream(seed)

    def cell(item):
        m, i = item

        def work():
            stream = root.child(i, m)
            op = MeasurementOperator.gaussian(m, n, stream.child(1), noise_level)
            y = make_measurements(signals[i], op, stream.child(2))
            if method == "lasso":
                x_hat, res = lasso_dct(op.matrix, y, lasso_lambda, max(1, max_iters), shape)
                status = "converged" if res.converged else "max_iters"
                return Cell(m, i, seed, psnr(x_hat, signals[i]), ssim(x_hat, signals[i], shape), res.cycles, status)
            spec = InverseProblemSpec(op, y, gamma, init, max_iters, tolerance, seed, stream_id=stream.stream_id)
            rep = solve(G, spec, signals[i], shape)
            return Cell(m, i, seed, rep.psnr, rep.ssim, rep.iterations, rep.status)

        return _guarded(m, i, seed, work)

    items = [(m, i) for m in ms for i in range(len(signals))]
    return SweepTable(run_cells(cell, items, threads), integer_param=True)


@dataclass
class PerturbationTable:
    alphas: np.ndarray
    natural: np.ndarray
    random_mean: np.ndarray
    random_std: np.ndarray
    directions: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "natural", "random_mean", "random_std"])
        for row in zip(self.alphas, self.natural, self.random_mean, self.random_std):
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def perturbation_sensitivity(G: FlowStack, z_a, z_b, alphas, rng, directions: int = 30) -> PerturbationTable:
    """``||G(z_a + alpha d) - G(z_a)||`` along the unit direction towards ``z_b``
    and along ``directions`` random unit directions."""
    z_a = np.asarray(z_a, dtype=np.float64).reshape(-1)
    d_nat = np.asarray(z_b, dtype=np.float64).reshape(-1) - z_a
    norm = np.linalg.norm(d_nat)
    if norm == 0:
        raise ValueError("z_a and z_b must differ")
    d_nat /= norm
    s = rng.sampler() if isinstance(rng, RngStream) else rng
    R = s.normal((directions, G.n))
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    alphas = np.asarray(alphas, dtype=np.float64)
    base = G.forward(z_a)
    natural = np.linalg.norm(G.forward(z_a + alphas[:, None] * d_nat) - base, axis=1)
    rnd = np.empty((alphas.size, directions))
    for k, a in enumerate(alphas):
        rnd[k] = np.linalg.norm(G.forward(z_a + a * R) - base, axis=1)
    return PerturbationTable(alphas, natural, rnd.mean(axis=1), rnd.std(axis=1), directions)
