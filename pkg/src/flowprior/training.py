"""Maximum-likelihood training of flow stacks on small synthetic datasets."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .flow import FlowNumericalError, FlowStack, save
from .numerics import RngStream, Sampler

__all__ = [
    "Dataset",
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "Adam",
    "make_toy_2d",
    "make_smooth_patches",
    "mixture_centers",
    "mean_nll",
    "train",
    "DensityGrid",
    "density_grid",
]


@dataclass
class Dataset:
    samples: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or len(self.samples) == 0:
            raise ValueError("samples must be a non-empty (count, n) array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    @property
    def dimension(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return len(self.samples)

    def split(self, heldout_fraction: float = 0.1):
        """(train, heldout): the held-out part is the fixed tail of the sample list."""
        k = max(1, int(round(heldout_fraction * len(self.samples))))
        return self.samples[:-k], self.samples[-k:]


def _as_sampler(rng) -> Sampler:
    return rng.sampler() if isinstance(rng, RngStream) else rng


def mixture_centers(k: int, radius: float = 2.0) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(k) / k
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def make_toy_2d(kind: str, count: int, noise_std: float, rng) -> Dataset:
    """Two-dimensional toy point clouds.

    ``kind`` is ``"two-moons"``, ``"ring"`` or ``"gaussian-mixture-K"`` (K
    components evenly spaced on a circle of radius 2).  Component membership
    is drawn per sample so the dataset order carries no structure.
    """
    if count < 2:
        raise ValueError("count must be at least 2")
    s = _as_sampler(rng)
    if kind == "two-moons":
        lower = s.uniform(count) < 0.5
        t = np.pi * s.uniform(count)
        pts = np.where(
            lower[:, None],
            np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)]),
            np.column_stack([np.cos(t), np.sin(t)]),
        )
    elif kind == "ring":
        t = 2.0 * np.pi * s.uniform(count)
        pts = 2.0 * np.column_stack([np.cos(t), np.sin(t)])
    elif kind.startswith("gaussian-mixture-"):
        k = int(kind.rsplit("-", 1)[1])
        if k < 1:
            raise ValueError("mixture needs at least one component")
        pts = mixture_centers(k)[s.integers(k, (count,))]
    else:
        raise ValueError(f"unknown toy dataset {kind!r}")
    pts = pts + s.normal((count, 2), std=noise_std) if noise_std > 0 else pts
    return Dataset(pts, f"{kind}")


def make_smooth_patches(count: int, side: int, rng, decay: float = 1.0) -> Dataset:
    """Random ``side x side`` images with a decaying 2D DCT spectrum, flattened.

    Coefficient (i, j) has standard deviation ``0.5 / (1 + i + j)**decay`` and
    the image is offset to mean 0.5, so most pixels land in [0, 1].
    """
    s = _as_sampler(rng)
    i, j = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    std = 0.5 / (1.0 + i + j) ** decay
    coeffs = s.normal((count, side, side)) * std
    coeffs[:, 0, 0] = 0.0
    imgs = scipy.fft.idctn(coeffs, axes=(1, 2), norm="ortho") + 0.5
    return Dataset(imgs.reshape(count, side * side), f"smooth-patches-{side}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 500
    batch_size: int = 256
    steps: int = 20000
    seed: int = 0
    heldout_fraction: float = 0.1
    divergence_tolerance: float | None = 0.1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("learning_rate and batch_size must be positive, steps and warmup non-negative")
        if self.steps and self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must not exceed steps")


@dataclass
class TrainLog:
    nll: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    clip_events: list = field(default_factory=list)
    initial_heldout_nll: float = math.nan
    final_heldout_nll: float = math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "nll", "grad_norm", "clip_events"])
        for i, (a, b, c) in enumerate(zip(self.nll, self.grad_norm, self.clip_events)):
            w.writerow([i, repr(float(a)), repr(float(b)), int(c)])
        return buf.getvalue()


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int, last_good: FlowStack):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.last_good = last_good


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def mean_nll(G: FlowStack, x) -> float:
    """Mean negative log-likelihood in nats per sample."""
    return float(-np.mean(G.log_prob(np.atleast_2d(x))))


def _nll_and_grad(G: FlowStack, batch: np.ndarray):
    ip = G.inverse_pass(batch, cache=True)
    z = ip.out
    B, n = batch.shape
    nll = 0.5 * n * math.log(2 * math.pi) + 0.5 * np.sum(z * z, axis=1) - ip.log_det
    _, grads = G.inverse_vjp(ip, z / B, -np.ones(B) / B, want_params=True)
    return float(nll.mean()), G.flatten_grads(grads), ip.clip_events


def train(G: FlowStack, data: Dataset, cfg: TrainConfig) -> TrainLog:
    """Fit G to ``data`` by Adam on the mean negative log-likelihood.

    The learning rate ramps linearly over ``cfg.warmup_steps``.  On a
    non-finite loss, or a batch NLL more than ``divergence_tolerance`` (relative)
    above the initial training NLL, G is restored to the last good parameters
    and :class:`TrainingDiverged` is raised.
    """
    if data.dimension != G.n:
        raise ValueError(f"data dimension {data.dimension} != flow dimension {G.n}")
    train_x, held_x = data.split(cfg.heldout_fraction)
    log = TrainLog()
    log.initial_heldout_nll = mean_nll(G, held_x)
    if cfg.steps == 0:
        log.final_heldout_nll = log.initial_heldout_nll
        return log

    initial_nll = mean_nll(G, train_x)
    limit = math.inf
    if cfg.divergence_tolerance is not None:
        limit = initial_nll + cfg.divergence_tolerance * max(abs(initial_nll), 1.0)
    sampler = RngStream(cfg.seed, 0x7A11).sampler()
    params = G.get_flat()
    opt = Adam(params.size, cfg.learning_rate)
    last_good = params.copy()

    def abort(step, why):
        G.set_flat(last_good)
        if cfg.checkpoint_path:
            save(G, cfg.checkpoint_path)
        raise TrainingDiverged(why, step, G.copy())

    for step in range(cfg.steps):
        idx = sampler.integers(len(train_x), (cfg.batch_size,))
        try:
            nll, grad, clips = _nll_and_grad(G, train_x[idx])
        except FlowNumericalError as exc:
            abort(step, f"non-finite values in layer {exc.layer_index}")
        gnorm = float(np.linalg.norm(grad))
        if not (math.isfinite(nll) and math.isfinite(gnorm)):
            abort(step, "non-finite loss")
        if nll > limit:
            abort(step, f"batch NLL {nll:.4f} exceeds divergence limit {limit:.4f}")
        last_good = params
        log.nll.append(nll)
        log.grad_norm.append(gnorm)
        log.clip_events.append(clips)
        warm = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
        params = opt.step(params, grad, cfg.learning_rate * warm)
        G.set_flat(params)
        if cfg.checkpoint_every and cfg.checkpoint_path and (step + 1) % cfg.checkpoint_every == 0:
            save(G, cfg.checkpoint_path)
    log.final_heldout_nll = mean_nll(G, held_x)
    return log


@dataclass
class DensityGrid:
    """log-density grids on a regular 2D lattice.

    ``x_space[i, j]`` is log p_G at the signal point ``(xs[j], ys[i])``;
    ``z_space[i, j]`` is log p_G(G(z)) at the latent point ``(xs[j], ys[i])``.
    """

    xs: np.ndarray
    ys: np.ndarray
    x_space: np.ndarray
    z_space: np.ndarray

    @property
    def cell_area(self) -> float:
        return float((self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0]))

    def integral(self) -> float:
        return float(np.exp(self.x_space).sum() * self.cell_area)

    def argmax_near(self, center, radius: float) -> np.ndarray:
        """Location of the largest x-space density within ``radius`` of ``center``."""
        X, Y = np.meshgrid(self.xs, self.ys)
        near = (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius ** 2
        vals = np.where(near, self.x_space, -np.inf)
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        return np.array([self.xs[j], self.ys[i]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["u", "v", "x_space_log_prob", "z_space_log_prob"])
        for i, v in enumerate(self.ys):
            for j, u in enumerate(self.xs):
                w.writerow([repr(float(u)), repr(float(v)), repr(float(self.x_space[i, j])), repr(float(self.z_space[i, j]))])
        return buf.getvalue()


def density_grid(G: FlowStack, bounds=(-4.0, 4.0, -4.0, 4.0), resolution: int = 200) -> DensityGrid:
    if G.n != 2:
        raise ValueError("density_grid needs a 2-dimensional flow")
    xmin, xmax, ymin, ymax = bounds
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    x_space = G.log_prob(pts).reshape(X.shape)
    z_space = G.log_prob(G.forward(pts)).reshape(X.shape)
    return DensityGrid(xs, ys, x_space, z_space)
