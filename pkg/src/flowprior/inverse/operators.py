from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import RngStream, Sampler, gaussian_matrix


@dataclass(frozen=True)
class MeasurementOperator:
    """Dense linear measurement map plus a noise budget.

    ``noise_level`` is the root expected squared norm of the additive noise.
    Mask operators are the diagonal 0/1 matrix, so ``y`` keeps length n and
    the unobserved coordinates read 0.
    """

    kind: str
    matrix: np.ndarray = field(repr=False)
    noise_level: float = 0.0
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("identity", "gaussian", "mask"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")

    @classmethod
    def identity(cls, n: int, noise_level: float = 0.0) -> "MeasurementOperator":
        return cls("identity", np.eye(n), float(noise_level))

    @classmethod
    def gaussian(cls, m: int, n: int, rng, noise_level: float = 0.0) -> "MeasurementOperator":
        """i.i.d. N(0, 1/m) entries."""
        if not 1 <= m:
            raise ValueError("m must be positive")
        return cls("gaussian", gaussian_matrix(m, n, 1.0 / m, rng), float(noise_level))

    @classmethod
    def from_mask(cls, mask, noise_level: float = 0.0) -> "MeasurementOperator":
        mask = np.asarray(mask, dtype=np.float64).reshape(-1)
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        return cls("mask", np.diag(mask), float(noise_level), mask)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Indices of output coordinates that carry signal (and noise)."""
        if self.mask is not None:
            return np.flatnonzero(self.mask)
        return np.arange(self.m)

    def apply(self, x) -> np.ndarray:
        return self.matrix @ np.asarray(x, dtype=np.float64)


def make_measurements(x0, op: MeasurementOperator, rng) -> np.ndarray:
    """``y = A x0 + eta`` with ``sqrt(E||eta||^2) = op.noise_level``.

    Noise is i.i.d. normal with variance ``noise_level**2 / m`` on the ``m``
    observed coordinates.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.size != op.n:
        raise ValueError(f"signal length {x0.size} != operator input dimension {op.n}")
    y = op.apply(x0)
    if op.noise_level > 0:
        s = rng.sampler() if isinstance(rng, RngStream) else rng
        obs = op.observed
        y[obs] += s.normal(obs.size, std=op.noise_level / np.sqrt(obs.size))
    return y
