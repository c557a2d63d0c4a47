"""Bijective layers operating on batches of row vectors, shape (batch, n).

Each layer maps z -> x in the generative direction and provides:

* ``forward`` / ``inverse`` returning the output, the per-sample log|det| of
  that direction, and a cache for the matching vector-Jacobian product;
* ``forward_vjp`` / ``inverse_vjp`` which pull back a cotangent on the output
  and on the log-determinant to the input and (optionally) the parameters.

Trainable arrays live in ``layer.params`` (an ordered dict); structural data
(permutations, signs, split parity) is held separately and never trained.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

ACTNORM, COUPLING, MIXING = 0, 1, 2

SCALE_CLAMP = 5.0


def _sgn(a):
    return np.where(a >= 0, 1.0, -1.0)


def stride_permutation(n: int) -> np.ndarray:
    """Even positions first, then odd ones."""
    return np.concatenate([np.arange(0, n, 2), np.arange(1, n, 2)])


class ActNorm:
    """Per-coordinate affine map ``x = (scale + sgn(scale) * eps) * z + bias``.

    The epsilon floor keeps the effective scale away from zero, so the
    inverse never divides by a vanishing number.  It is applied identically
    in both directions and in the log-determinant.
    """

    kind = ACTNORM

    def __init__(self, n: int, epsilon: float = 5e-4, scale=None, bias=None):
        self.n = n
        self.epsilon = float(epsilon)
        if scale is None:
            scale = np.full(n, 1.0 - self.epsilon)
        if bias is None:
            bias = np.zeros(n)
        self.params = {"scale": np.array(scale, dtype=np.float64), "bias": np.array(bias, dtype=np.float64)}
        if np.any(np.abs(self.params["scale"]) + self.epsilon <= 0):
            raise ValueError("actnorm scale plus epsilon must be positive in magnitude")

    @property
    def effective_scale(self):
        s = self.params["scale"]
        return s + _sgn(s) * self.epsilon

    def set_effective_scale(self, eff):
        eff = np.asarray(eff, dtype=np.float64)
        self.params["scale"] = eff - _sgn(eff) * self.epsilon

    def _logdet(self, batch):
        return np.full(batch, np.sum(np.log(np.abs(self.effective_scale))))

    def forward(self, z, cache=False):
        eff = self.effective_scale
        x = z * eff + self.params["bias"]
        return x, self._logdet(z.shape[0]), (z if cache else None)

    def forward_vjp(self, z, gx, gld, want_params=True):
        eff = self.effective_scale
        gz = gx * eff
        grads = None
        if want_params:
            grads = {
                "scale": np.sum(gx * z, axis=0) + np.sum(gld) / eff,
                "bias": np.sum(gx, axis=0),
            }
        return gz, grads

    def inverse(self, x, cache=False):
        eff = self.effective_scale
        z = (x - self.params["bias"]) / eff
        return z, -self._logdet(x.shape[0]), (z if cache else None)

    def inverse_vjp(self, z, gz, gld, want_params=True):
        eff = self.effective_scale
        gx = gz / eff
        grads = None
        if want_params:
            grads = {
                "scale": -np.sum(gz * z, axis=0) / eff - np.sum(gld) / eff,
                "bias": -np.sum(gx, axis=0),
            }
        return gx, grads

    def pack(self) -> np.ndarray:
        return np.concatenate([[self.epsilon], self.params["scale"], self.params["bias"]])

    @classmethod
    def unpack(cls, n: int, vec: np.ndarray) -> "ActNorm":
        if vec.size != 1 + 2 * n:
            raise ValueError(f"actnorm expects {1 + 2 * n} parameters, got {vec.size}")
        return cls(n, vec[0], vec[1:1 + n], vec[1 + n:])


class Mixing:
    """Invertible linear channel mixing.

    ``variant="permutation"`` is a fixed index shuffle ``x[i] = z[perm[i]]``.
    ``variant="lu"`` is the learned map ``W = P L U`` with P fixed, L unit
    lower triangular and U upper triangular with diagonal ``sign * exp(log_s)``.
    """

    kind = MIXING

    def __init__(self, n: int, variant: str = "permutation", perm=None):
        if variant not in ("permutation", "lu"):
            raise ValueError(f"unknown mixing variant {variant!r}")
        self.n = n
        self.variant = variant
        self.perm = stride_permutation(n) if perm is None else np.asarray(perm, dtype=np.int64)
        if sorted(self.perm.tolist()) != list(range(n)):
            raise ValueError("perm must be a bijection of range(n)")
        self.inv_perm = np.argsort(self.perm)
        self.params = {}
        if variant == "lu":
            self.sign = np.ones(n)
            self.params = {
                "lower": np.zeros(n * (n - 1) // 2),
                "upper": np.zeros(n * (n - 1) // 2),
                "log_s": np.zeros(n),
            }
        self._lower_idx = np.tril_indices(n, -1)
        self._upper_idx = np.triu_indices(n, 1)

    def factors(self):
        n = self.n
        L = np.eye(n)
        L[self._lower_idx] = self.params["lower"]
        U = np.zeros((n, n))
        U[self._upper_idx] = self.params["upper"]
        U[np.diag_indices(n)] = self.sign * np.exp(self.params["log_s"])
        return L, U

    def matrix(self) -> np.ndarray:
        if self.variant == "permutation":
            return np.eye(self.n)[self.perm]
        L, U = self.factors()
        return (L @ U)[self.perm]

    def _logdet(self, batch):
        if self.variant == "permutation":
            return np.zeros(batch)
        return np.full(batch, np.sum(self.params["log_s"]))

    def forward(self, z, cache=False):
        if self.variant == "permutation":
            return z[:, self.perm], self._logdet(z.shape[0]), None
        W = self.matrix()
        return z @ W.T, self._logdet(z.shape[0]), (z if cache else None)

    def _param_grads(self, gW, gld_total):
        L, U = self.factors()
        gLU = np.zeros_like(gW)
        gLU[self.perm] = gW  # pull back through row permutation
        gL = gLU @ U.T
        gU = L.T @ gLU
        diag = self.sign * np.exp(self.params["log_s"])
        return {
            "lower": gL[self._lower_idx],
            "upper": gU[self._upper_idx],
            "log_s": np.diag(gU) * diag + gld_total,
        }

    def forward_vjp(self, z, gx, gld, want_params=True):
        if self.variant == "permutation":
            return gx[:, self.inv_perm], ({} if want_params else None)
        W = self.matrix()
        gz = gx @ W
        grads = self._param_grads(gx.T @ z, np.sum(gld)) if want_params else None
        return gz, grads

    def inverse(self, x, cache=False):
        if self.variant == "permutation":
            return x[:, self.inv_perm], self._logdet(x.shape[0]), None
        L, U = self.factors()
        rhs = x[:, self.inv_perm].T
        y = sla.solve_triangular(L, rhs, lower=True, unit_diagonal=True)
        z = sla.solve_triangular(U, y, lower=False).T
        return z, -self._logdet(x.shape[0]), (z if cache else None)

    def inverse_vjp(self, z, gz, gld, want_params=True):
        if self.variant == "permutation":
            return gz[:, self.perm], ({} if want_params else None)
        W = self.matrix()
        gx = np.linalg.solve(W.T, gz.T).T
        grads = self._param_grads(-gx.T @ z, -np.sum(gld)) if want_params else None
        return gx, grads

    def pack(self) -> np.ndarray:
        head = [0.0 if self.variant == "permutation" else 1.0]
        parts = [np.asarray(head), self.perm.astype(np.float64)]
        if self.variant == "lu":
            parts += [self.sign, self.params["lower"], self.params["upper"], self.params["log_s"]]
        return np.concatenate(parts)

    @classmethod
    def unpack(cls, n: int, vec: np.ndarray) -> "Mixing":
        if vec.size < 1 + n:
            raise ValueError("mixing parameter block too short")
        variant = "permutation" if vec[0] == 0.0 else "lu"
        layer = cls(n, variant, vec[1:1 + n].astype(np.int64))
        rest = vec[1 + n:]
        if variant == "permutation":
            if rest.size:
                raise ValueError("unexpected trailing parameters in permutation layer")
            return layer
        t = n * (n - 1) // 2
        if rest.size != 2 * n + 2 * t:
            raise ValueError(f"LU mixing expects {1 + 3 * n + 2 * t} parameters, got {vec.size}")
        layer.sign = rest[:n].copy()
        layer.params["lower"] = rest[n:n + t].copy()
        layer.params["upper"] = rest[n + t:n + 2 * t].copy()
        layer.params["log_s"] = rest[n + 2 * t:].copy()
        return layer


class Coupling:
    """Affine coupling: ``x_a = z_a * exp(s(z_c)) + t(z_c)``, ``x_c = z_c``.

    The conditioner is a tanh MLP with two hidden layers.  Its last layer starts
    at zero so a fresh coupling is the identity.  Raw log-scales are clamped to
    ``[-SCALE_CLAMP, SCALE_CLAMP]``.
    """

    kind = COUPLING

    def __init__(self, n: int, parity: int = 0, hidden: int | None = None):
        if n < 2:
            raise ValueError("coupling needs n >= 2")
        self.n = n
        self.parity = int(parity) % 2
        self.hidden = int(hidden) if hidden is not None else 4 * n
        h = n // 2
        first, second = np.arange(h), np.arange(h, n)
        self.cond_idx, self.act_idx = (first, second) if self.parity == 0 else (second, first)
        dc, k, H = self.cond_idx.size, self.act_idx.size, self.hidden
        # hidden weights are drawn by init_hidden; the output layer stays zero
        self.params = {
            "w1": np.zeros((H, dc)),
            "b1": np.zeros(H),
            "w2": np.zeros((H, H)),
            "b2": np.zeros(H),
            "w3": np.zeros((2 * k, H)),
            "b3": np.zeros(2 * k),
        }

    def init_hidden(self, sampler):
        H, dc = self.params["w1"].shape
        self.params["w1"] = sampler.normal((H, dc), std=np.sqrt(1.0 / dc))
        self.params["w2"] = sampler.normal((H, H), std=np.sqrt(1.0 / H))

    def _conditioner(self, c):
        p = self.params
        h1 = np.tanh(c @ p["w1"].T + p["b1"])
        h2 = np.tanh(h1 @ p["w2"].T + p["b2"])
        o = h2 @ p["w3"].T + p["b3"]
        k = self.act_idx.size
        s_raw, t = o[:, :k], o[:, k:]
        s = np.clip(s_raw, -SCALE_CLAMP, SCALE_CLAMP)
        return s, t, (c, h1, h2, s_raw)

    def _conditioner_vjp(self, mcache, gs, gt, want_params):
        p = self.params
        c, h1, h2, s_raw = mcache
        gs = gs * (np.abs(s_raw) < SCALE_CLAMP)
        go = np.concatenate([gs, gt], axis=1)
        gh2 = go @ p["w3"]
        ga2 = gh2 * (1.0 - h2 * h2)
        gh1 = ga2 @ p["w2"]
        ga1 = gh1 * (1.0 - h1 * h1)
        gc = ga1 @ p["w1"]
        grads = None
        if want_params:
            grads = {
                "w1": ga1.T @ c,
                "b1": ga1.sum(axis=0),
                "w2": ga2.T @ h1,
                "b2": ga2.sum(axis=0),
                "w3": go.T @ h2,
                "b3": go.sum(axis=0),
            }
        return gc, grads

    def forward(self, z, cache=False):
        zc, za = z[:, self.cond_idx], z[:, self.act_idx]
        s, t, mcache = self._conditioner(zc)
        es = np.exp(s)
        x = z.copy()
        x[:, self.act_idx] = za * es + t
        return x, s.sum(axis=1), ((za, es, mcache) if cache else None)

    def forward_vjp(self, cache, gx, gld, want_params=True):
        za, es, mcache = cache
        gxa = gx[:, self.act_idx]
        gs = gxa * za * es + gld[:, None]
        gc, grads = self._conditioner_vjp(mcache, gs, gxa, want_params)
        gz = np.empty_like(gx)
        gz[:, self.act_idx] = gxa * es
        gz[:, self.cond_idx] = gx[:, self.cond_idx] + gc
        return gz, grads

    def inverse(self, x, cache=False):
        xc, xa = x[:, self.cond_idx], x[:, self.act_idx]
        s, t, mcache = self._conditioner(xc)
        ems = np.exp(-s)
        za = (xa - t) * ems
        z = x.copy()
        z[:, self.act_idx] = za
        return z, -s.sum(axis=1), ((za, ems, mcache) if cache else None)

    def inverse_vjp(self, cache, gz, gld, want_params=True):
        za, ems, mcache = cache
        gza = gz[:, self.act_idx]
        gxa = gza * ems
        gs = -gza * za - gld[:, None]
        gc, grads = self._conditioner_vjp(mcache, gs, -gxa, want_params)
        gx = np.empty_like(gz)
        gx[:, self.act_idx] = gxa
        gx[:, self.cond_idx] = gz[:, self.cond_idx] + gc
        return gx, grads

    def pack(self) -> np.ndarray:
        head = np.array([self.parity, self.hidden], dtype=np.float64)
        return np.concatenate([head] + [v.ravel() for v in self.params.values()])

    @classmethod
    def unpack(cls, n: int, vec: np.ndarray) -> "Coupling":
        if vec.size < 2:
            raise ValueError("coupling parameter block too short")
        layer = cls(n, int(vec[0]), int(vec[1]))
        expected = 2 + sum(v.size for v in layer.params.values())
        if vec.size != expected:
            raise ValueError(f"coupling expects {expected} parameters, got {vec.size}")
        pos = 2
        for name, v in layer.params.items():
            layer.params[name] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return layer
