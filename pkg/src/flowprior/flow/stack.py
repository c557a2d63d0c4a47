"""The generator G as an ordered stack of bijective layers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import RngStream, svd
from .layers import ActNorm, Coupling, Mixing, stride_permutation

LOG_2PI = float(np.log(2.0 * np.pi))


class FlowNumericalError(FloatingPointError):
    """A non-finite value appeared inside the flow."""

    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


@dataclass
class FlowPass:
    """Result of a batched pass through the stack.

    ``clip_events`` counts intermediate activations that were clipped.
    """

    out: np.ndarray
    log_det: np.ndarray
    clip_events: int = 0
    caches: list = field(default_factory=list, repr=False)
    masks: list = field(default_factory=list, repr=False)


def _as_batch(v, n):
    a = np.asarray(v, dtype=np.float64)
    single = a.ndim == 1
    a = a.reshape(1, -1) if single else a
    if a.ndim != 2 or a.shape[1] != n:
        raise ValueError(f"expected vectors of length {n}, got shape {np.shape(v)}")
    return a, single


def _matrix_of(A):
    return np.asarray(getattr(A, "matrix", A), dtype=np.float64)


class FlowStack:
    """Composition ``G = layers[-1] o ... o layers[0]`` mapping latent z to signal x.

    Every intermediate activation, in both directions, is clipped to
    ``[-activation_clip, activation_clip]``; pass ``float("inf")`` to disable.
    """

    def __init__(self, layers, n: int, activation_clip: float = 40.0):
        self.layers = list(layers)
        self.n = int(n)
        self.activation_clip = float(activation_clip)
        for i, layer in enumerate(self.layers):
            if layer.n != self.n:
                raise ValueError(f"layer {i} has dimension {layer.n}, stack has {self.n}")

    @classmethod
    def build(cls, n: int, steps: int = 8, hidden: int | None = None, mixing: str = "permutation",
              epsilon: float = 5e-4, activation_clip: float = 40.0, seed: int = 0) -> "FlowStack":
        """Identity-initialised stack of ``steps`` (actnorm, mixing, coupling) blocks.

        Coupling parity alternates between blocks.  Every block mixes with the
        even/odd stride permutation except the last, whose permutation undoes
        the composition of the others, so the output is exactly the identity
        map.  ``seed`` only drives the hidden conditioner weights.
        """
        sampler = RngStream(seed, 0x5EED).sampler()
        layers = []
        acc = np.arange(n)
        stride = stride_permutation(n)
        for k in range(steps):
            perm = stride if k < steps - 1 else np.argsort(acc)
            acc = acc[perm]
            layers.append(ActNorm(n, epsilon))
            layers.append(Mixing(n, mixing, perm))
            c = Coupling(n, parity=k % 2, hidden=hidden)
            c.init_hidden(sampler)
            layers.append(c)
        return cls(layers, n, activation_clip)

    # -- passes ---------------------------------------------------------------

    def _clip(self, h, want_mask):
        clip = self.activation_clip
        if not np.isfinite(clip):
            return h, 0, None
        outside = np.abs(h) > clip
        hit = int(np.count_nonzero(outside))
        if not hit:
            return h, 0, None
        return np.clip(h, -clip, clip), hit, (~outside if want_mask else None)

    def forward_pass(self, z, cache: bool = False) -> FlowPass:
        h, _ = _as_batch(z, self.n)
        if not np.all(np.isfinite(h)):
            raise FlowNumericalError("non-finite latent input")
        total = np.zeros(h.shape[0])
        events = 0
        caches, masks = [], []
        for i, layer in enumerate(self.layers):
            h, ld, c = layer.forward(h, cache)
            h, hit, mask = self._clip(h, cache)
            events += hit
            if cache:
                masks.append(mask)
            if not (np.all(np.isfinite(h)) and np.all(np.isfinite(ld))):
                raise FlowNumericalError(f"non-finite activation after layer {i}", i)
            total += ld
            if cache:
                caches.append(c)
        return FlowPass(h, total, events, caches, masks)

    def forward_vjp(self, fp: FlowPass, gx, gld=None, want_params: bool = False):
        """Pull cotangents on (x, log_det) back to z and, optionally, the parameters."""
        g = np.asarray(gx, dtype=np.float64)
        gld = np.zeros(g.shape[0]) if gld is None else np.broadcast_to(gld, (g.shape[0],))
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            mask = fp.masks[i]
            if mask is not None:
                g = g * mask
            g, grads[i] = self.layers[i].forward_vjp(fp.caches[i], g, gld, want_params)
            if not np.all(np.isfinite(g)):
                raise FlowNumericalError(f"non-finite gradient at layer {i}", i)
        return g, grads

    def inverse_pass(self, x, cache: bool = False) -> FlowPass:
        h, _ = _as_batch(x, self.n)
        if not np.all(np.isfinite(h)):
            raise FlowNumericalError("non-finite signal input")
        total = np.zeros(h.shape[0])
        events = 0
        caches, masks = [], []
        for i in range(len(self.layers) - 1, -1, -1):
            h, ld, c = self.layers[i].inverse(h, cache)
            h, hit, mask = self._clip(h, cache)
            events += hit
            if not (np.all(np.isfinite(h)) and np.all(np.isfinite(ld))):
                raise FlowNumericalError(f"non-finite activation inverting layer {i}", i)
            total += ld
            if cache:
                caches.append(c)
                masks.append(mask)
        caches.reverse()
        masks.reverse()
        return FlowPass(h, total, events, caches, masks)

    def inverse_vjp(self, ip: FlowPass, gz, gld=None, want_params: bool = True):
        g = np.asarray(gz, dtype=np.float64)
        gld = np.zeros(g.shape[0]) if gld is None else np.broadcast_to(gld, (g.shape[0],))
        grads = [None] * len(self.layers)
        for i, layer in enumerate(self.layers):
            if ip.masks[i] is not None:
                g = g * ip.masks[i]
            g, grads[i] = layer.inverse_vjp(ip.caches[i], g, gld, want_params)
            if not np.all(np.isfinite(g)):
                raise FlowNumericalError(f"non-finite gradient at layer {i}", i)
        return g, grads

    # -- single-vector conveniences ---------------------------------------------

    def forward(self, z) -> np.ndarray:
        fp = self.forward_pass(z)
        return fp.out[0] if np.ndim(z) == 1 else fp.out

    def inverse(self, x) -> np.ndarray:
        ip = self.inverse_pass(x)
        return ip.out[0] if np.ndim(x) == 1 else ip.out

    def log_det(self, z):
        """log|det dG/dz| accumulated along the forward pass."""
        fp = self.forward_pass(z)
        return float(fp.log_det[0]) if np.ndim(z) == 1 else fp.log_det

    def log_prob(self, x):
        """Exact log-density of x under G pushed forward from N(0, I)."""
        ip = self.inverse_pass(x)
        z = ip.out
        lp = -0.5 * self.n * LOG_2PI - 0.5 * np.sum(z * z, axis=1) + ip.log_det
        return float(lp[0]) if np.ndim(x) == 1 else lp

    def data_fit(self, z, A, y, gamma: float = 0.0):
        """Objective ``||A G(z) - y||^2 + gamma ||z||^2`` and its gradient in z."""
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        M = _matrix_of(A)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if M.shape != (y.size, self.n):
            raise ValueError(f"operator shape {M.shape} incompatible with y ({y.size}) and n ({self.n})")
        fp = self.forward_pass(z, cache=True)
        r = M @ fp.out[0] - y
        value = float(r @ r + gamma * (z @ z))
        gx = (2.0 * (M.T @ r))[None, :]
        gz, _ = self.forward_vjp(fp, gx)
        grad = gz[0] + 2.0 * gamma * z
        if not np.all(np.isfinite(grad)):
            raise FlowNumericalError("non-finite data-fit gradient")
        return value, grad

    def grad_data_fit(self, z, A, y, gamma: float = 0.0) -> np.ndarray:
        return self.data_fit(z, A, y, gamma)[1]

    def jacobian(self, z) -> np.ndarray:
        """Dense dG/dz at z; row i is the pullback of the i-th unit cotangent."""
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        fp = self.forward_pass(np.tile(z, (self.n, 1)), cache=True)
        J, _ = self.forward_vjp(fp, np.eye(self.n))
        return J

    def jacobian_singular_values(self, z) -> np.ndarray:
        if self.n > 512:
            raise ValueError("dense Jacobian limited to n <= 512")
        return svd(self.jacobian(z)).sigma

    # -- parameters -----------------------------------------------------------

    def parameters(self):
        """(layer index, name, array) triples for every trainable array, in order."""
        return [(i, k, v) for i, layer in enumerate(self.layers) for k, v in layer.params.items()]

    def get_flat(self) -> np.ndarray:
        ps = self.parameters()
        return np.concatenate([v.ravel() for _, _, v in ps]) if ps else np.zeros(0)

    def set_flat(self, flat) -> None:
        pos = 0
        for i, k, v in self.parameters():
            self.layers[i].params[k] = np.asarray(flat[pos:pos + v.size]).reshape(v.shape).copy()
            pos += v.size
        if pos != len(flat):
            raise ValueError(f"expected {pos} parameters, got {len(flat)}")

    def flatten_grads(self, grads) -> np.ndarray:
        parts = []
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                parts.append(np.asarray(grads[i][k]).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def copy(self) -> "FlowStack":
        from .checkpoint import from_bytes, to_bytes

        return from_bytes(to_bytes(self), activation_clip=self.activation_clip)

    def randomize(self, stream: RngStream, scale: float = 0.3) -> "FlowStack":
        """Move every trainable parameter off its identity value (for tests and demos)."""
        s = stream.sampler()
        for layer in self.layers:
            if isinstance(layer, ActNorm):
                layer.set_effective_scale(np.exp(s.normal(layer.n, std=scale)))
                layer.params["bias"] = s.normal(layer.n, std=scale)
            elif isinstance(layer, Mixing) and layer.variant == "lu":
                for k in ("lower", "upper", "log_s"):
                    layer.params[k] = s.normal(layer.params[k].shape, std=scale)
            elif isinstance(layer, Coupling):
                for k in ("b1", "b2", "b3"):
                    layer.params[k] = s.normal(layer.params[k].shape, std=scale)
                layer.params["w3"] = s.normal(layer.params["w3"].shape, std=scale / np.sqrt(layer.hidden))
        return self
