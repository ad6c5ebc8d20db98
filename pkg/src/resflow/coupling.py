"""Affine coupling blocks with hand-written backpropagation.

A block splits its input into halves (x1, x2), leaves x1 alone and maps
x2 -> x2 * exp(s(x1)) + t(x1), where s and t are small fully connected
networks. The log-Jacobian-determinant is sum(s(x1)), so densities stay
cheap to evaluate. Both networks' last layers start at zero, making a
fresh block the identity map with zero log-determinant.

Everything here is plain numpy. Training code drives the blocks through
``forward_cached`` / ``backward`` and updates parameters in place with
Adam; a block must not be shared across threads while it is being
trained. Frozen blocks are safe to read concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LEAKY_SLOPE",
    "NumericsError",
    "DenseNet3",
    "CouplingBlock",
    "Permutation",
    "make_permutation",
    "make_coupling_block",
    "split_sizes",
    "AdamState",
    "adam_init",
    "adam_step",
]

LEAKY_SLOPE = 0.01


class NumericsError(RuntimeError):
    """A forward pass produced NaN or infinity."""


def split_sizes(dim: int) -> tuple[int, int]:
    """(d1, d2) with d1 = ceil(dim / 2); d2 may be 0 for dim == 1."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    d1 = (dim + 1) // 2
    return d1, dim - d1


def _leaky(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0.0, a, LEAKY_SLOPE * a)


def _leaky_grad(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0.0, 1.0, LEAKY_SLOPE)


@dataclass
class DenseNet3:
    """Three fully connected layers, leaky ReLU after the first two.

    Weight layout is (fan_in, fan_out); activations are row batches, so
    the forward pass is ``x @ w + b`` per layer.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def params(self) -> list[np.ndarray]:
        return [
            self.weights[0], self.biases[0],
            self.weights[1], self.biases[1],
            self.weights[2], self.biases[2],
        ]

    def forward(self, x: np.ndarray, want_cache: bool = False):
        w, b = self.weights, self.biases
        a1 = x @ w[0] + b[0]
        h1 = _leaky(a1)
        a2 = h1 @ w[1] + b[1]
        h2 = _leaky(a2)
        y = h2 @ w[2] + b[2]
        if want_cache:
            return y, (x, a1, h1, a2, h2)
        return y

    def backward(self, cache, dy: np.ndarray):
        """Gradients for the cached forward pass.

        Returns:
            (dx, grads) where grads matches the order of ``params``.
        """
        x, a1, h1, a2, h2 = cache
        w = self.weights
        dw3 = h2.T @ dy
        db3 = dy.sum(axis=0)
        dh2 = dy @ w[2].T
        da2 = dh2 * _leaky_grad(a2)
        dw2 = h1.T @ da2
        db2 = da2.sum(axis=0)
        dh1 = da2 @ w[1].T
        da1 = dh1 * _leaky_grad(a1)
        dw1 = x.T @ da1
        db1 = da1.sum(axis=0)
        dx = da1 @ w[0].T
        return dx, [dw1, db1, dw2, db2, dw3, db3]


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def make_dense_net(
    in_dim: int,
    hidden: int,
    out_dim: int,
    rng: np.random.Generator,
    zero_last: bool = True,
) -> DenseNet3:
    """Initialize a DenseNet3.

    The first two layers draw from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    With ``zero_last`` (production default) the output layer is all zeros,
    so the network starts as the constant-zero function.
    """
    w1 = _uniform_init(rng, in_dim, (in_dim, hidden))
    b1 = _uniform_init(rng, in_dim, (hidden,))
    w2 = _uniform_init(rng, hidden, (hidden, hidden))
    b2 = _uniform_init(rng, hidden, (hidden,))
    if zero_last:
        w3 = np.zeros((hidden, out_dim))
        b3 = np.zeros(out_dim)
    else:
        w3 = _uniform_init(rng, hidden, (hidden, out_dim))
        b3 = _uniform_init(rng, hidden, (out_dim,))
    return DenseNet3(weights=[w1, w2, w3], biases=[b1, b2, b3])


@dataclass
class CouplingBlock:
    """One affine coupling transform on vectors of length d1 + d2."""

    s_net: DenseNet3
    t_net: DenseNet3
    d1: int
    d2: int
    clamp: float = 15.0

    @property
    def dim(self) -> int:
        return self.d1 + self.d2

    @property
    def params(self) -> list[np.ndarray]:
        return self.s_net.params + self.t_net.params

    def _split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(
                f"expected batch of shape (n, {self.dim}), got {x.shape}"
            )
        return x[:, : self.d1], x[:, self.d1 :]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Transform a batch; returns (z, logdet) with logdet shape (n,)."""
        z, logdet, _ = self._forward_impl(x, want_cache=False)
        return z, logdet

    def forward_cached(self, x: np.ndarray):
        """Like forward but also returns the cache ``backward`` needs."""
        return self._forward_impl(x, want_cache=True)

    def _forward_impl(self, x: np.ndarray, want_cache: bool):
        x1, x2 = self._split(x)
        s_raw, s_cache = self.s_net.forward(x1, want_cache=True)
        t, t_cache = self.t_net.forward(x1, want_cache=True)
        if not np.isfinite(s_raw).all() or not np.isfinite(t).all():
            raise NumericsError("coupling networks produced non-finite output")
        s = np.clip(s_raw, -self.clamp, self.clamp)
        es = np.exp(s)
        z2 = x2 * es + t
        z = np.concatenate([x1, z2], axis=1)
        logdet = s.sum(axis=1)
        cache = (x1, x2, s_raw, s, es, s_cache, t_cache) if want_cache else None
        return z, logdet, cache

    def backward(self, cache, dz: np.ndarray, dlogdet: np.ndarray):
        """Backpropagate through a cached forward pass.

        Args:
            cache: value returned by ``forward_cached``.
            dz: upstream gradient w.r.t. the block output, shape (n, dim).
            dlogdet: upstream gradient w.r.t. each sample's logdet, shape (n,).

        Returns:
            (dx, grads): gradient w.r.t. the block input and a list of
            parameter gradients in ``params`` order.

        Raises:
            ValueError: if no cache is supplied (forward pass not run).
        """
        if cache is None:
            raise ValueError("backward needs the cache from forward_cached")
        x1, x2, s_raw, s, es, s_cache, t_cache = cache
        dz1 = dz[:, : self.d1]
        dz2 = dz[:, self.d1 :]
        dx2 = dz2 * es
        ds = dz2 * x2 * es + dlogdet[:, None]
        # clamp is flat outside the bounds
        ds_raw = np.where(np.abs(s_raw) < self.clamp, ds, 0.0)
        dx1_s, s_grads = self.s_net.backward(s_cache, ds_raw)
        dx1_t, t_grads = self.t_net.backward(t_cache, dz2)
        dx1 = dz1 + dx1_s + dx1_t
        dx = np.concatenate([dx1, dx2], axis=1)
        return dx, s_grads + t_grads

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Invert the transform: x2 = (z2 - t(z1)) * exp(-s(z1))."""
        z1, z2 = self._split(z)
        s_raw = self.s_net.forward(z1)
        t = self.t_net.forward(z1)
        if not np.isfinite(s_raw).all() or not np.isfinite(t).all():
            raise NumericsError("coupling networks produced non-finite output")
        s = np.clip(s_raw, -self.clamp, self.clamp)
        x2 = (z2 - t) * np.exp(-s)
        return np.concatenate([z1, x2], axis=1)


def make_coupling_block(
    dim: int,
    hidden: int | None,
    rng: np.random.Generator,
    clamp: float = 15.0,
    zero_last: bool = True,
) -> CouplingBlock:
    """Build a coupling block for ``dim``-dimensional inputs.

    ``hidden`` defaults to max(2 * d2, 32). The s-network is drawn before
    the t-network, so a given generator state defines the block exactly.
    """
    d1, d2 = split_sizes(dim)
    if hidden is None:
        hidden = max(2 * d2, 32)
    if hidden < 1:
        raise ValueError(f"hidden must be >= 1, got {hidden}")
    s_net = make_dense_net(d1, hidden, d2, rng, zero_last=zero_last)
    t_net = make_dense_net(d1, hidden, d2, rng, zero_last=zero_last)
    return CouplingBlock(s_net=s_net, t_net=t_net, d1=d1, d2=d2, clamp=float(clamp))


@dataclass(frozen=True)
class Permutation:
    """Fixed reordering of coordinates; |det| = 1 by construction."""

    kind: str
    indices: np.ndarray
    inverse_indices: np.ndarray = field(repr=False, default=None)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x[..., self.indices]

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z[..., self.inverse_indices]


def _as_permutation(kind: str, indices: np.ndarray) -> Permutation:
    inv = np.empty_like(indices)
    inv[indices] = np.arange(indices.shape[0])
    return Permutation(kind=kind, indices=indices, inverse_indices=inv)


def make_permutation(
    kind: str, dim: int, rng: np.random.Generator | None = None
) -> Permutation:
    """Create a ``fixed_random`` or ``switch`` permutation of ``dim`` coords.

    ``switch`` moves the second half in front of the first (halves as in
    ``split_sizes``), so consecutive coupling blocks transform different
    coordinates. ``fixed_random`` shuffles once with the supplied
    generator and never changes afterwards.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if kind == "switch":
        d1, _ = split_sizes(dim)
        idx = np.concatenate([np.arange(d1, dim), np.arange(0, d1)])
    elif kind == "fixed_random":
        if rng is None:
            raise ValueError("fixed_random permutation needs a generator")
        idx = rng.permutation(dim)
    else:
        raise ValueError(f"unknown permutation kind {kind!r}")
    return _as_permutation(kind, idx.astype(np.int64))


def permutation_from_indices(kind: str, indices) -> Permutation:
    """Rebuild a permutation from stored indices (deserialization path)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or not np.array_equal(np.sort(idx), np.arange(idx.shape[0])):
        raise ValueError("indices do not form a permutation")
    if kind not in ("fixed_random", "switch"):
        raise ValueError(f"unknown permutation kind {kind!r}")
    return _as_permutation(kind, idx)


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    learning_rate: float
    beta1: float
    beta2: float
    eps: float


def adam_init(
    params: list[np.ndarray],
    learning_rate: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    if learning_rate < 0:
        raise ValueError(f"learning_rate must be >= 0, got {learning_rate}")
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0,
        learning_rate=float(learning_rate),
        beta1=float(beta1),
        beta2=float(beta2),
        eps=float(eps),
    )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("params/grads do not match the optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
