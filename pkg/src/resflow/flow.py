"""Residual flow: a frozen Gaussian whitening map plus trainable coupling blocks.

The model composes a linear block taken from a maximum-likelihood
Gaussian fit with ``n_blocks`` affine coupling blocks, each followed by a
fixed permutation (random ones alternating with half switches). Because
the coupling networks start at zero, a freshly built flow scores inputs
exactly like the Gaussian it extends; training then bends the density
away from that baseline without being able to fall below it at
initialization.

Log-density via change of variables:

    log p(x) = log N(z; 0, I_k) + sum_i logdet_i - logdet_half

where z is the final transformed vector, logdet_i the per-block
log-Jacobian terms, and logdet_half accounts for the linear whitening.
For a rank-deficient base (k < d) the density lives on the retained
k-dimensional subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import ByteReader, ByteWriter, TruncatedError
from .coupling import (
    CouplingBlock,
    DenseNet3,
    NumericsError,
    Permutation,
    adam_init,
    adam_step,
    make_coupling_block,
    make_permutation,
    permutation_from_indices,
    split_sizes,
)
from .gaussian import GaussianModel
from .seeding import derived_rng
from .validation import as_matrix

__all__ = [
    "ResidualFlow",
    "TrainConfig",
    "TrainHistory",
    "FlowFormatError",
    "build_residual_flow",
    "resflow_forward",
    "resflow_inverse",
    "resflow_logprob",
    "resflow_logprob_grad",
    "resflow_sample",
    "train_resflow",
    "write_flow",
    "read_flow",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

_MAGIC = b"RFLOW1"
_VERSION = 1
_PERM_CODES = {"fixed_random": 0, "switch": 1}
_PERM_KINDS = {v: k for k, v in _PERM_CODES.items()}


class FlowFormatError(ValueError):
    """Serialized flow file is malformed."""


@dataclass
class ResidualFlow:
    """Frozen linear block plus trainable coupling blocks.

    The linear part (mean, a_forward, a_inverse, logdet_half) is shared
    by value with the Gaussian fit it came from and is never updated by
    training. Blocks and their parameter arrays are mutated in place by
    ``train_resflow``; a flow being trained must have a single owner,
    frozen flows may be scored from many threads.
    """

    mean: np.ndarray
    a_forward: np.ndarray
    a_inverse: np.ndarray
    logdet_half: float
    blocks: list[CouplingBlock]
    perms: list[Permutation]
    dim: int
    rank: int
    hidden: int
    clamp: float
    seed: int

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for block in self.blocks:
            out.extend(block.params)
        return out


def build_residual_flow(
    gauss: GaussianModel,
    n_blocks: int = 10,
    hidden: int | None = None,
    clamp: float = 15.0,
    seed: int = 0,
) -> ResidualFlow:
    """Create a zero-initialized flow on top of a Gaussian fit.

    Block i (1-based) is followed by a fixed random permutation when i is
    odd and a half switch when i is even; the permutations are drawn once
    here and never change. The returned flow scores exactly like
    ``gauss`` until trained.

    Args:
        gauss: fitted Gaussian supplying the linear block.
        n_blocks: number of coupling blocks, >= 1.
        hidden: hidden width of the s/t networks; default max(2 * d2, 32).
        clamp: bound applied to the log-scale outputs.
        seed: controls network init and the random permutations.

    Raises:
        ValueError: if ``n_blocks`` < 1.
    """
    if n_blocks < 1:
        raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
    k = gauss.rank
    d1, d2 = split_sizes(k)
    if hidden is None:
        hidden = max(2 * d2, 32)
    blocks = []
    perms = []
    for i in range(n_blocks):
        blocks.append(
            make_coupling_block(
                k, hidden, derived_rng(seed, "block", i), clamp=clamp
            )
        )
        if i % 2 == 0:
            perms.append(
                make_permutation("fixed_random", k, derived_rng(seed, "perm", i))
            )
        else:
            perms.append(make_permutation("switch", k))
    return ResidualFlow(
        mean=gauss.mean.copy(),
        a_forward=gauss.a_forward.copy(),
        a_inverse=gauss.a_inverse.copy(),
        logdet_half=float(gauss.logdet_half),
        blocks=blocks,
        perms=perms,
        dim=gauss.dim,
        rank=k,
        hidden=int(hidden),
        clamp=float(clamp),
        seed=int(seed),
    )


def _check_input(flow: ResidualFlow, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    arr = as_matrix(arr, "x")
    if arr.shape[1] != flow.dim:
        raise ValueError(
            f"x has dimension {arr.shape[1]}, flow has dimension {flow.dim}"
        )
    return arr, single


def _blocks_forward(
    flow: ResidualFlow, z0: np.ndarray, want_cache: bool
):
    """Run the coupling stack on whitened inputs.

    Returns (z, logdet_sum, caches); caches is None unless requested.
    """
    z = z0
    logdet = np.zeros(z.shape[0])
    caches = [] if want_cache else None
    for i, (block, perm) in enumerate(zip(flow.blocks, flow.perms)):
        try:
            if want_cache:
                z, ld, cache = block.forward_cached(z)
                caches.append(cache)
            else:
                z, ld = block.forward(z)
        except NumericsError as exc:
            raise NumericsError(f"block {i}: {exc}") from exc
        if not np.isfinite(z).all():
            raise NumericsError(f"block {i} produced non-finite values")
        logdet += ld
        z = perm.apply(z)
    return z, logdet, caches


def _blocks_backward(
    flow: ResidualFlow,
    caches: list,
    dz: np.ndarray,
    dlogdet: np.ndarray,
    want_param_grads: bool,
):
    """Backpropagate through the coupling stack.

    ``dz`` is the gradient w.r.t. the final transformed batch, ``dlogdet``
    the per-sample weight on every block's logdet output. Returns
    (dz0, param_grads) with param_grads in ``flow.params`` order (None
    when not requested).
    """
    param_grads: list[np.ndarray] | None = [] if want_param_grads else None
    for i in range(len(flow.blocks) - 1, -1, -1):
        dz = flow.perms[i].invert(dz)
        dz, grads = flow.blocks[i].backward(caches[i], dz, dlogdet)
        if want_param_grads:
            param_grads[:0] = grads
    return dz, param_grads


def resflow_forward(flow: ResidualFlow, x) -> tuple[np.ndarray, np.ndarray]:
    """Map inputs to base-space coordinates.

    Returns:
        (z, logdet): z of shape (n, k); logdet of shape (n,) summing the
        coupling contributions only (the constant linear part lives in
        ``flow.logdet_half``).
    """
    arr, single = _check_input(flow, x)
    z0 = (arr - flow.mean) @ flow.a_forward.T
    z, logdet, _ = _blocks_forward(flow, z0, want_cache=False)
    if single:
        return z[0], logdet[0]
    return z, logdet


def resflow_inverse(flow: ResidualFlow, z) -> np.ndarray:
    """Map base-space coordinates back through the flow.

    For a full-rank linear block this inverts ``resflow_forward``; with
    k < d it recovers the representative on the retained subspace.
    """
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    arr = as_matrix(arr, "z")
    if arr.shape[1] != flow.rank:
        raise ValueError(
            f"z has dimension {arr.shape[1]}, flow has rank {flow.rank}"
        )
    for i in range(len(flow.blocks) - 1, -1, -1):
        arr = flow.perms[i].invert(arr)
        arr = flow.blocks[i].inverse(arr)
    x = arr @ flow.a_inverse.T + flow.mean
    return x[0] if single else x


def _logprob_from_z0(flow: ResidualFlow, z0: np.ndarray) -> np.ndarray:
    z, logdet, _ = _blocks_forward(flow, z0, want_cache=False)
    return (
        -0.5 * flow.rank * _LOG_2PI
        - 0.5 * np.einsum("ij,ij->i", z, z)
        + logdet
        - flow.logdet_half
    )


def resflow_logprob(flow: ResidualFlow, x) -> np.ndarray | float:
    """Log-density of ``x`` under the flow (subspace density if k < d)."""
    arr, single = _check_input(flow, x)
    z0 = (arr - flow.mean) @ flow.a_forward.T
    lp = _logprob_from_z0(flow, z0)
    return float(lp[0]) if single else lp


def resflow_logprob_grad(flow: ResidualFlow, x) -> np.ndarray:
    """Per-sample gradient of the log-density w.r.t. the input.

    Shape matches ``x`` (always 2-D output). Rows are independent: batch
    entries never mix inside the coupling networks.
    """
    arr, _ = _check_input(flow, x)
    z0 = (arr - flow.mean) @ flow.a_forward.T
    z, _, caches = _blocks_forward(flow, z0, want_cache=True)
    dz0, _ = _blocks_backward(
        flow, caches, -z, np.ones(arr.shape[0]), want_param_grads=False
    )
    return dz0 @ flow.a_forward


def resflow_sample(flow: ResidualFlow, n: int, seed: int = 0) -> np.ndarray:
    """Draw ``n`` samples by inverting the flow on Gaussian noise."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = derived_rng(seed)
    z = rng.standard_normal((n, flow.rank))
    return resflow_inverse(flow, z)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for ``train_resflow``.

    ``eval_interval`` counts epochs between validation passes; patience
    counts consecutive evaluations without a new best validation
    log-likelihood before stopping.
    """

    learning_rate: float = 1e-5
    batch_size: int = 256
    max_epochs: int = 100
    eval_interval: int = 1
    patience: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TrainHistory:
    """Evaluation trace: one row per validation pass, including step 0."""

    steps: list[int] = field(default_factory=list)
    train_ll: list[float] = field(default_factory=list)
    val_ll: list[float] = field(default_factory=list)
    best_index: int = 0

    def append(self, step: int, train_ll: float, val_ll: float) -> None:
        self.steps.append(int(step))
        self.train_ll.append(float(train_ll))
        self.val_ll.append(float(val_ll))

    @property
    def best_val_ll(self) -> float:
        return self.val_ll[self.best_index]


def train_resflow(
    flow: ResidualFlow, train, val, config: TrainConfig | None = None
) -> TrainHistory:
    """Fit the coupling blocks by maximum likelihood with Adam.

    Minimizes mean negative log-likelihood on shuffled minibatches. After
    every ``eval_interval`` epochs the mean log-likelihood of both splits
    is recorded; training stops when validation fails to improve for
    ``patience`` consecutive evaluations or the epoch budget runs out,
    and the parameters are restored to the best recorded checkpoint.

    The linear block stays frozen throughout; whitened coordinates are
    precomputed once, which is exact because no update can touch them.

    Args:
        flow: flow to train, modified in place.
        train: training batch, shape (n_train, dim), n_train >= 1.
        val: validation batch, shape (n_val, dim), n_val >= 1.
        config: TrainConfig; defaults used if omitted.

    Returns:
        TrainHistory; entry 0 is the pre-training evaluation.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    x_train = as_matrix(train, "train", min_rows=1)
    x_val = as_matrix(val, "val", min_rows=1)
    for name, arr in (("train", x_train), ("val", x_val)):
        if arr.shape[1] != flow.dim:
            raise ValueError(
                f"{name} has dimension {arr.shape[1]}, flow expects {flow.dim}"
            )

    z_train = (x_train - flow.mean) @ flow.a_forward.T
    z_val = (x_val - flow.mean) @ flow.a_forward.T
    n = z_train.shape[0]

    params = flow.params
    opt = adam_init(params, learning_rate=cfg.learning_rate)

    history = TrainHistory()

    def evaluate(step: int) -> float:
        train_ll = float(_logprob_from_z0(flow, z_train).mean())
        val_ll = float(_logprob_from_z0(flow, z_val).mean())
        history.append(step, train_ll, val_ll)
        return val_ll

    best_val = evaluate(0)
    best_params = [p.copy() for p in params]
    history.best_index = 0
    since_best = 0
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = derived_rng(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = z_train[order[start : start + cfg.batch_size]]
            m = batch.shape[0]
            z, _, caches = _blocks_forward(flow, batch, want_cache=True)
            # mean NLL: d/dz = z / m, each logdet term enters with weight -1/m
            _, grads = _blocks_backward(
                flow, caches, z / m, np.full(m, -1.0 / m), want_param_grads=True
            )
            adam_step(opt, params, grads)
            step += 1
        if epoch % cfg.eval_interval == 0:
            val_ll = evaluate(step)
            if val_ll > best_val:
                best_val = val_ll
                best_params = [p.copy() for p in params]
                history.best_index = len(history.steps) - 1
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break

    for p, b in zip(params, best_params):
        p[...] = b
    return history


def write_flow(flow: ResidualFlow, path) -> None:
    """Serialize a flow to one little-endian binary file.

    Layout: magic "RFLOW1", u16 version, u32 dim/rank/n_blocks/hidden,
    f64 clamp, i64 seed, f64 logdet_half, f64 mean[dim], f64
    a_forward[rank*dim], then per block the s- and t-network tensors in
    layer order, then per permutation a kind byte and u32 indices. All
    float payloads are raw 64-bit, so a load/save cycle is bit-exact.
    """
    w = ByteWriter()
    w.raw(_MAGIC)
    w.u16(_VERSION)
    w.u32(flow.dim)
    w.u32(flow.rank)
    w.u32(flow.n_blocks)
    w.u32(flow.hidden)
    w.f64(flow.clamp)
    w.i64(flow.seed)
    w.f64(flow.logdet_half)
    w.f64_array(flow.mean)
    w.f64_array(flow.a_forward)
    for block in flow.blocks:
        for arr in block.params:
            w.f64_array(arr)
    for perm in flow.perms:
        w.u8(_PERM_CODES[perm.kind])
        w.u32_array(perm.indices)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def read_flow(path) -> ResidualFlow:
    """Load a flow written by ``write_flow``.

    The lift matrix is not stored; it is rebuilt from ``a_forward`` using
    the spectral structure (rows are orthogonal with norms 1/sqrt(eig)),
    which reproduces it to rounding error.

    Raises:
        FlowFormatError: wrong magic or version.
        TruncatedError: file shorter than the header promises.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = ByteReader(data, name=str(path))
    if r.take(len(_MAGIC)) != _MAGIC:
        raise FlowFormatError(f"{path}: bad magic")
    version = r.u16()
    if version != _VERSION:
        raise FlowFormatError(f"{path}: unsupported version {version}")
    dim = r.u32()
    rank = r.u32()
    n_blocks = r.u32()
    hidden = r.u32()
    clamp = r.f64()
    seed = r.i64()
    logdet_half = r.f64()
    mean = r.f64_array(dim)
    a_forward = r.f64_array(rank * dim, shape=(rank, dim))

    d1, d2 = split_sizes(rank)
    blocks = []
    for _ in range(n_blocks):
        nets = []
        for _net in range(2):
            w1 = r.f64_array(d1 * hidden, shape=(d1, hidden))
            b1 = r.f64_array(hidden)
            w2 = r.f64_array(hidden * hidden, shape=(hidden, hidden))
            b2 = r.f64_array(hidden)
            w3 = r.f64_array(hidden * d2, shape=(hidden, d2))
            b3 = r.f64_array(d2)
            nets.append(DenseNet3(weights=[w1, w2, w3], biases=[b1, b2, b3]))
        blocks.append(
            CouplingBlock(s_net=nets[0], t_net=nets[1], d1=d1, d2=d2, clamp=clamp)
        )
    perms = []
    for _ in range(n_blocks):
        code = r.u8()
        if code not in _PERM_KINDS:
            raise FlowFormatError(f"{path}: unknown permutation code {code}")
        idx = r.u32_array(rank)
        perms.append(permutation_from_indices(_PERM_KINDS[code], idx))
    r.expect_end()

    # rows of a_forward are q_j / sqrt(eig_j); recover the lift map
    row_sq = np.einsum("ij,ij->i", a_forward, a_forward)
    a_inverse = (a_forward * (1.0 / row_sq)[:, None]).T
    return ResidualFlow(
        mean=mean,
        a_forward=a_forward,
        a_inverse=np.ascontiguousarray(a_inverse),
        logdet_half=logdet_half,
        blocks=blocks,
        perms=perms,
        dim=dim,
        rank=rank,
        hidden=hidden,
        clamp=clamp,
        seed=seed,
    )
