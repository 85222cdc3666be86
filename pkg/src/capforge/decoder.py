"""Soft-attention LSTM caption decoder with hand-written backpropagation.

All arithmetic is float64 numpy. The batched core (:func:`forward_batch`,
:func:`backward_batch`) runs several captions at once, padding annotation
rows and time steps with masks; the single-example functions wrap it with a
batch of one.

Shapes, with ``N`` the batch, ``L`` annotation rows, ``T`` time steps::

    E (V, m)                       embedding
    W_g (H, m), U_g (H, H),        gates g in i, f, o, c
    Z_g (H, D), b_g (H)
    W_aA (a, D), W_ah (a, H),      attention scorer
    b_a (a), v_a (a)
    W_h0, W_c0 (H, D), b_h0, b_c0  initial state from the mean annotation
    L_o (V, m), L_h (m, H),        output layer
    L_z (m, D), b_out (V)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

GATES = ("i", "f", "o", "c")

PARAM_NAMES = (
    ("E",)
    + tuple(f"{kind}_{g}" for g in GATES for kind in ("W", "U", "Z", "b"))
    + ("W_aA", "W_ah", "b_a", "v_a", "W_h0", "b_h0", "W_c0", "b_c0",
       "L_o", "L_h", "L_z", "b_out")
)


@dataclass(frozen=True)
class DecoderDims:
    V: int
    m: int
    H: int
    D: int
    a: int

    def __post_init__(self):
        for name in ("V", "m", "H", "D", "a"):
            if getattr(self, name) < 1:
                raise ValueError(f"dimension {name} must be >= 1")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, m, H, D, a = self.V, self.m, self.H, self.D, self.a
        shapes = {"E": (V, m)}
        for g in GATES:
            shapes.update({f"W_{g}": (H, m), f"U_{g}": (H, H), f"Z_{g}": (H, D), f"b_{g}": (H,)})
        shapes.update({
            "W_aA": (a, D), "W_ah": (a, H), "b_a": (a,), "v_a": (a,),
            "W_h0": (H, D), "b_h0": (H,), "W_c0": (H, D), "b_c0": (H,),
            "L_o": (V, m), "L_h": (m, H), "L_z": (m, D), "b_out": (V,),
        })
        return shapes


class DecoderParams:
    """Named parameter tensors with shapes fixed by a :class:`DecoderDims`."""

    def __init__(self, dims: DecoderDims, tensors: dict[str, np.ndarray], seed: int | None = None):
        shapes = dims.shapes()
        missing = set(shapes) - set(tensors)
        extra = set(tensors) - set(shapes)
        if missing or extra:
            raise ValueError(f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        self.dims = dims
        self.seed = seed
        self.tensors = {}
        for name in PARAM_NAMES:
            arr = np.array(tensors[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            self.tensors[name] = arr

    @classmethod
    def zeros(cls, dims: DecoderDims) -> "DecoderParams":
        return cls(dims, {k: np.zeros(s) for k, s in dims.shapes().items()})

    @classmethod
    def init(cls, dims: DecoderDims, seed: int = 0) -> "DecoderParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in dims.shapes().items():
            if name.startswith("b_"):
                tensors[name] = np.zeros(shape)
                continue
            fan_out, fan_in = shape if len(shape) == 2 else (1, shape[0])
            r = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-r, r, shape)
        return cls(dims, tensors, seed=seed)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(PARAM_NAMES)

    def items(self):
        return ((k, self.tensors[k]) for k in PARAM_NAMES)

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.dims, self.tensors, seed=self.seed)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def __eq__(self, other):
        if not isinstance(other, DecoderParams):
            return NotImplemented
        return (self.dims == other.dims and self.seed == other.seed
                and all(np.array_equal(self[k], other[k]) for k in PARAM_NAMES))

    def __repr__(self):
        return f"DecoderParams({self.dims}, seed={self.seed})"


def zeros_like(params: DecoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class StepTrace:
    alpha: np.ndarray
    z: np.ndarray
    state: DecoderState
    log_probs: np.ndarray
    cache: "BatchCache | None" = field(default=None, repr=False, compare=False)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _rows(A) -> np.ndarray:
    return np.asarray(getattr(A, "rows", A), dtype=np.float64)


def _check_width(A: np.ndarray, params: DecoderParams):
    if A.shape[-1] != params.dims.D:
        raise ValueError(f"annotation width {A.shape[-1]} does not match decoder D={params.dims.D}")


def _check_ids(ids, V: int):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"token id out of range for vocabulary of size {V}")


# -- batched primitives -----------------------------------------------------

def init_state_batch(A, amask, p: DecoderParams):
    """``A`` (N, L, D), ``amask`` (N, L) -> (h0, c0, mean annotation)."""
    Abar = (A * amask[:, :, None]).sum(axis=1) / amask.sum(axis=1)[:, None]
    h0 = np.tanh(Abar @ p["W_h0"].T + p["b_h0"])
    c0 = np.tanh(Abar @ p["W_c0"].T + p["b_c0"])
    return h0, c0, Abar


def attend_batch(A, amask, proj_A, h_prev, p: DecoderParams):
    """Score rows with ``v_a . tanh(W_aA A_i + W_ah h + b_a)`` and softmax over valid rows.

    ``proj_A`` is ``A @ W_aA.T``, hoisted out of the time loop.
    """
    hidden = np.tanh(proj_A + (h_prev @ p["W_ah"].T + p["b_a"])[:, None, :])
    scores = np.where(amask, hidden @ p["v_a"], -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    alpha = w / w.sum(axis=1, keepdims=True)
    z = np.einsum("nl,nld->nd", alpha, A)
    return alpha, z, hidden


def lstm_batch(x, h_prev, c_prev, z, p: DecoderParams):
    pre = {g: x @ p[f"W_{g}"].T + h_prev @ p[f"U_{g}"].T + z @ p[f"Z_{g}"].T + p[f"b_{g}"]
           for g in GATES}
    i, f, o = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    g = np.tanh(pre["c"])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, o, g, tc)


def output_batch(x, h, z, p: DecoderParams):
    u = x + h @ p["L_h"].T + z @ p["L_z"].T
    return log_softmax(u @ p["L_o"].T + p["b_out"]), u


@dataclass
class BatchCache:
    A: np.ndarray          # (N, L, D)
    amask: np.ndarray      # (N, L) bool
    w_prev: np.ndarray     # (N, T) int
    Abar: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    x: np.ndarray          # (N, T, m)
    h: np.ndarray          # (N, T, H), state after each step
    c: np.ndarray
    alpha: np.ndarray      # (N, T, L)
    z: np.ndarray          # (N, T, D)
    att_hidden: np.ndarray  # (N, T, L, a)
    gates: np.ndarray      # (N, T, 5, H): i, f, o, g, tanh(c)
    u: np.ndarray          # (N, T, m)
    log_probs: np.ndarray  # (N, T, V)


def forward_batch(A, amask, w_prev, params: DecoderParams) -> BatchCache:
    """Teacher-forced forward pass; ``w_prev[:, t]`` is the token consumed at step ``t``."""
    A = np.asarray(A, dtype=np.float64)
    amask = np.asarray(amask, dtype=bool)
    w_prev = np.asarray(w_prev, dtype=np.int64)
    _check_width(A, params)
    _check_ids(w_prev, params.dims.V)
    N, L, _ = A.shape
    T = w_prev.shape[1]
    H, V, m, a = params.dims.H, params.dims.V, params.dims.m, params.dims.a

    h, c, Abar = init_state_batch(A, amask, params)
    proj_A = A @ params["W_aA"].T
    cache = BatchCache(
        A=A, amask=amask, w_prev=w_prev, Abar=Abar, h0=h, c0=c,
        x=params["E"][w_prev], h=np.empty((N, T, H)), c=np.empty((N, T, H)),
        alpha=np.empty((N, T, L)), z=np.empty((N, T, A.shape[2])),
        att_hidden=np.empty((N, T, L, a)), gates=np.empty((N, T, 5, H)),
        u=np.empty((N, T, m)), log_probs=np.empty((N, T, V)),
    )
    for t in range(T):
        x = cache.x[:, t]
        alpha, z, hidden = attend_batch(A, amask, proj_A, h, params)
        h, c, gates = lstm_batch(x, h, c, z, params)
        logp, u = output_batch(x, h, z, params)
        cache.h[:, t], cache.c[:, t] = h, c
        cache.alpha[:, t], cache.z[:, t], cache.att_hidden[:, t] = alpha, z, hidden
        cache.gates[:, t] = np.stack(gates, axis=1)
        cache.u[:, t], cache.log_probs[:, t] = u, logp
    return cache


def backward_batch(cache: BatchCache, targets, tmask, params: DecoderParams,
                   lam: float, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gradient of ``scale * sum_n loss_n`` for the regularized caption loss.

    ``loss_n = -sum_t log p(y_t) + lam * sum_i (1 - sum_t alpha_ti)^2`` over valid
    steps ``tmask`` and valid annotation rows.
    """
    p = params
    targets = np.asarray(targets, dtype=np.int64)
    tmask = np.asarray(tmask, dtype=np.float64)
    A, amask = cache.A, cache.amask
    N, T = targets.shape
    rows = np.arange(N)
    grads = zeros_like(params)

    mass = np.einsum("nt,ntl->nl", tmask, cache.alpha)
    dmass = -2.0 * lam * (1.0 - mass) * amask * scale

    dh_next = np.zeros((N, p.dims.H))
    dc_next = np.zeros((N, p.dims.H))
    for t in reversed(range(T)):
        x, u = cache.x[:, t], cache.u[:, t]
        h = cache.h[:, t]
        h_prev = cache.h[:, t - 1] if t else cache.h0
        c_prev = cache.c[:, t - 1] if t else cache.c0
        z, alpha, hidden = cache.z[:, t], cache.alpha[:, t], cache.att_hidden[:, t]
        i, f, o, g, tc = (cache.gates[:, t, k] for k in range(5))
        step_w = tmask[:, t] * scale

        dlogits = np.exp(cache.log_probs[:, t])
        dlogits[rows, targets[:, t]] -= 1.0
        dlogits *= step_w[:, None]
        grads["L_o"] += dlogits.T @ u
        grads["b_out"] += dlogits.sum(axis=0)
        du = dlogits @ p["L_o"]
        grads["L_h"] += du.T @ h
        grads["L_z"] += du.T @ z
        dx = du.copy()
        dz = du @ p["L_z"]
        dh = dh_next + du @ p["L_h"]

        dc = dc_next + dh * o * (1.0 - tc ** 2)
        dpre = {
            "i": dc * g * i * (1.0 - i),
            "f": dc * c_prev * f * (1.0 - f),
            "o": dh * tc * o * (1.0 - o),
            "c": dc * i * (1.0 - g ** 2),
        }
        dc_prev = dc * f
        dh_prev = np.zeros_like(dh)
        for k, da in dpre.items():
            grads[f"W_{k}"] += da.T @ x
            grads[f"U_{k}"] += da.T @ h_prev
            grads[f"Z_{k}"] += da.T @ z
            grads[f"b_{k}"] += da.sum(axis=0)
            dx += da @ p[f"W_{k}"]
            dh_prev += da @ p[f"U_{k}"]
            dz += da @ p[f"Z_{k}"]
        np.add.at(grads["E"], cache.w_prev[:, t], dx)

        dalpha = np.einsum("nd,nld->nl", dz, A) + tmask[:, t, None] * dmass
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        grads["v_a"] += np.einsum("nl,nla->a", de, hidden)
        ds = de[:, :, None] * p["v_a"] * (1.0 - hidden ** 2)
        grads["W_aA"] += np.einsum("nla,nld->ad", ds, A)
        ds_h = ds.sum(axis=1)
        grads["W_ah"] += ds_h.T @ h_prev
        grads["b_a"] += ds_h.sum(axis=0)
        dh_prev += ds_h @ p["W_ah"]

        dh_next, dc_next = dh_prev, dc_prev

    dpre_h = dh_next * (1.0 - cache.h0 ** 2)
    dpre_c = dc_next * (1.0 - cache.c0 ** 2)
    grads["W_h0"] += dpre_h.T @ cache.Abar
    grads["b_h0"] += dpre_h.sum(axis=0)
    grads["W_c0"] += dpre_c.T @ cache.Abar
    grads["b_c0"] += dpre_c.sum(axis=0)
    return grads


def batch_losses(cache: BatchCache, targets, tmask, lam: float) -> np.ndarray:
    """Per-example regularized loss, shape (N,)."""
    targets = np.asarray(targets, dtype=np.int64)
    tmask = np.asarray(tmask, dtype=np.float64)
    picked = np.take_along_axis(cache.log_probs, targets[:, :, None], axis=2)[:, :, 0]
    nll = -(picked * tmask).sum(axis=1)
    mass = np.einsum("nt,ntl->nl", tmask, cache.alpha)
    penalty = (((1.0 - mass) ** 2) * cache.amask).sum(axis=1)
    return nll + lam * penalty


def pad_batch(annotations: Sequence, targets: Sequence[Sequence[int]], start_id: int):
    """Pad variable-size examples into arrays ``(A, amask, w_prev, targets, tmask)``."""
    mats = [_rows(a) for a in annotations]
    N = len(mats)
    L = max(m.shape[0] for m in mats)
    D = mats[0].shape[1]
    T = max(len(t) for t in targets)
    A = np.zeros((N, L, D))
    amask = np.zeros((N, L), dtype=bool)
    Y = np.zeros((N, T), dtype=np.int64)
    W = np.zeros((N, T), dtype=np.int64)
    tmask = np.zeros((N, T))
    for n, (mat, tgt) in enumerate(zip(mats, targets)):
        if mat.shape[1] != D:
            raise ValueError("annotation sets in one batch must share a width")
        if len(tgt) == 0:
            raise ValueError("target sequence must be non-empty")
        A[n, :mat.shape[0]] = mat
        amask[n, :mat.shape[0]] = True
        Y[n, :len(tgt)] = tgt
        W[n, 0] = start_id
        W[n, 1:len(tgt)] = tgt[:-1]
        tmask[n, :len(tgt)] = 1.0
    return A, amask, W, Y, tmask


# -- single-example interface -----------------------------------------------

def init_state(A, params: DecoderParams) -> DecoderState:
    A = _rows(A)
    _check_width(A, params)
    h0, c0, _ = init_state_batch(A[None], np.ones((1, A.shape[0]), dtype=bool), params)
    return DecoderState(h0[0], c0[0])


def attend(A, h_prev, params: DecoderParams) -> tuple[np.ndarray, np.ndarray]:
    A = _rows(A)
    _check_width(A, params)
    proj = A[None] @ params["W_aA"].T
    alpha, z, _ = attend_batch(A[None], np.ones((1, A.shape[0]), dtype=bool), proj,
                               np.asarray(h_prev, dtype=np.float64)[None], params)
    return alpha[0], z[0]


def lstm_step(w_prev: int, state: DecoderState, z, params: DecoderParams) -> DecoderState:
    _check_ids([w_prev], params.dims.V)
    x = params["E"][w_prev][None]
    h, c, _ = lstm_batch(x, state.h[None], state.c[None], np.asarray(z, dtype=np.float64)[None], params)
    return DecoderState(h[0], c[0])


def output_log_probs(w_prev: int, state: DecoderState, z, params: DecoderParams) -> np.ndarray:
    _check_ids([w_prev], params.dims.V)
    x = params["E"][w_prev][None]
    logp, _ = output_batch(x, state.h[None], np.asarray(z, dtype=np.float64)[None], params)
    return logp[0]


def forward_sequence(A, target_ids: Sequence[int], params: DecoderParams, start_id: int) -> list[StepTrace]:
    """Teacher-forced pass producing one :class:`StepTrace` per target token."""
    if len(target_ids) == 0:
        raise ValueError("target_ids must be non-empty")
    _check_ids(target_ids, params.dims.V)
    Ab, amask, W, _, _ = pad_batch([A], [list(target_ids)], start_id)
    cache = forward_batch(Ab, amask, W, params)
    return [
        StepTrace(alpha=cache.alpha[0, t], z=cache.z[0, t],
                  state=DecoderState(cache.h[0, t], cache.c[0, t]),
                  log_probs=cache.log_probs[0, t], cache=cache)
        for t in range(len(target_ids))
    ]


def backward_sequence(A, target_ids: Sequence[int], params: DecoderParams,
                      traces: Sequence[StepTrace], lam: float,
                      start_id: int | None = None) -> dict[str, np.ndarray]:
    """Exact gradient of the regularized loss for one caption.

    ``traces`` must come from :func:`forward_sequence` on the same inputs; when
    they carry no cache (e.g. rebuilt by hand) pass ``start_id`` so the forward
    pass can be replayed.
    """
    if len(traces) != len(target_ids):
        raise ValueError(f"{len(traces)} traces for {len(target_ids)} target tokens")
    cache = traces[0].cache if traces else None
    if cache is None:
        if start_id is None:
            raise ValueError("traces carry no forward cache; start_id is needed to replay")
        cache = forward_sequence(A, target_ids, params, start_id)[0].cache
    if cache.A.shape[2] != params.dims.D:
        raise ValueError("traces were produced with a different annotation width")
    Y = np.asarray([list(target_ids)], dtype=np.int64)
    return backward_batch(cache, Y, np.ones(Y.shape), params, lam)
