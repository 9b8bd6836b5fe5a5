"""Numerical building blocks with hand-written backward passes.

Everything is float64 numpy. Sequence tensors are time-major ``(T, B, d)``
with per-column lengths. Past its length a column carries its state
unchanged, so the state after the last step equals the state after each
sequence's own last valid step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * np.tanh(0.5 * x) + 0.5


def logsumexp(x: np.ndarray, axis: int | None = None) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def embedding_uniform(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    a = math.sqrt(3.0 / dim)
    return rng.uniform(-a, a, size=(rows, dim))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LSTMParams:
    """Gate order along the 4h axis: input, forget, cell candidate, output."""

    W: np.ndarray  # (4h, d)
    U: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden: int) -> "LSTMParams":
        W = glorot_uniform(rng, (4 * hidden, input_size))
        U = glorot_uniform(rng, (4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        return cls(W, U, b)


def lstm_cell(
    x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, params: LSTMParams
) -> tuple[np.ndarray, np.ndarray]:
    h = params.hidden
    if x.shape[-1] != params.input_size or h_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise ValueError(
            f"shape mismatch: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for LSTM with input {params.input_size}, hidden {h}"
        )
    z = x @ params.W.T + h_prev @ params.U.T + params.b
    i = sigmoid(z[..., :h])
    f = sigmoid(z[..., h : 2 * h])
    g = np.tanh(z[..., 2 * h : 3 * h])
    o = sigmoid(z[..., 3 * h :])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


@dataclass
class _LSTMCache:
    order: np.ndarray  # batch columns sorted by decreasing length
    active: np.ndarray  # (T,) number of sequences still running at each step
    xs: np.ndarray  # sorted inputs
    hs: np.ndarray  # (T+1, B, h) carried hidden states, hs[0] = initial
    cs: np.ndarray
    gates: np.ndarray  # (T, B, 4h) post-activation i, f, g, o
    tanh_c: np.ndarray  # (T, B, h) tanh of the freshly computed cell


def _gate_scale(h: int) -> np.ndarray:
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so one tanh serves all four gates
    scale = np.full(4 * h, 0.5)
    scale[2 * h : 3 * h] = 1.0
    return scale


def _valid_rows(active: np.ndarray, B: int) -> np.ndarray | None:
    """Flat (t * B + b) indices of running steps, or None when nothing is padding."""
    if (active == B).all():
        return None
    return np.flatnonzero(np.arange(B)[None, :] < active[:, None])


def lstm_forward(
    xs: np.ndarray, params: LSTMParams, lengths: np.ndarray | None = None
) -> tuple[np.ndarray, _LSTMCache]:
    """Run an LSTM over ``xs`` (T, B, d) from zero state; returns (T, B, h) outputs.

    Column ``b`` is valid for its first ``lengths[b]`` steps; past that its
    state is carried unchanged.
    """
    T, B, _ = xs.shape
    h = params.hidden
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    order = np.argsort(-lengths, kind="stable")
    active = (lengths[order][None, :] > np.arange(T)[:, None]).sum(axis=1)
    xs = xs[:, order]
    scale = _gate_scale(h)
    offset = 1.0 - scale  # 0.5 for sigmoid gates, 0 for the candidate
    rows = _valid_rows(active, B)
    flat_x = xs.reshape(T * B, -1)
    if rows is None:
        pre = (flat_x @ params.W.T + params.b) * scale
    else:
        pre = np.zeros((T * B, 4 * h))
        pre[rows] = (flat_x[rows] @ params.W.T + params.b) * scale
    pre = pre.reshape(T, B, 4 * h)
    UT = params.U.T * scale
    hs = np.zeros((T + 1, B, h))
    cs = np.zeros((T + 1, B, h))
    gates = np.zeros((T, B, 4 * h))
    tanh_c = np.zeros((T, B, h))
    for t in range(T):
        n = active[t]
        if n < B:
            hs[t + 1, n:] = hs[t, n:]
            cs[t + 1, n:] = cs[t, n:]
        if n == 0:
            continue
        gt = gates[t, :n]
        np.tanh(pre[t, :n] + hs[t, :n] @ UT, out=gt)
        gt *= scale
        gt += offset
        c_new = cs[t + 1, :n]
        np.multiply(gt[:, h : 2 * h], cs[t, :n], out=c_new)
        c_new += gt[:, :h] * gt[:, 2 * h : 3 * h]
        tc = tanh_c[t, :n]
        np.tanh(c_new, out=tc)
        np.multiply(gt[:, 3 * h :], tc, out=hs[t + 1, :n])
    out = np.empty((T, B, h))
    out[:, order] = hs[1:]
    return out, _LSTMCache(order, active, xs, hs, cs, gates, tanh_c)


def lstm_backward(
    d_hs: np.ndarray, params: LSTMParams, cache: _LSTMCache
) -> tuple[np.ndarray, LSTMParams]:
    """Backprop output gradients (T, B, h) to inputs and parameters."""
    T, B, h = d_hs.shape
    d_hs = d_hs[:, cache.order]
    gates = cache.gates
    deriv = gates * (1.0 - gates)
    cand = gates[..., 2 * h : 3 * h]
    deriv[..., 2 * h : 3 * h] = 1.0 - cand * cand
    dz_all = np.zeros((T, B, 4 * h))
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    U = params.U
    for t in range(T - 1, -1, -1):
        n = cache.active[t]
        dh = d_hs[t] + dh_next
        if n == 0:
            dh_next = dh
            continue
        g = gates[t, :n]
        tc = cache.tanh_c[t, :n]
        dh_a = dh[:n]
        dc = dc_next[:n] + dh_a * g[:, 3 * h :] * (1.0 - tc * tc)
        dz = dz_all[t, :n]
        np.multiply(dc, g[:, 2 * h : 3 * h], out=dz[:, :h])
        np.multiply(dc, cache.cs[t, :n], out=dz[:, h : 2 * h])
        np.multiply(dc, g[:, :h], out=dz[:, 2 * h : 3 * h])
        np.multiply(dh_a, tc, out=dz[:, 3 * h :])
        dz *= deriv[t, :n]
        # finished sequences pass their gradient straight back
        dh[:n] = dz @ U
        dh_next = dh
        dc_next = dc_next.copy()
        dc_next[:n] = dc * g[:, h : 2 * h]
    # dz vanishes past each sequence's end, so only valid rows enter the products
    rows = _valid_rows(cache.active, B)
    flat_dz = dz_all.reshape(T * B, 4 * h)
    flat_x = cache.xs.reshape(T * B, -1)
    flat_h = cache.hs[:-1].reshape(T * B, h)
    if rows is not None:
        flat_dz, flat_x, flat_h = flat_dz[rows], flat_x[rows], flat_h[rows]
    dW = flat_dz.T @ flat_x
    dU = flat_dz.T @ flat_h
    db = flat_dz.sum(axis=0)
    d_sorted = np.zeros((T * B, params.W.shape[1]))
    if rows is None:
        d_sorted[:] = flat_dz @ params.W
    else:
        d_sorted[rows] = flat_dz @ params.W
    dxs = np.empty((T, B, params.W.shape[1]))
    dxs[:, cache.order] = d_sorted.reshape(T, B, -1)
    return dxs, LSTMParams(dW, dU, db)


def reversal_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """(T, B) time indices reversing each column within its own length.

    Padding positions map to themselves, so the same index undoes the reversal.
    """
    t = np.arange(T)[:, None]
    lengths = np.asarray(lengths)[None, :]
    return np.where(t < lengths, lengths - 1 - t, t)


def _time_gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return x[idx, np.arange(x.shape[1])[None, :]]


@dataclass
class _BiCache:
    lengths: np.ndarray
    rev: np.ndarray
    fwd: _LSTMCache
    bwd: _LSTMCache


def bilstm_forward(
    xs: np.ndarray, lengths: np.ndarray, fwd: LSTMParams, bwd: LSTMParams
) -> tuple[np.ndarray, np.ndarray, _BiCache]:
    """Bidirectional LSTM over padded (T, B, d) input.

    Returns per-position outputs (T, B, 2h) and final states (B, 2h) made of
    the forward state after the last token and the backward state after the
    first token.
    """
    T = xs.shape[0]
    lengths = np.asarray(lengths)
    rev = reversal_index(lengths, T)
    hf, cf = lstm_forward(xs, fwd, lengths)
    hb_rev, cb = lstm_forward(_time_gather(xs, rev), bwd, lengths)
    hb = _time_gather(hb_rev, rev)
    out = np.concatenate([hf, hb], axis=-1)
    final = np.concatenate([hf[-1], hb_rev[-1]], axis=-1)
    return out, final, _BiCache(lengths, rev, cf, cb)


def bilstm_backward(
    d_out: np.ndarray | None,
    d_final: np.ndarray | None,
    fwd: LSTMParams,
    bwd: LSTMParams,
    cache: _BiCache,
) -> tuple[np.ndarray, LSTMParams, LSTMParams]:
    T, B = cache.rev.shape
    hf = fwd.hidden
    hb = bwd.hidden
    d_hf = np.zeros((T, B, hf))
    d_hb_rev = np.zeros((T, B, hb))
    if d_out is not None:
        d_hf += d_out[..., :hf]
        # the reversal index is an involution, so gathering un-reverses
        d_hb_rev += _time_gather(d_out[..., hf:], cache.rev)
    if d_final is not None:
        d_hf[-1] += d_final[:, :hf]
        d_hb_rev[-1] += d_final[:, hf:]
    dx_f, g_f = lstm_backward(d_hf, fwd, cache.fwd)
    dx_b_rev, g_b = lstm_backward(d_hb_rev, bwd, cache.bwd)
    dxs = dx_f + _time_gather(dx_b_rev, cache.rev)
    return dxs, g_f, g_b


def bilstm(sequence, fwd: LSTMParams, bwd: LSTMParams) -> list[np.ndarray]:
    """Convenience wrapper: one unpadded sequence of vectors in, list of [h_fwd; h_bwd] out."""
    xs = np.asarray(sequence, dtype=DTYPE)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("bilstm needs a non-empty sequence of vectors")
    out, _, _ = bilstm_forward(xs[:, None, :], np.array([xs.shape[0]]), fwd, bwd)
    return list(out[:, 0, :])


# ---------------------------------------------------------------------------
# dropout, linear
# ---------------------------------------------------------------------------


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout(x: np.ndarray, p: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; identity at inference or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return x * dropout_mask(x.shape, p, rng)


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ W + b`` with W stored (in, out)."""
    return x @ W + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 0.01
    decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 1
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def effective_lr(self) -> float:
        """Base rate decayed once per completed epoch (epoch numbering starts at 1)."""
        return self.lr * self.decay ** (self.epoch - 1)

    def next_epoch(self) -> None:
        self.epoch += 1


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> None:
    """In-place Adam update with bias correction."""
    for name, g in grads.items():
        # a sum is non-finite whenever any element is (or it overflows, which is no better)
        if not np.isfinite(g.sum()):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    lr = state.effective_lr
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        tmp = g * (1 - state.beta1)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1 - state.beta2
        v *= state.beta2
        v += tmp
        # lr * (m / c1) / (sqrt(v / c2) + eps), one scratch buffer
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / math.sqrt(c2)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        params[name] -= tmp


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    per_group: dict[str, float]
    n_checked: dict[str, int]

    @property
    def max_error(self) -> float:
        return max(self.per_group.values(), default=0.0)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def grad_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
    pools: Mapping[str, np.ndarray] | None = None,
    stencil: int = 2,
) -> GradCheckResult:
    """Compare analytic gradients to central differences on sampled coordinates.

    ``loss_fn`` re-evaluates the loss at the current contents of ``params``,
    which are perturbed in place and restored. ``pools`` optionally restricts
    sampling for a group to the given flat indices (e.g. embedding rows the
    loss actually touches). Groups smaller than ``n_samples`` are checked
    exhaustively. ``stencil=4`` uses the fourth-order five-point difference,
    which tolerates a larger ``eps`` and so loses less to rounding.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    rng = rng or np.random.default_rng(0)
    per_group: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, p in params.items():
        if name not in analytic:
            continue
        pool = np.arange(p.size) if pools is None or name not in pools else np.asarray(pools[name])
        if pool.size > n_samples:
            pool = rng.choice(pool, size=n_samples, replace=False)
        flat = p.reshape(-1)
        g_flat = analytic[name].reshape(-1)
        worst = 0.0
        def shifted(idx, delta):
            orig = flat[idx]
            flat[idx] = orig + delta
            try:
                return loss_fn()
            finally:
                flat[idx] = orig

        for idx in pool:
            numeric = (shifted(idx, eps) - shifted(idx, -eps)) / (2 * eps)
            if stencil == 4:
                wide = (shifted(idx, 2 * eps) - shifted(idx, -2 * eps)) / (4 * eps)
                numeric = (4 * numeric - wide) / 3
            worst = max(worst, relative_error(float(g_flat[idx]), numeric))
        per_group[name] = worst
        counts[name] = int(pool.size)
    return GradCheckResult(per_group, counts)
