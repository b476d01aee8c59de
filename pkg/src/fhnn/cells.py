"""LSTM cell, sequence layers, bidirectional wrapper, and a one-hidden-layer
MLP, each with hand-coded forward and backward passes.

Conventions
-----------
* Per-step activations are ``(dim, batch)`` float64 arrays; sequences are
  ``(T, dim, batch)``.  A single sample is just ``batch == 1``.
* LSTM gate pre-activations are stacked in fixed row-block order
  ``[input i, forget f, candidate g, output o]``, each block ``hidden`` rows.
  Checkpoints depend on this order.
* Backward passes accumulate (``+=``) into the ``grad`` buffers of the
  :class:`~fhnn.numerics.Param` objects, so parameters shared across time
  steps and scales compose correctly.  Callers zero grads between batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Param, ParamSet, ShapeError


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmParams:
    """w_ih: (4H, D_in), w_hh: (4H, H), b: (4H, 1), gate order [i, f, g, o]."""

    w_ih: Param
    w_hh: Param
    b: Param

    @property
    def hidden_size(self) -> int:
        return self.w_hh.value.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.value.shape[1]


@dataclass
class LstmState:
    h: np.ndarray  # (H, B)
    c: np.ndarray  # (H, B)


def zero_state(hidden: int, batch: int = 1) -> LstmState:
    return LstmState(h=np.zeros((hidden, batch)), c=np.zeros((hidden, batch)))


def init_lstm_params(params: ParamSet, prefix: str, d_in: int, hidden: int, rng) -> LstmParams:
    """Register a fresh LSTM parameter block under ``prefix``.

    Weights are uniform in [-1/sqrt(H), 1/sqrt(H)]; the forget-gate bias
    block starts at 1.0 so memory is initially retained.
    """
    bound = 1.0 / np.sqrt(hidden)
    w_ih = rng.uniform(-bound, bound, size=(4 * hidden, d_in))
    w_hh = rng.uniform(-bound, bound, size=(4 * hidden, hidden))
    b = np.zeros((4 * hidden, 1))
    b[hidden : 2 * hidden] = 1.0
    return LstmParams(
        w_ih=params.add(f"{prefix}.w_ih", w_ih),
        w_hh=params.add(f"{prefix}.w_hh", w_hh),
        b=params.add(f"{prefix}.b", b),
    )


def lstm_params_from_set(params: ParamSet, prefix: str) -> LstmParams:
    return LstmParams(w_ih=params[f"{prefix}.w_ih"], w_hh=params[f"{prefix}.w_hh"], b=params[f"{prefix}.b"])


def lstm_cell_forward(x: np.ndarray, prev: LstmState, p: LstmParams):
    """One LSTM step.  Returns (next_state, cache).

    i, f, o = sigmoid(.), g = tanh(.), c' = f*c + i*g, h' = o*tanh(c').
    """
    hidden = p.hidden_size
    if x.shape[0] != p.w_ih.value.shape[1]:
        raise ShapeError(f"cell input dim {x.shape[0]} != expected {p.w_ih.value.shape[1]}")
    if prev.h.shape[0] != hidden:
        raise ShapeError(f"cell state dim {prev.h.shape[0]} != hidden {hidden}")
    pre = p.w_ih.value @ x
    pre += p.w_hh.value @ prev.h
    pre += p.b.value
    i = sigmoid(pre[:hidden])
    f = sigmoid(pre[hidden : 2 * hidden])
    g = np.tanh(pre[2 * hidden : 3 * hidden])
    o = sigmoid(pre[3 * hidden :])
    c = f * prev.c + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, prev.h, prev.c, i, f, g, o, tc)
    return LstmState(h=h, c=c), cache


def lstm_cell_backward(dh: np.ndarray, dc: np.ndarray, cache, p: LstmParams):
    """Backward through one cell step.

    dh, dc are the loss gradients w.r.t. the step's output h' and c'.
    Returns (dx, dh_prev, dc_prev); parameter grads are accumulated.
    """
    x, h_prev, c_prev, i, f, g, o, tc = cache
    hidden = i.shape[0]
    dc_total = dc + dh * o * (1.0 - tc * tc)
    dpre = np.empty((4 * hidden, dh.shape[1]))
    dpre[:hidden] = (dc_total * g) * i * (1.0 - i)
    dpre[hidden : 2 * hidden] = (dc_total * c_prev) * f * (1.0 - f)
    dpre[2 * hidden : 3 * hidden] = (dc_total * i) * (1.0 - g * g)
    dpre[3 * hidden :] = (dh * tc) * o * (1.0 - o)
    p.w_ih.grad += dpre @ x.T
    p.w_hh.grad += dpre @ h_prev.T
    p.b.grad += dpre.sum(axis=1, keepdims=True)
    dx = p.w_ih.value.T @ dpre
    dh_prev = p.w_hh.value.T @ dpre
    dc_prev = dc_total * f
    return dx, dh_prev, dc_prev


def lstm_sequence(xs: np.ndarray, init: LstmState, p: LstmParams):
    """Unroll left to right over ``xs`` of shape (T, D, B).

    Returns (hs, final_state, caches) with hs of shape (T, H, B).
    """
    if xs.ndim != 3 or xs.shape[0] == 0:
        raise ShapeError(f"lstm_sequence needs a nonempty (T, D, B) input, got {xs.shape}")
    T = xs.shape[0]
    hidden = p.hidden_size
    hs = np.empty((T, hidden, xs.shape[2]))
    caches = []
    state = init
    for t in range(T):
        state, cache = lstm_cell_forward(xs[t], state, p)
        hs[t] = state.h
        caches.append(cache)
    return hs, state, caches


def lstm_sequence_backward(d_hs: np.ndarray, d_final_c: np.ndarray | None, caches, p: LstmParams):
    """Backward through an unrolled sequence.

    d_hs (T, H, B) carries per-step upstream gradients on h_t (include any
    terminal-state gradient in d_hs[-1]); d_final_c optionally adds a
    gradient on the final cell state.  Returns (d_xs, d_init_state).
    """
    T = d_hs.shape[0]
    if len(caches) != T:
        raise ShapeError(f"cache length {len(caches)} != gradient steps {T}")
    d_xs = np.empty((T, caches[0][0].shape[0], d_hs.shape[2]))
    dh = d_hs[T - 1].copy()
    dc = np.zeros_like(dh) if d_final_c is None else d_final_c.copy()
    for t in range(T - 1, -1, -1):
        dx, dh_prev, dc_prev = lstm_cell_backward(dh, dc, caches[t], p)
        d_xs[t] = dx
        dc = dc_prev
        if t > 0:
            dh = dh_prev + d_hs[t - 1]
        else:
            dh = dh_prev
    return d_xs, LstmState(h=dh, c=dc)


@dataclass
class BiLstmOut:
    """Per-step hidden trajectories of both directions plus the summed
    terminal embedding.

    h_fwd[t] is the forward pass state after consuming x_0..x_t; h_bwd[t]
    the backward pass state after consuming x_{T-1}..x_t.  The embedding is
    h_fwd[T-1] + h_bwd[0], i.e. the terminal state of each direction.
    """

    h_fwd: np.ndarray  # (T, H, B)
    h_bwd: np.ndarray  # (T, H, B)
    embedding: np.ndarray  # (H, B)
    caches_fwd: list
    caches_bwd: list


def bilstm_forward(xs: np.ndarray, fwd: LstmParams, bwd: LstmParams) -> BiLstmOut:
    if fwd.hidden_size != bwd.hidden_size:
        raise ShapeError(f"direction hidden sizes differ: {fwd.hidden_size} vs {bwd.hidden_size}")
    batch = xs.shape[2]
    h_f, _, caches_f = lstm_sequence(xs, zero_state(fwd.hidden_size, batch), fwd)
    h_b_rev, _, caches_b = lstm_sequence(xs[::-1], zero_state(bwd.hidden_size, batch), bwd)
    h_b = h_b_rev[::-1]
    return BiLstmOut(
        h_fwd=h_f,
        h_bwd=h_b,
        embedding=h_f[-1] + h_b[0],
        caches_fwd=caches_f,
        caches_bwd=caches_b,
    )


def bilstm_backward(
    out: BiLstmOut,
    d_h_fwd: np.ndarray,
    d_h_bwd: np.ndarray,
    d_embedding: np.ndarray | None,
    fwd: LstmParams,
    bwd: LstmParams,
) -> np.ndarray:
    """Backward through both directions; returns d_xs of shape (T, D, B).

    d_h_fwd / d_h_bwd carry per-step upstream gradients (zeros where a step
    is unused); d_embedding is added onto each direction's terminal state.
    """
    d_f = d_h_fwd.copy()
    d_b = d_h_bwd.copy()
    if d_embedding is not None:
        d_f[-1] += d_embedding
        d_b[0] += d_embedding
    d_xs_f, _ = lstm_sequence_backward(d_f, None, out.caches_fwd, fwd)
    d_xs_b_rev, _ = lstm_sequence_backward(d_b[::-1], None, out.caches_bwd, bwd)
    return d_xs_f + d_xs_b_rev[::-1]


@dataclass
class MlpParams:
    """One hidden layer, tanh activation, linear output."""

    w1: Param
    b1: Param
    w2: Param
    b2: Param


def init_mlp_params(params: ParamSet, prefix: str, d_in: int, hidden: int, d_out: int, rng) -> MlpParams:
    b1 = 1.0 / np.sqrt(d_in)
    b2 = 1.0 / np.sqrt(hidden)
    return MlpParams(
        w1=params.add(f"{prefix}.w1", rng.uniform(-b1, b1, size=(hidden, d_in))),
        b1=params.add(f"{prefix}.b1", np.zeros((hidden, 1))),
        w2=params.add(f"{prefix}.w2", rng.uniform(-b2, b2, size=(d_out, hidden))),
        b2=params.add(f"{prefix}.b2", np.zeros((d_out, 1))),
    )


def mlp_params_from_set(params: ParamSet, prefix: str) -> MlpParams:
    return MlpParams(
        w1=params[f"{prefix}.w1"],
        b1=params[f"{prefix}.b1"],
        w2=params[f"{prefix}.w2"],
        b2=params[f"{prefix}.b2"],
    )


def mlp_forward(x: np.ndarray, p: MlpParams):
    """w2 @ tanh(w1 @ x + b1) + b2 for x of shape (D_in, B)."""
    if x.shape[0] != p.w1.value.shape[1]:
        raise ShapeError(f"mlp input dim {x.shape[0]} != expected {p.w1.value.shape[1]}")
    a = np.tanh(p.w1.value @ x + p.b1.value)
    out = p.w2.value @ a + p.b2.value
    return out, (x, a)


def mlp_backward(d_out: np.ndarray, cache, p: MlpParams) -> np.ndarray:
    x, a = cache
    p.w2.grad += d_out @ a.T
    p.b2.grad += d_out.sum(axis=1, keepdims=True)
    da = (p.w2.value.T @ d_out) * (1.0 - a * a)
    p.w1.grad += da @ x.T
    p.b1.grad += da.sum(axis=1, keepdims=True)
    return p.w1.value.T @ da
