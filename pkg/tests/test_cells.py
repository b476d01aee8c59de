import math

import numpy as np
import pytest

from helpers import check_gradients
from fhnn import cells
from fhnn.cells import (
    LstmState,
    bilstm_backward,
    bilstm_forward,
    init_lstm_params,
    init_mlp_params,
    lstm_cell_backward,
    lstm_cell_forward,
    lstm_sequence,
    lstm_sequence_backward,
    mlp_backward,
    mlp_forward,
    zero_state,
)
from fhnn.numerics import ParamSet, ShapeError


# --- scalar reference oracle (independent of the vectorized cell) ----------


def scalar_lstm_step(x, h, c, w_ih, w_hh, b):
    """Pure-Python per-gate LSTM step used as the reference computation."""
    H = len(h)

    def dot(row, vec):
        return sum(row[j] * vec[j] for j in range(len(vec)))

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    pre = [dot(w_ih[r], x) + dot(w_hh[r], h) + b[r][0] for r in range(4 * H)]
    i = [sig(pre[r]) for r in range(H)]
    f = [sig(pre[H + r]) for r in range(H)]
    g = [math.tanh(pre[2 * H + r]) for r in range(H)]
    o = [sig(pre[3 * H + r]) for r in range(H)]
    c2 = [f[r] * c[r] + i[r] * g[r] for r in range(H)]
    h2 = [o[r] * math.tanh(c2[r]) for r in range(H)]
    return h2, c2


def make_params(seed, d_in, hidden):
    ps = ParamSet()
    p = init_lstm_params(ps, "cell", d_in, hidden, np.random.default_rng(seed))
    return ps, p


def zero_params(d_in, hidden):
    ps, p = make_params(0, d_in, hidden)
    for q in ps:
        q.value[...] = 0.0
    return ps, p


# --- cell forward -----------------------------------------------------------


def test_cell_zero_params_zero_state_gives_zero():
    _, p = zero_params(3, 4)
    x = np.array([[1.0], [-2.0], [0.5]])
    state, _ = lstm_cell_forward(x, zero_state(4), p)
    assert np.array_equal(state.h, np.zeros((4, 1)))
    assert np.array_equal(state.c, np.zeros((4, 1)))


def test_cell_zero_params_halves_prev_cell():
    # all gates sigmoid(0) = 0.5 and candidate tanh(0) = 0, so
    # c' = 0.5 * c_prev and h' = 0.5 * tanh(0.5 * c_prev)
    _, p = zero_params(2, 3)
    c_prev = np.array([[1.0], [2.0], [-0.5]])
    prev = LstmState(h=np.zeros((3, 1)), c=c_prev)
    state, _ = lstm_cell_forward(np.ones((2, 1)), prev, p)
    assert np.allclose(state.c, 0.5 * c_prev)
    assert np.allclose(state.h, 0.5 * np.tanh(0.5 * c_prev))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cell_matches_scalar_reference(seed):
    rng = np.random.default_rng(100 + seed)
    ps, p = make_params(seed, 3, 4)
    x = rng.standard_normal((3, 1))
    prev = LstmState(h=rng.standard_normal((4, 1)) * 0.5, c=rng.standard_normal((4, 1)))
    state, _ = lstm_cell_forward(x, prev, p)
    h_ref, c_ref = scalar_lstm_step(
        x[:, 0].tolist(),
        prev.h[:, 0].tolist(),
        prev.c[:, 0].tolist(),
        p.w_ih.value.tolist(),
        p.w_hh.value.tolist(),
        p.b.value.tolist(),
    )
    assert np.allclose(state.h[:, 0], h_ref, atol=1e-12)
    assert np.allclose(state.c[:, 0], c_ref, atol=1e-12)


def test_cell_shape_mismatch():
    _, p = make_params(0, 3, 4)
    with pytest.raises(ShapeError):
        lstm_cell_forward(np.zeros((5, 1)), zero_state(4), p)


# --- cell backward ----------------------------------------------------------


def test_cell_backward_zero_upstream():
    ps, p = make_params(1, 3, 4)
    x = np.random.default_rng(0).standard_normal((3, 1))
    _, cache = lstm_cell_forward(x, zero_state(4), p)
    dx, dh_prev, dc_prev = lstm_cell_backward(np.zeros((4, 1)), np.zeros((4, 1)), cache, p)
    assert np.array_equal(dx, np.zeros((3, 1)))
    assert np.array_equal(dh_prev, np.zeros((4, 1)))
    assert np.array_equal(dc_prev, np.zeros((4, 1)))
    for q in ps:
        assert np.array_equal(q.grad, np.zeros_like(q.grad))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cell_gradients_vs_finite_diff(seed):
    rng = np.random.default_rng(seed)
    ps, p = make_params(seed, 3, 4)
    x = rng.standard_normal((3, 1))
    prev = LstmState(h=rng.standard_normal((4, 1)) * 0.3, c=rng.standard_normal((4, 1)) * 0.3)

    def loss(_):
        state, _ = lstm_cell_forward(x, prev, p)
        return float(np.sum(state.h))

    ps.zero_grads()
    _, cache = lstm_cell_forward(x, prev, p)
    lstm_cell_backward(np.ones((4, 1)), np.zeros((4, 1)), cache, p)
    check_gradients(loss, ps, tol=1e-5)


def test_chained_cells_shared_params_vs_finite_diff():
    rng = np.random.default_rng(9)
    ps, p = make_params(9, 2, 3)
    x1 = rng.standard_normal((2, 1))
    x2 = rng.standard_normal((2, 1))

    def loss(_):
        s1, _ = lstm_cell_forward(x1, zero_state(3), p)
        s2, _ = lstm_cell_forward(x2, s1, p)
        return float(np.sum(s2.h))

    ps.zero_grads()
    s1, c1 = lstm_cell_forward(x1, zero_state(3), p)
    _, c2 = lstm_cell_forward(x2, s1, p)
    _, dh1, dc1 = lstm_cell_backward(np.ones((3, 1)), np.zeros((3, 1)), c2, p)
    lstm_cell_backward(dh1, dc1, c1, p)
    check_gradients(loss, ps, tol=1e-5)


# --- sequences ----------------------------------------------------------------


def test_sequence_length_one_equals_cell():
    rng = np.random.default_rng(4)
    ps, p = make_params(4, 3, 4)
    x = rng.standard_normal((1, 3, 1))
    hs, final, _ = lstm_sequence(x, zero_state(4), p)
    cell_state, _ = lstm_cell_forward(x[0], zero_state(4), p)
    assert np.array_equal(hs[0], cell_state.h)
    assert np.array_equal(final.c, cell_state.c)


def test_sequence_zero_params_all_zero():
    _, p = zero_params(2, 3)
    xs = np.random.default_rng(0).standard_normal((6, 2, 1))
    hs, _, _ = lstm_sequence(xs, zero_state(3), p)
    assert np.array_equal(hs, np.zeros((6, 3, 1)))


def test_sequence_matches_scalar_reference():
    rng = np.random.default_rng(44)
    ps, p = make_params(44, 2, 3)
    xs = rng.standard_normal((5, 2, 1))
    hs, final, _ = lstm_sequence(xs, zero_state(3), p)
    h, c = [0.0] * 3, [0.0] * 3
    for t in range(5):
        h, c = scalar_lstm_step(
            xs[t, :, 0].tolist(), h, c, p.w_ih.value.tolist(), p.w_hh.value.tolist(), p.b.value.tolist()
        )
    assert np.allclose(final.h[:, 0], h, atol=1e-12)
    assert np.allclose(hs[-1][:, 0], h, atol=1e-12)


def test_sequence_chunked_unroll_matches_full():
    rng = np.random.default_rng(17)
    ps, p = make_params(17, 3, 5)
    xs = rng.standard_normal((9, 3, 2))
    hs_full, final_full, _ = lstm_sequence(xs, zero_state(5, 2), p)
    hs_a, mid, _ = lstm_sequence(xs[:4], zero_state(5, 2), p)
    hs_b, final_b, _ = lstm_sequence(xs[4:], mid, p)
    assert np.allclose(np.concatenate([hs_a, hs_b]), hs_full, atol=1e-14)
    assert np.allclose(final_b.c, final_full.c, atol=1e-14)


def test_sequence_rejects_empty():
    ps, p = make_params(0, 2, 2)
    with pytest.raises(ShapeError):
        lstm_sequence(np.zeros((0, 2, 1)), zero_state(2), p)


def test_hidden_states_bounded():
    rng = np.random.default_rng(23)
    ps, p = make_params(23, 2, 6)
    xs = rng.standard_normal((50, 2, 3)) * 5.0
    hs, _, _ = lstm_sequence(xs, zero_state(6, 3), p)
    assert np.all(np.abs(hs) <= 1.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sequence_gradients_vs_finite_diff(seed):
    rng = np.random.default_rng(200 + seed)
    ps, p = make_params(seed, 2, 3)
    xs = rng.standard_normal((4, 2, 1))
    coeff = rng.standard_normal((4, 3, 1))

    def loss(_):
        hs, _, _ = lstm_sequence(xs, zero_state(3), p)
        return float(np.sum(coeff * hs))

    ps.zero_grads()
    hs, _, caches = lstm_sequence(xs, zero_state(3), p)
    lstm_sequence_backward(coeff.copy(), None, caches, p)
    check_gradients(loss, ps, tol=1e-5)


# --- bidirectional layer ------------------------------------------------------


def bi_params(seed, d_in, hidden):
    ps = ParamSet()
    rng = np.random.default_rng(seed)
    fwd = init_lstm_params(ps, "fwd", d_in, hidden, rng)
    bwd = init_lstm_params(ps, "bwd", d_in, hidden, rng)
    return ps, fwd, bwd


def test_bilstm_zero_backward_params_collapse_to_forward():
    ps, fwd, bwd = bi_params(3, 2, 3)
    for name in ("bwd.w_ih", "bwd.w_hh", "bwd.b"):
        ps[name].value[...] = 0.0
    xs = np.random.default_rng(1).standard_normal((6, 2, 1))
    out = bilstm_forward(xs, fwd, bwd)
    hs_f, _, _ = lstm_sequence(xs, zero_state(3), fwd)
    assert np.allclose(out.embedding, hs_f[-1], atol=1e-14)
    assert np.array_equal(out.h_bwd, np.zeros_like(out.h_bwd))


def test_bilstm_length_one_sums_both_directions():
    ps, fwd, bwd = bi_params(5, 2, 3)
    x = np.random.default_rng(2).standard_normal((1, 2, 1))
    out = bilstm_forward(x, fwd, bwd)
    sf, _ = lstm_cell_forward(x[0], zero_state(3), fwd)
    sb, _ = lstm_cell_forward(x[0], zero_state(3), bwd)
    assert np.allclose(out.embedding, sf.h + sb.h, atol=1e-14)


def test_bilstm_time_reversal_symmetry():
    ps, fwd, bwd = bi_params(7, 3, 4)
    xs = np.random.default_rng(3).standard_normal((8, 3, 2))
    out = bilstm_forward(xs, fwd, bwd)
    flipped = bilstm_forward(np.ascontiguousarray(xs[::-1]), bwd, fwd)
    assert np.allclose(out.embedding, flipped.embedding, atol=1e-14)


def test_bilstm_direction_size_mismatch():
    ps = ParamSet()
    rng = np.random.default_rng(0)
    fwd = init_lstm_params(ps, "fwd", 2, 3, rng)
    bwd = init_lstm_params(ps, "bwd", 2, 4, rng)
    with pytest.raises(ShapeError):
        bilstm_forward(np.zeros((3, 2, 1)), fwd, bwd)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bilstm_gradients_vs_finite_diff(seed):
    rng = np.random.default_rng(300 + seed)
    ps, fwd, bwd = bi_params(seed, 2, 3)
    xs = rng.standard_normal((5, 2, 1))
    ca = rng.standard_normal((5, 3, 1))
    cb = rng.standard_normal((5, 3, 1))

    def loss(_):
        out = bilstm_forward(xs, fwd, bwd)
        return float(np.sum(ca * out.h_fwd) + np.sum(cb * out.h_bwd) + np.sum(out.embedding))

    ps.zero_grads()
    out = bilstm_forward(xs, fwd, bwd)
    bilstm_backward(out, ca, cb, np.ones((3, 1)), fwd, bwd)
    check_gradients(loss, ps, tol=1e-5)


# --- MLP ---------------------------------------------------------------------


def test_mlp_zero_params_zero_output():
    ps = ParamSet()
    p = init_mlp_params(ps, "mlp", 3, 4, 2, np.random.default_rng(0))
    for q in ps:
        q.value[...] = 0.0
    out, _ = mlp_forward(np.ones((3, 1)), p)
    assert np.array_equal(out, np.zeros((2, 1)))


def test_mlp_bias_passthrough():
    ps = ParamSet()
    p = init_mlp_params(ps, "mlp", 3, 3, 3, np.random.default_rng(0))
    p.w1.value[...] = 0.0
    p.b1.value[...] = 0.0
    p.w2.value[...] = np.eye(3)
    p.b2.value[...] = [[1.0], [2.0], [3.0]]
    out, _ = mlp_forward(np.random.default_rng(1).standard_normal((3, 1)), p)
    assert np.allclose(out, [[1.0], [2.0], [3.0]])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_gradients_vs_finite_diff(seed):
    rng = np.random.default_rng(400 + seed)
    ps = ParamSet()
    p = init_mlp_params(ps, "mlp", 3, 5, 2, rng)
    x = rng.standard_normal((3, 1))
    coeff = rng.standard_normal((2, 1))

    def loss(_):
        out, _ = mlp_forward(x, p)
        return float(np.sum(coeff * out))

    ps.zero_grads()
    out, cache = mlp_forward(x, p)
    mlp_backward(coeff.copy(), cache, p)
    check_gradients(loss, ps, tol=1e-5)
