import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radsprl.nn import (
    AdamState,
    LSTMParams,
    NonFiniteGradientError,
    adam_step,
    bilstm,
    bilstm_backward,
    bilstm_forward,
    clip_global_norm,
    dropout,
    grad_check,
    linear,
    linear_backward,
    logsumexp,
    lstm_backward,
    lstm_cell,
    lstm_forward,
    sigmoid,
)


def _sig(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def scalar_cell(x, h_prev, c_prev, p: LSTMParams):
    """Element-by-element LSTM step written with plain Python loops."""
    h = p.hidden
    z = []
    for r in range(4 * h):
        acc = p.b[r]
        for j in range(len(x)):
            acc += p.W[r, j] * x[j]
        for j in range(h):
            acc += p.U[r, j] * h_prev[j]
        z.append(acc)
    h_new, c_new = [], []
    for k in range(h):
        i = _sig(z[k])
        f = _sig(z[h + k])
        g = math.tanh(z[2 * h + k])
        o = _sig(z[3 * h + k])
        c = f * c_prev[k] + i * g
        c_new.append(c)
        h_new.append(o * math.tanh(c))
    return h_new, c_new


def scalar_run(seq, p: LSTMParams):
    h, c = [0.0] * p.hidden, [0.0] * p.hidden
    out = []
    for x in seq:
        h, c = scalar_cell(x, h, c, p)
        out.append(h)
    return out


def random_params(rng, d, h, scale=0.5):
    return LSTMParams(
        rng.normal(0, scale, (4 * h, d)), rng.normal(0, scale, (4 * h, h)), rng.normal(0, scale, 4 * h)
    )


# ---------------------------------------------------------------------------
# elementwise helpers
# ---------------------------------------------------------------------------


def test_sigmoid_matches_logistic():
    # the tanh form is accurate in absolute terms; deep in the negative tail
    # its relative accuracy degrades, which is harmless for gating
    z = np.linspace(-30, 30, 61)
    np.testing.assert_allclose(sigmoid(z), [_sig(v) for v in z], rtol=1e-14, atol=1e-16)


def test_logsumexp_is_stable():
    assert logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000 + math.log(2))
    np.testing.assert_allclose(logsumexp(np.array([[0.0, 0.0], [-1e4, 0.0]]), axis=1), [math.log(2), 0.0])


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


def test_cell_all_zero_gives_zero_state():
    p = LSTMParams(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    h, c = lstm_cell(np.zeros(3), np.zeros(2), np.zeros(2), p)
    assert np.all(h == 0) and np.all(c == 0)


def test_cell_forget_bias_scales_previous_cell():
    p = LSTMParams(np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))
    p.b[2:4] = 1.0
    v = np.array([0.7, -1.3])
    _, c = lstm_cell(np.zeros(3), np.zeros(2), v, p)
    np.testing.assert_allclose(c, _sig(1.0) * v, rtol=1e-14)


def test_cell_matches_scalar_reference():
    rng = np.random.default_rng(3)
    p = random_params(rng, 3, 3)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    h, c = lstm_cell(x, h0, c0, p)
    h_ref, c_ref = scalar_cell(x, h0, c0, p)
    np.testing.assert_allclose(h, h_ref, rtol=1e-12)
    np.testing.assert_allclose(c, c_ref, rtol=1e-12)
    assert np.all(np.abs(h) < 1)


def test_cell_shape_mismatch():
    p = LSTMParams.init(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        lstm_cell(np.zeros(4), np.zeros(2), np.zeros(2), p)


def test_init_sets_forget_bias():
    p = LSTMParams.init(np.random.default_rng(0), 5, 4)
    assert p.W.shape == (16, 5) and p.U.shape == (16, 4)
    np.testing.assert_array_equal(p.b, [0] * 4 + [1] * 4 + [0] * 8)


# ---------------------------------------------------------------------------
# sequence encoders
# ---------------------------------------------------------------------------


def test_padded_batch_matches_scalar_reference_per_column():
    rng = np.random.default_rng(4)
    p = random_params(rng, 3, 2)
    lengths = np.array([2, 5, 1, 5])
    xs = rng.normal(size=(5, 4, 3))
    out, _ = lstm_forward(xs, p, lengths)
    for b, n in enumerate(lengths):
        ref = scalar_run(xs[:n, b], p)
        np.testing.assert_allclose(out[:n, b], ref, rtol=1e-12, atol=1e-14)
        # past its length a column carries its last state
        for t in range(n, 5):
            np.testing.assert_array_equal(out[t, b], out[n - 1, b])


def test_bilstm_length_one_halves_agree():
    rng = np.random.default_rng(5)
    p = random_params(rng, 3, 2)
    (out,) = bilstm([rng.normal(size=3)], p, p)
    np.testing.assert_allclose(out[:2], out[2:])


def test_bilstm_reversal_symmetry():
    rng = np.random.default_rng(6)
    fwd, bwd = random_params(rng, 3, 2), random_params(rng, 3, 2)
    seq = list(rng.normal(size=(4, 3)))
    a = np.array(bilstm(seq, fwd, bwd))
    b = np.array(bilstm(seq[::-1], bwd, fwd))
    np.testing.assert_allclose(a[:, :2], b[::-1, 2:], rtol=1e-12)
    np.testing.assert_allclose(a[:, 2:], b[::-1, :2], rtol=1e-12)


def test_bilstm_matches_scalar_reference():
    rng = np.random.default_rng(7)
    fwd, bwd = random_params(rng, 3, 2), random_params(rng, 3, 2)
    seq = list(rng.normal(size=(3, 3)))
    out = np.array(bilstm(seq, fwd, bwd))
    ref_f = scalar_run(seq, fwd)
    ref_b = scalar_run(seq[::-1], bwd)[::-1]
    np.testing.assert_allclose(out, np.hstack([ref_f, ref_b]), rtol=1e-12)
    assert out.shape == (3, 4)


def test_bilstm_empty_sequence():
    p = LSTMParams.init(np.random.default_rng(0), 3, 2)
    with pytest.raises(ValueError):
        bilstm([], p, p)


def test_bilstm_padded_final_states():
    rng = np.random.default_rng(8)
    fwd, bwd = random_params(rng, 2, 3), random_params(rng, 2, 3)
    xs = rng.normal(size=(4, 2, 2))
    lengths = np.array([4, 2])
    _, final, _ = bilstm_forward(xs, lengths, fwd, bwd)
    alone = np.array(bilstm(list(xs[:2, 1]), fwd, bwd))
    np.testing.assert_allclose(final[1], np.concatenate([alone[-1, :3], alone[0, 3:]]), rtol=1e-12)


# ---------------------------------------------------------------------------
# dropout and linear
# ---------------------------------------------------------------------------


def test_dropout_identity_cases():
    x = np.arange(6.0)
    assert dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert dropout(x, 0.5, False) is x


def test_dropout_statistics():
    x = np.ones(200_000)
    y = dropout(x, 0.5, True, np.random.default_rng(0))
    assert abs(np.mean(y != 0) - 0.5) < 0.02
    assert abs(y.mean() - 1.0) < 0.05
    assert set(np.unique(y)) == {0.0, 2.0}


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        dropout(np.ones(3), 1.0, True, np.random.default_rng(0))


def test_linear_backward_matches_definition():
    rng = np.random.default_rng(9)
    x, W, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    dy = rng.normal(size=(5, 2))
    dx, dW, db = linear_backward(dy, x, W)
    np.testing.assert_allclose(dx, dy @ W.T)
    np.testing.assert_allclose(dW, x.T @ dy)
    np.testing.assert_allclose(db, dy.sum(0))
    np.testing.assert_allclose(linear(x, W, b), x @ W + b)


# ---------------------------------------------------------------------------
# Adam and clipping
# ---------------------------------------------------------------------------


def test_adam_first_step_is_minus_lr():
    params = {"w": np.array([0.0])}
    adam_step(params, {"w": np.array([1.0])}, AdamState(lr=0.01))
    assert params["w"][0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": np.array([1.5, -2.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(params["w"], [1.5, -2.0])


def test_adam_epoch_decay():
    state = AdamState(lr=0.01, decay=0.99)
    assert state.effective_lr == 0.01
    state.next_epoch()
    assert state.effective_lr == pytest.approx(0.01 * 0.99)


def test_adam_rejects_non_finite_gradient_by_name():
    params = {"proj.W": np.zeros(2)}
    with pytest.raises(NonFiniteGradientError, match="proj.W"):
        adam_step(params, {"proj.W": np.array([1.0, np.nan])}, AdamState())


def test_adam_matches_textbook_formula_over_steps():
    rng = np.random.default_rng(10)
    w = rng.normal(size=4)
    params = {"w": w.copy()}
    state = AdamState(lr=0.05)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(params, {"w": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], w, rtol=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8), st.floats(0.1, 10))
def test_clip_global_norm_bounds_norm(values, max_norm):
    grads = {"a": np.array(values)}
    before = clip_global_norm(grads, max_norm)
    after = float(np.linalg.norm(grads["a"]))
    assert after <= max_norm * (1 + 1e-12) or after == pytest.approx(before)
    assert before == pytest.approx(float(np.linalg.norm(values)))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def test_grad_check_quadratic():
    rng = np.random.default_rng(11)
    theta = {"t": rng.normal(size=300)}
    res = grad_check(lambda: 0.5 * float(theta["t"] @ theta["t"]), theta, {"t": theta["t"].copy()})
    assert res.max_error < 1e-8
    assert res.n_checked["t"] == 200


def test_grad_check_linear_layer():
    rng = np.random.default_rng(12)
    x, dy = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    params = {"W": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}

    def loss():
        return float(np.sum(linear(x, params["W"], params["b"]) * dy))

    _, dW, db = linear_backward(dy, x, params["W"])
    assert grad_check(loss, params, {"W": dW, "b": db}).max_error < 1e-7


def test_grad_check_detects_wrong_gradient():
    theta = {"t": np.array([1.0, 2.0])}
    res = grad_check(lambda: float(theta["t"] @ theta["t"]), theta, {"t": theta["t"].copy()})
    assert res.max_error > 0.1


def test_grad_check_restores_parameters():
    theta = {"t": np.array([0.3, -0.4])}
    before = theta["t"].copy()
    grad_check(lambda: float(np.sum(theta["t"] ** 3)), theta, {"t": 3 * theta["t"] ** 2}, stencil=4)
    np.testing.assert_array_equal(theta["t"], before)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_bilstm_gradients_with_padding(seed):
    rng = np.random.default_rng(seed)
    fwd, bwd = random_params(rng, 3, 2), random_params(rng, 3, 2)
    xs = rng.normal(size=(4, 3, 3))
    lengths = np.array([4, 1, 3])
    w_out, w_fin = rng.normal(size=(4, 3, 4)), rng.normal(size=(3, 4))
    valid = (np.arange(4)[:, None] < lengths)[..., None]

    params = {"x": xs}
    for prefix, p in (("f", fwd), ("b", bwd)):
        params.update({f"{prefix}.W": p.W, f"{prefix}.U": p.U, f"{prefix}.b": p.b})

    def loss():
        out, final, _ = bilstm_forward(params["x"], lengths, fwd, bwd)
        return float(np.sum(out * w_out * valid) + np.sum(final * w_fin))

    _, _, cache = bilstm_forward(xs, lengths, fwd, bwd)
    dx, gf, gb = bilstm_backward(w_out * valid, w_fin, fwd, bwd, cache)
    analytic = {"x": dx * valid}
    for prefix, g in (("f", gf), ("b", gb)):
        analytic.update({f"{prefix}.W": g.W, f"{prefix}.U": g.U, f"{prefix}.b": g.b})
    res = grad_check(loss, params, analytic, eps=1e-5)
    assert res.max_error < 1e-6, res.per_group


def test_lstm_backward_ignores_padding_positions():
    rng = np.random.default_rng(13)
    p = random_params(rng, 2, 2)
    xs = rng.normal(size=(3, 2, 2))
    _, cache = lstm_forward(xs, p, np.array([3, 1]))
    dxs, _ = lstm_backward(np.zeros((3, 2, 2)) + 1.0, p, cache)
    assert np.all(dxs[1:, 1] == 0)
