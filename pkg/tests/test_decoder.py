import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capforge.decoder import (
    DecoderDims, DecoderParams, DecoderState, attend, backward_sequence,
    forward_sequence, init_state, lstm_batch, lstm_step, output_log_probs, pad_batch,
    backward_batch, forward_batch,
)
from capforge.training import batch_loss_and_grads, grad_check_report, random_problem

import oracles


def zero_params(V=5, m=3, H=2, D=4, a=3):
    return DecoderParams.zeros(DecoderDims(V, m, H, D, a))


def test_shapes_and_init():
    dims = DecoderDims(V=7, m=3, H=4, D=5, a=2)
    p = DecoderParams.init(dims, seed=3)
    assert p["E"].shape == (7, 3) and p["Z_f"].shape == (4, 5) and p["W_aA"].shape == (2, 5)
    assert p["L_o"].shape == (7, 3) and p["L_h"].shape == (3, 4) and p["L_z"].shape == (3, 5)
    assert all(np.all(p[k] == 0) for k in p if k.startswith("b_"))
    r = math.sqrt(6 / (4 + 5))
    assert np.abs(p["Z_i"]).max() <= r
    assert p == DecoderParams.init(dims, seed=3)
    assert p != DecoderParams.init(dims, seed=4)
    with pytest.raises(ValueError):
        DecoderDims(0, 1, 1, 1, 1)
    with pytest.raises(ValueError, match="shape"):
        DecoderParams(dims, {**p.tensors, "E": np.zeros((3, 3))})


def test_init_state_zero_params():
    st_ = init_state(np.ones((3, 4)), zero_params())
    assert np.all(st_.h == 0) and np.all(st_.c == 0)


def test_init_state_identical_rows_independent_of_L():
    p = DecoderParams.init(DecoderDims(5, 3, 2, 4, 3), seed=1)
    p["b_h0"][:] = 0.3
    r = np.array([0.1, -0.4, 0.7, 0.2])
    s1, s5 = init_state(r[None], p), init_state(np.tile(r, (5, 1)), p)
    np.testing.assert_allclose(s1.h, s5.h, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s1.c, s5.c, rtol=0, atol=1e-15)


def test_init_state_matches_scalar_arithmetic():
    p, (A, _) = random_problem(DecoderDims(5, 3, 2, 4, 3), L=3, K=2, seed=5)
    h, c = oracles.init_scalar(p, A.tolist())
    s = init_state(A, p)
    np.testing.assert_allclose(s.h, h, atol=1e-14)
    np.testing.assert_allclose(s.c, c, atol=1e-14)


def test_init_state_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        init_state(np.ones((2, 3)), zero_params(D=4))


def test_attend_identical_rows_uniform():
    p = DecoderParams.init(DecoderDims(5, 3, 2, 4, 3), seed=0)
    A = np.tile([0.3, -0.2, 0.5, 1.0], (4, 1))
    alpha, z = attend(A, np.array([0.2, -0.1]), p)
    np.testing.assert_allclose(alpha, 0.25, atol=1e-15)
    np.testing.assert_allclose(z, A[0], atol=1e-15)


def test_attend_single_row():
    p = DecoderParams.init(DecoderDims(5, 3, 2, 4, 3), seed=0)
    A = np.array([[1.0, 2.0, 3.0, 4.0]])
    alpha, z = attend(A, np.zeros(2), p)
    assert alpha.tolist() == [1.0]
    np.testing.assert_array_equal(z, A[0])


def test_attend_forced_scores_ln3_and_0():
    # score_i = 2 * tanh(A_i) with one hidden unit: rows chosen so scores are (ln 3, 0)
    p = zero_params(D=1, a=1)
    p["W_aA"][0, 0] = 1.0
    p["v_a"][0] = 2.0
    A = np.array([[math.atanh(math.log(3) / 2)], [0.0]])
    alpha, z = attend(A, np.zeros(2), p)
    np.testing.assert_allclose(alpha, [0.75, 0.25], rtol=1e-14)
    np.testing.assert_allclose(z, [0.75 * A[0, 0]], rtol=1e-14)


def test_attend_matches_scalar():
    p, (A, _) = random_problem(DecoderDims(5, 3, 4, 3, 5), L=4, K=2, seed=2)
    h = np.random.default_rng(0).normal(size=4)
    alpha, z = attend(A, h, p)
    a_ref, z_ref = oracles.attend_scalar(p, A.tolist(), h.tolist())
    np.testing.assert_allclose(alpha, a_ref, atol=1e-14)
    np.testing.assert_allclose(z, z_ref, atol=1e-14)


def test_lstm_zero_params_zero_cell():
    p = zero_params(H=3)
    new = lstm_step(1, DecoderState(np.zeros(3), np.zeros(3)), np.zeros(4), p)
    assert np.all(new.c == 0) and np.all(new.h == 0)


def test_lstm_zero_params_unit_cell():
    p = zero_params(H=3)
    new = lstm_step(0, DecoderState(np.zeros(3), np.ones(3)), np.zeros(4), p)
    np.testing.assert_allclose(new.c, 0.5, rtol=1e-15)
    np.testing.assert_allclose(new.h, 0.5 * math.tanh(0.5), rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_matches_scalar_oracle(seed):
    p, _ = random_problem(DecoderDims(6, 3, 4, 5, 2), L=2, K=2, seed=seed)
    rng = np.random.default_rng(seed)
    h, c, z = rng.normal(size=4), rng.normal(size=4), rng.normal(size=5)
    w = int(rng.integers(6))
    new = lstm_step(w, DecoderState(h, c), z, p)
    h_ref, c_ref = oracles.lstm_step_scalar(p, w, h.tolist(), c.tolist(), z.tolist())
    np.testing.assert_allclose(new.h, h_ref, atol=1e-14)
    np.testing.assert_allclose(new.c, c_ref, atol=1e-14)


def test_lstm_rejects_bad_token():
    with pytest.raises(ValueError, match="out of range"):
        lstm_step(5, DecoderState(np.zeros(2), np.zeros(2)), np.zeros(4), zero_params(V=5))


def test_output_zero_params_uniform():
    lp = output_log_probs(2, DecoderState(np.ones(2), np.ones(2)), np.ones(4), zero_params(V=5))
    np.testing.assert_allclose(lp, -math.log(5), rtol=1e-15)


def test_output_shift_invariant():
    p, _ = random_problem(DecoderDims(6, 3, 4, 5, 2), L=2, K=2, seed=1)
    state = DecoderState(np.full(4, 0.1), np.zeros(4))
    z = np.linspace(-1, 1, 5)
    before = output_log_probs(3, state, z, p)
    p["b_out"][:] += 17.5
    np.testing.assert_allclose(output_log_probs(3, state, z, p), before, atol=1e-13)


def test_output_forced_logits():
    p = zero_params(V=3, m=1)
    p["E"][0, 0] = 1.0
    p["L_o"][:, 0] = [0.0, math.log(2), math.log(3)]
    lp = output_log_probs(0, DecoderState(np.zeros(2), np.zeros(2)), np.zeros(4), p)
    np.testing.assert_allclose(np.exp(lp), [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)


def test_output_matches_scalar():
    p, _ = random_problem(DecoderDims(6, 3, 4, 5, 2), L=2, K=2, seed=4)
    h, z = np.linspace(-0.5, 0.5, 4), np.linspace(1, -1, 5)
    lp = output_log_probs(2, DecoderState(h, np.zeros(4)), z, p)
    np.testing.assert_allclose(lp, oracles.output_scalar(p, 2, h.tolist(), z.tolist()), atol=1e-13)


def test_forward_sequence_traces():
    p, (A, target) = random_problem(DecoderDims(9, 4, 5, 6, 3), L=4, K=6, seed=0)
    traces = forward_sequence(A, target, p, start_id=0)
    assert len(traces) == 6
    for tr in traces:
        assert abs(tr.alpha.sum() - 1) < 1e-10
        assert abs(np.exp(tr.log_probs).sum() - 1) < 1e-8
    again = forward_sequence(A, target, p, start_id=0)
    for a, b in zip(traces, again):
        assert a.alpha.tobytes() == b.alpha.tobytes()
        assert a.log_probs.tobytes() == b.log_probs.tobytes()
        assert a.state.h.tobytes() == b.state.h.tobytes()
    # the scalar re-evaluation reproduces the total log-probability
    total = sum(tr.log_probs[w] for tr, w in zip(traces, target))
    assert total == pytest.approx(oracles.sequence_log_prob(p, A, target, 0), abs=1e-12)


def test_forward_sequence_rejects_empty():
    p, (A, _) = random_problem(DecoderDims(9, 4, 5, 6, 3), L=4, K=2, seed=0)
    with pytest.raises(ValueError):
        forward_sequence(A, [], p, 0)


def test_unused_parameters_get_zero_gradient():
    p, (A, _) = random_problem(DecoderDims(8, 3, 4, 5, 3), L=1, K=3, seed=0)
    target = [2, 3, 5, 0]
    traces = forward_sequence(A[:1], target, p, start_id=0)
    g = backward_sequence(A[:1], target, p, traces, lam=0.0)
    # inputs are the start token 0, then 2, 3 and 5; the final target is never fed back
    consumed = {0, 2, 3, 5}
    for v in range(8):
        assert np.any(g["E"][v] != 0) == (v in consumed)
    # one annotation row: attention weights are identically 1
    for name in ("W_aA", "W_ah", "b_a", "v_a"):
        assert np.all(g[name] == 0), name


def test_gradient_linear_in_examples():
    p, ex = random_problem(DecoderDims(7, 3, 4, 5, 3), L=3, K=4, seed=9)
    _, one = batch_loss_and_grads([ex], p, 1.0)
    _, two_mean = batch_loss_and_grads([ex, ex], p, 1.0)
    A, amask, W, Y, tmask = pad_batch([ex[0], ex[0]], [ex[1], ex[1]], 0)
    two_sum = backward_batch(forward_batch(A, amask, W, p), Y, tmask, p, 1.0)
    for k in one:
        np.testing.assert_allclose(two_sum[k], 2 * one[k], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(two_mean[k], one[k], rtol=1e-12, atol=1e-15)


def test_padded_batch_equals_sum_of_singles():
    dims = DecoderDims(7, 3, 4, 5, 3)
    p, ex1 = random_problem(dims, L=2, K=3, seed=1)
    _, ex2 = random_problem(dims, L=5, K=6, seed=2)
    _, g1 = batch_loss_and_grads([ex1], p, 2.0)
    _, g2 = batch_loss_and_grads([ex2], p, 2.0)
    loss, g = batch_loss_and_grads([ex1, ex2], p, 2.0)
    l1, _ = batch_loss_and_grads([ex1], p, 2.0)
    l2, _ = batch_loss_and_grads([ex2], p, 2.0)
    assert loss == pytest.approx((l1 + l2) / 2, rel=1e-13)
    for k in g:
        np.testing.assert_allclose(g[k], (g1[k] + g2[k]) / 2, rtol=1e-11, atol=1e-14)


@pytest.mark.parametrize("seed", range(12))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dims = DecoderDims(V=int(rng.integers(3, 9)), m=int(rng.integers(1, 5)), H=int(rng.integers(1, 6)),
                       D=int(rng.integers(1, 5)), a=int(rng.integers(1, 5)))
    lam = [0.0, 0.7, 5.0][seed % 3]
    p, ex = random_problem(dims, L=int(rng.integers(1, 5)), K=int(rng.integers(1, 6)), seed=seed)
    report = grad_check_report(p, ex, lam, epsilon=1e-5)
    assert max(report.values()) < 1e-4, report


def test_backward_sequence_replays_without_cache():
    p, (A, target) = random_problem(DecoderDims(6, 3, 4, 5, 2), L=3, K=4, seed=3)
    traces = forward_sequence(A, target, p, 0)
    with_cache = backward_sequence(A, target, p, traces, 1.0)
    for tr in traces:
        tr.cache = None
    with pytest.raises(ValueError, match="start_id"):
        backward_sequence(A, target, p, traces, 1.0)
    replayed = backward_sequence(A, target, p, traces, 1.0, start_id=0)
    for k in with_cache:
        np.testing.assert_array_equal(with_cache[k], replayed[k])
    with pytest.raises(ValueError):
        backward_sequence(A, target, p, traces[:-1], 1.0, start_id=0)


rows_st = st.integers(1, 6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), rows_st)
def test_permuting_rows_permutes_alpha(seed, L):
    p, (A, target) = random_problem(DecoderDims(6, 3, 4, 5, 3), L=L, K=4, seed=seed)
    perm = np.random.default_rng(seed).permutation(L)
    base = forward_sequence(A, target, p, 0)
    permuted = forward_sequence(A[perm], target, p, 0)
    for a, b in zip(base, permuted):
        np.testing.assert_allclose(b.alpha, a.alpha[perm], atol=1e-12)
        np.testing.assert_allclose(b.z, a.z, atol=1e-12)
        np.testing.assert_allclose(b.log_probs, a.log_probs, atol=1e-11)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 4.0))
def test_gates_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p, _ = random_problem(DecoderDims(6, 3, 4, 5, 3), L=2, K=2, seed=seed)
    x, h, c, z = (rng.normal(0, scale, n) for n in (3, 4, 4, 5))
    _, _, (i, f, o, g, tc) = lstm_batch(x[None], h[None], c[None], z[None], p)
    # float64 tanh rounds to exactly +-1 past |x| ~ 19, so only the closed
    # interval holds in general; the open one is checked while unsaturated
    strict = scale <= 1.0
    for gate in (i, f, o):
        assert np.all((gate >= 0) & (gate <= 1))
        if strict:
            assert np.all((gate > 0) & (gate < 1))
    for t in (g, tc):
        assert np.all((t >= -1) & (t <= 1))
        if strict:
            assert np.all((t > -1) & (t < 1))
