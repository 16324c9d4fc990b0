import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starec import autodiff as ad
from starec.sequence import (LABEL_UNKNOWN, TimeAwareWeights, decay_factor, encode_sequence,
                             label_input, label_weights, sequence_decay, target_label_weights,
                             time_aware_cell)
from oracles import numeric_grad, rel_error


def weights(d_in=3, d_h=4, seed=0, scale=0.5, prefix="net"):
    store = ad.ParameterStore()
    return store, TimeAwareWeights(store, prefix, d_in, d_h, np.random.default_rng(seed), scale)


def random_batch(n=2, length=5, d_in=3, seed=1, pad=1):
    rng = np.random.default_rng(seed)
    mask = np.ones((n, length), dtype=bool)
    mask[0, :pad] = False
    x = rng.normal(size=(n, length, d_in)) * mask[:, :, None]
    decay = rng.uniform(0.2, 1.0, size=(n, length))
    return x, decay, mask


def first_step(w, x, decay, mask):
    inputs = ad.Tensor(x)
    proj = tuple(ad.Tensor(x[:, 0] @ W.value) for W in (w.W_f, w.W_i, w.W_cp))
    h0 = ad.Tensor(np.zeros((x.shape[0], w.hidden_dim)))
    return time_aware_cell(w, proj, h0, decay[:, 0], inputs, mask, 0)


# ---------------------------------------------------------------- decay


def test_unit_gap_gives_no_decay_in_reciprocal_mode():
    assert decay_factor(1, "reciprocal") == 1.0


def test_zero_gap_is_clamped_to_one_in_log_mode():
    assert decay_factor(0, "log") == 1.0
    assert decay_factor(1, "log") == 1.0


def test_decay_values():
    np.testing.assert_allclose(decay_factor([2, 4], "reciprocal"), [0.5, 0.25])
    np.testing.assert_allclose(decay_factor([3], "log"), [1 / np.log(np.e + 2)])


def test_unknown_decay_mode():
    with pytest.raises(ValueError):
        decay_factor(2, "linear")


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.sampled_from(["reciprocal", "log"]))
def test_decay_is_monotone_and_bounded(a, b, mode):
    lo, hi = sorted((a, b))
    d_lo, d_hi = decay_factor(lo, mode), decay_factor(hi, mode)
    assert 0 < d_hi <= d_lo <= 1


@settings(max_examples=50, deadline=None)
@given(st.floats(1, 1e4), st.floats(1, 1e4), st.integers(0, 1000))
def test_decayed_short_term_memory_shrinks_with_the_gap(a, b, seed):
    c_short = np.random.default_rng(seed).uniform(-1, 1, 4)
    lo, hi = sorted((a, b))
    assert np.all(np.abs(c_short * decay_factor(hi, "reciprocal"))
                  <= np.abs(c_short * decay_factor(lo, "reciprocal")))


def test_sequence_decay_uses_gaps_between_real_positions():
    ts = np.array([[0.0, 3.0, 5.0, 9.0]])
    mask = np.array([[False, True, True, True]])
    np.testing.assert_allclose(sequence_decay(ts, mask, "reciprocal"), [[1, 1, 0.5, 0.25]])
    np.testing.assert_array_equal(sequence_decay(ts, mask, "reciprocal", enabled=False), 1.0)


# ---------------------------------------------------------------- labels


def test_label_inputs():
    table = np.arange(9.0).reshape(3, 3)
    e = np.array([7.0, 8.0])
    np.testing.assert_array_equal(label_input(e, 1, table, is_target=False, use_labels=True),
                                  [7, 8, 3, 4, 5])
    np.testing.assert_array_equal(label_input(e, 1, table, is_target=False, use_labels=False),
                                  [7, 8, 6, 7, 8])
    rng = np.random.default_rng(0)
    rows = {tuple(label_input(e, None, table, is_target=True, use_labels=True, rng=rng)[2:])
            for _ in range(50)}
    assert rows == {(0, 1, 2), (3, 4, 5)}


def test_target_labels_are_fair_coin_flips():
    w = target_label_weights(20_000, True, np.random.default_rng(0))
    assert np.all(w.sum(1) == 1) and np.all(w[:, LABEL_UNKNOWN] == 0)
    assert abs(w[:, 1].mean() - 0.5) < 0.01
    assert np.all(target_label_weights(5, False, None)[:, LABEL_UNKNOWN] == 1)


def test_label_weights_mix_probabilities_and_mark_missing():
    w = label_weights(np.array([0.0, 1.0, 0.25, np.nan]), True)
    np.testing.assert_array_equal(w, [[1, 0, 0], [0, 1, 0], [0.75, 0.25, 0], [0, 0, 1]])
    assert np.all(label_weights(np.array([0.0, 1.0]), False)[:, LABEL_UNKNOWN] == 1)


# ---------------------------------------------------------------- cell


def test_zero_weights_are_a_fixed_point():
    _, w = weights(scale=0.0)
    x, decay, mask = random_batch()
    state = first_step(w, x, decay, mask)
    for t in (state.h, state.c, state.h_prime, state.c_prime):
        np.testing.assert_array_equal(t.value, 0.0)


def test_attention_over_real_positions_sums_to_one():
    _, w = weights()
    x, decay, mask = random_batch(length=7, pad=3)
    att = first_step(w, x, decay, mask).attention.value
    np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(att[0, :3] == 0)


def test_no_decay_leaves_the_cell_unchanged():
    _, w = weights()
    x, _, mask = random_batch()
    state = first_step(w, x, np.ones(x.shape[:2]), mask)
    np.testing.assert_array_equal(state.c.value, state.c_prime.value)


def test_without_time_awareness_the_cell_is_a_plain_gated_recurrence():
    _, w = weights()
    x, decay, mask = random_batch()
    out = encode_sequence(w, ad.Tensor(x), decay, mask, time_aware=False).value
    # reproduce a plain gated recurrence by hand
    h = np.zeros((x.shape[0], w.hidden_dim))
    sig = lambda z: 1 / (1 + np.exp(-z))
    for t in range(x.shape[1]):
        f = sig(x[:, t] @ w.W_f.value + h @ w.U_f.value)
        i = sig(x[:, t] @ w.W_i.value + h @ w.U_i.value)
        c = np.tanh(x[:, t] @ w.W_cp.value + i * (h @ w.U_cp.value))
        h = f * c + (1 - f) * h
        np.testing.assert_allclose(out[:, t], h * mask[:, t:t + 1], rtol=1e-12, atol=1e-15)


def test_length_one_sequence_is_one_cell_step():
    _, w = weights()
    x, decay, mask = random_batch(length=1, pad=0)
    out = encode_sequence(w, ad.Tensor(x), decay, mask).value
    np.testing.assert_allclose(out[:, 0], first_step(w, x, decay, mask).h.value, rtol=1e-14, atol=1e-16)


def test_padding_positions_produce_zero_outputs():
    _, w = weights()
    x, decay, mask = random_batch(length=6, pad=4)
    out = encode_sequence(w, ad.Tensor(x), decay, mask).value
    np.testing.assert_array_equal(out[0, :4], 0.0)


def test_non_finite_state_fails_with_its_position():
    _, w = weights()
    x, decay, mask = random_batch(length=4, pad=0)
    x[1, 2, 0] = np.nan
    with pytest.raises(FloatingPointError, match="position 2"):
        encode_sequence(w, ad.Tensor(x), decay, mask)


def test_full_cell_gradients_match_finite_differences():
    store, w = weights(d_in=4, d_h=4, seed=3)
    x, decay, mask = random_batch(n=2, length=5, d_in=4, seed=4, pad=2)
    xp = ad.Parameter(x.copy(), "x")
    out_w = np.random.default_rng(5).normal(size=(2, 5, 4))

    def loss_value():
        return float(np.sum(encode_sequence(w, ad.Tensor(xp.value * mask[:, :, None]), decay, mask).value * out_w))

    with ad.Tape() as tape:
        inputs = ad.mul(xp, mask[:, :, None].astype(float))
        loss = ad.reduce_sum(ad.mul(encode_sequence(w, inputs, decay, mask), out_w))
    ad.backward_gradients(tape, loss)
    for p in list(store.values()) + [xp]:
        assert rel_error(p.grad, numeric_grad(loss_value, p.value), floor=1e-7).max() < 1e-4, p.name


def test_two_networks_share_nothing_and_diverge_after_training():
    store_a, a = weights(seed=7, prefix="recent")
    store_b, b = weights(seed=7, prefix="searched")
    x, decay, mask = random_batch()
    assert not set(map(id, store_a.values())) & set(map(id, store_b.values()))
    before = [encode_sequence(n, ad.Tensor(x), decay, mask).value for n in (a, b)]
    np.testing.assert_array_equal(*before)
    for net, store, sign in ((a, store_a, 1.0), (b, store_b, -1.0)):
        with ad.Tape() as tape:
            loss = ad.reduce_sum(ad.mul(encode_sequence(net, ad.Tensor(x), decay, mask), sign))
        ad.backward_gradients(tape, loss)
        ad.sgd_update(store.values(), lr=0.1)
    after = [encode_sequence(n, ad.Tensor(x), decay, mask).value for n in (a, b)]
    assert not np.allclose(*after)
