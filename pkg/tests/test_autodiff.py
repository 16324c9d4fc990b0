import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from starec import autodiff as ad
from oracles import numeric_grad, rel_error


def check_op(build, *shapes, seed=0, tol=1e-6, positive=False):
    """Compare tape gradients of ``sum(build(*params) * weights)`` with central differences."""
    rng = np.random.default_rng(seed)
    params = []
    for k, shape in enumerate(shapes):
        v = rng.uniform(0.5, 1.5, shape) if positive else rng.normal(size=shape)
        params.append(ad.Parameter(v, f"p{k}"))
    out_shape = build(*params).shape
    weights = rng.normal(size=out_shape)

    def loss_value():
        return float(np.sum(build(*params).value * weights))

    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.mul(build(*params), weights))
    ad.backward_gradients(tape, loss)
    for p in params:
        numeric = numeric_grad(loss_value, p.value)
        assert rel_error(p.grad, numeric, floor=1e-6).max() < tol, p.name


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (3, 1)]),
    ("mul", lambda a, b: ad.mul(a, b), [(2, 3, 4), (4,)]),
    ("sigmoid", lambda a: ad.sigmoid(a), [(3, 4)]),
    ("tanh", lambda a: ad.tanh(a), [(3, 4)]),
    ("matmul2d", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    ("matmul3d", lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)]),
    ("batched_dot", lambda x, q: ad.batched_dot(x, q), [(2, 5, 3), (2, 3)]),
    ("reduce_sum", lambda a: ad.reduce_sum(a, axis=1), [(3, 4, 2)]),
    ("reduce_sum_keep", lambda a: ad.reduce_sum(a, axis=-1, keepdims=True), [(3, 4)]),
    ("softmax", lambda a: ad.softmax(a), [(3, 5)]),
    ("softmax_masked", lambda a: ad.softmax(a, mask=np.array([[True, False, True, True]] * 2)), [(2, 4)]),
    ("cosine", lambda a, b: ad.cosine(a, b), [(3, 4), (3, 4)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    ("stack", lambda a, b: ad.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    ("index", lambda a: ad.index(a, (slice(None), 2)), [(3, 4)]),
    # slices 0 and 2 are used, slice 1 is not: its gradient must come back as zeros
    ("unstack", lambda a: ad.concat([ad.mul(ad.unstack(a)[0], 2.0), ad.unstack(a)[2]], axis=-1), [(2, 3, 4)]),
    ("take_rows", lambda t: ad.take_rows(t, np.array([[0, 2], [2, 2]])), [(4, 3)]),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
])
def test_elementary_op_gradients_match_finite_differences(name, build, shapes):
    check_op(build, *shapes)


def test_relu_gradient_away_from_the_kink():
    check_op(lambda a: ad.relu(ad.sub(a, 1.0)), (3, 4), positive=True, seed=1)


def test_dropout_gradient_uses_the_same_mask():
    rng_state = np.random.default_rng(5).bit_generator.state

    def build(a):
        r = np.random.default_rng(0)
        r.bit_generator.state = rng_state
        return ad.dropout(a, 0.5, r, training=True)

    check_op(build, (4, 6))


def test_log_loss_gradient_and_value():
    z = ad.Parameter(np.array([0.3, -1.2, 2.0]), "z")
    y = np.array([1.0, 0.0, 1.0])
    with ad.Tape() as tape:
        loss = ad.log_loss_from_logits(z, y)
    ad.backward_gradients(tape, loss)
    p = 1 / (1 + np.exp(-z.value))
    expected = -np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert loss.value == pytest.approx(expected, rel=1e-12)
    np.testing.assert_allclose(z.grad, p - y, rtol=1e-12)


def test_log_loss_at_half_is_ln2():
    loss = ad.log_loss_from_logits(ad.Tensor(np.zeros(1)), np.ones(1))
    assert float(loss.value) == pytest.approx(np.log(2), abs=1e-15)


def test_log_loss_clamps_extreme_logits():
    loss = ad.log_loss_from_logits(ad.Tensor(np.array([1e6, -1e6])), np.array([0.0, 1.0]))
    # both terms bottom out at -log(1e-12)
    assert float(loss.value) == pytest.approx(2 * -np.log(1e-12), rel=1e-9)


def test_backward_requires_scalar_loss():
    p = ad.Parameter(np.ones(3), "p")
    with ad.Tape() as tape:
        out = ad.mul(p, 2.0)
    with pytest.raises(ValueError):
        ad.backward_gradients(tape, out)


def test_backward_reports_the_offending_op():
    p = ad.Parameter(np.ones(3), "p")
    with ad.Tape() as tape:
        bad = ad._record("broken", ad.Tensor(p.value.sum()), (p,), lambda g: (np.ones(4),))
    with pytest.raises(ad.ShapeError, match="broken"):
        ad.backward_gradients(tape, bad)


def test_operations_outside_a_tape_are_not_recorded():
    p = ad.Parameter(np.ones(2), "p")
    out = ad.mul(p, 3.0)
    assert not out.requires_grad


def test_gradients_accumulate_over_shared_inputs():
    p = ad.Parameter(np.array([2.0]), "p")
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.add(ad.mul(p, p), p))
    ad.backward_gradients(tape, loss)
    assert p.grad[0] == pytest.approx(2 * 2.0 + 1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 30)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_probability_vectors(x):
    out = ad.softmax(ad.Tensor(x)).value
    assert np.all((out > 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_entries_strictly_inside_unit_interval_for_moderate_inputs(x):
    out = ad.softmax(ad.Tensor(x)).value
    if x.size > 1:
        assert np.all((out > 0) & (out < 1))
    assert abs(out.sum() - 1) < 1e-9


def test_softmax_with_everything_masked_returns_zeros():
    out = ad.softmax(ad.Tensor(np.ones((1, 3))), mask=np.zeros((1, 3), dtype=bool)).value
    np.testing.assert_array_equal(out, 0.0)


def test_cosine_of_zero_vector_is_zero():
    out = ad.cosine(ad.Tensor(np.zeros((1, 3))), ad.Tensor(np.ones((1, 3)))).value
    assert out[0] == 0.0


def test_sgd_applies_weight_decay_and_clears_gradients():
    p = ad.Parameter(np.array([1.0, -2.0]), "p")
    p.grad[:] = [0.5, 0.5]
    ad.sgd_update([p], lr=0.1, l2=0.01)
    np.testing.assert_allclose(p.value, [1.0 - 0.1 * (0.5 + 0.01), -2.0 - 0.1 * (0.5 - 0.02)])
    assert np.all(p.grad == 0)


def test_l2_with_zero_gradient_strictly_shrinks_the_norm():
    p = ad.Parameter(np.array([3.0, -4.0]), "p")
    norms = []
    for _ in range(5):
        ad.sgd_update([p], lr=0.1, l2=0.5)
        norms.append(np.linalg.norm(p.value))
    assert all(b < a for a, b in zip([5.0] + norms, norms))


def test_sgd_rejects_nonpositive_learning_rate():
    with pytest.raises(ValueError):
        ad.sgd_update([ad.Parameter(np.ones(1), "p")], lr=0.0)


def test_adam_moves_against_the_gradient():
    p = ad.Parameter(np.array([1.0]), "p")
    opt = ad.Adam()
    p.grad[:] = 2.0
    opt.step([p], lr=0.1)
    assert p.value[0] == pytest.approx(0.9, rel=1e-6)


def test_parameter_store_round_trip_and_shape_check():
    store = ad.ParameterStore()
    store.add("a", np.arange(6.0).reshape(2, 3))
    state = store.state_dict()
    store["a"].value += 1
    store.load_state_dict(state)
    np.testing.assert_array_equal(store["a"].value, np.arange(6.0).reshape(2, 3))
    with pytest.raises(ad.ShapeError):
        store.load_state_dict({"a": np.zeros(3)})
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))


def test_gradient_of_sum_is_ones():
    p = ad.Parameter(np.array([0.3, -2.0, 5.0]), "p")
    with ad.Tape() as tape:
        loss = ad.reduce_sum(p)
    ad.backward_gradients(tape, loss)
    np.testing.assert_array_equal(p.grad, [1.0, 1.0, 1.0])


def test_sigmoid_slope_at_zero_is_a_quarter():
    x = ad.Parameter(np.zeros(1), "x")
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.sigmoid(x))
    ad.backward_gradients(tape, loss)
    assert x.grad[0] == 0.25


@pytest.mark.parametrize("v,grad,lr,l2,expected", [
    (1.0, 0.5, 0.1, 0.0, 0.95),
    (1.0, 0.0, 0.1, 4e-5, 0.999996),
    (-3.7, 0.0, 7.0, 0.0, -3.7),
])
def test_sgd_update_examples(v, grad, lr, l2, expected):
    p = ad.Parameter(np.array([v]), "p")
    p.grad[:] = grad
    ad.sgd_update([p], lr=lr, l2=l2)
    assert p.value[0] == pytest.approx(expected, abs=1e-15)


def test_zero_grad_resets_gradients():
    store = ad.ParameterStore()
    p = store.add("w", np.ones(3))
    p.grad[:] = 4.0
    store.zero_grad()
    assert np.all(p.grad == 0) and p.grad.shape == p.value.shape


def test_forward_and_backward_are_deterministic():
    def run():
        rng = np.random.default_rng(42)
        a = ad.Parameter(rng.normal(size=(3, 4)), "a")
        b = ad.Parameter(rng.normal(size=(4, 2)), "b")
        with ad.Tape() as tape:
            out = ad.reduce_sum(ad.tanh(ad.matmul(a, ad.dropout(b, 0.5, rng, True))))
        ad.backward_gradients(tape, out)
        return out.value, a.grad.copy(), b.grad.copy()

    for x, y in zip(run(), run()):
        np.testing.assert_array_equal(x, y)
