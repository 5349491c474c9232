import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fd import numeric_grad, rel_error
from moformer import autodiff as ad
from moformer.autodiff import Adam, Tape, Tensor
from moformer.errors import NonFiniteValue, NotScalar, ShapeMismatch

PRIMITIVE_TOL = 1e-5


def check_grad(build, shapes, rng, tol=PRIMITIVE_TOL, positive=False):
    """Compare tape gradients of scalar ``build(*tensors)`` with central differences."""
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    params = [ad.parameter(a) for a in arrays]
    with Tape() as tape:
        loss = build(*params)
    analytic = tape.gradient(loss, params)

    def f():
        return float(build(*[Tensor._wrap(p.data) for p in params]).data)

    numeric = numeric_grad(f, [p.data for p in params])
    for a, n in zip(analytic, numeric):
        assert rel_error(a, n) < tol


def test_matmul_identity_and_hand_values():
    b = Tensor(np.arange(9.0).reshape(3, 3))
    assert np.array_equal((Tensor(np.eye(3)) @ b).data, b.data)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradient(rng):
    w = rng.normal(size=(4, 3))
    check_grad(lambda a, b: ((a @ b) * w).sum(), [(4, 5), (5, 3)], rng)


def test_batched_matmul_gradient(rng):
    w = rng.normal(size=(2, 3, 4, 2))
    check_grad(lambda a, b: ((a @ b) * w).sum(), [(2, 1, 4, 5), (3, 5, 2)], rng)


@pytest.mark.parametrize(
    "name,fn,positive",
    [
        ("add", lambda a, b: (a + b * 2.0).sum(), False),
        ("sub", lambda a, b: ((a - b) ** 2).sum(), False),
        ("mul", lambda a, b: (a * b).sum(), False),
        ("div", lambda a, b: (a / b).sum(), True),
    ],
)
def test_binary_elementwise_gradients(name, fn, positive, rng):
    check_grad(fn, [(3, 4), (3, 4)], rng, positive=positive)


def test_broadcast_gradient(rng):
    w = rng.normal(size=(3, 4))
    check_grad(lambda a, b: ((a + b) * (a * b) * w).sum(), [(3, 4), (4,)], rng)


@pytest.mark.parametrize(
    "fn,positive",
    [
        (lambda a: ad.exp(a).sum(), False),
        (lambda a: ad.log(a).sum(), True),
        (lambda a: ad.sqrt(a).sum(), True),
        (lambda a: (ad.sigmoid(a) * ad.softplus(a)).sum(), False),
        (lambda a: (ad.relu(a) ** 2).sum(), False),
        (lambda a: ad.mean(a * a, axis=1).sum(), False),
        (lambda a: (ad.transpose(a, (1, 0)) @ a).sum(), False),
        (lambda a: (a.reshape(2, 6) ** 3).sum(), False),
        (lambda a: (a[1:, ::2] * a[:2, 1::2]).sum(), False),
        (lambda a: (a[np.array([0, 0, 2])] ** 2).sum(), False),
        (lambda a: ad.concat([a, a * 2.0], axis=1).mean() * ad.stack([a, a], 0).sum(), False),
        (lambda a: (ad.sorted_sum(a, axis=0) ** 2).sum(), False),
    ],
)
def test_unary_and_shape_gradients(fn, positive, rng):
    check_grad(fn, [(3, 4)], rng, positive=positive)


def test_softmax_closed_forms():
    uniform = ad.softmax(Tensor(np.full((2, 4), 3.7))).data
    assert np.allclose(uniform, 0.25, atol=0, rtol=1e-15)
    y = ad.softmax_rows(Tensor([[0.0, np.log(3.0)]])).data
    assert np.allclose(y, [[0.25, 0.75]], atol=1e-15)
    big = ad.softmax(Tensor([[700.0, 699.0, 701.0]])).data
    assert np.isfinite(big).all() and abs(big.sum() - 1) < 1e-12


def test_softmax_mask_gives_exact_zero(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    mask = np.array([False, True, False, True, False])
    y = ad.softmax(x, mask).data
    assert (y[:, mask] == 0.0).all()
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax_rows(Tensor(x)).data
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12
    assert (y >= 0).all() and (y <= 1).all()


def test_softmax_gradient(rng):
    w = rng.normal(size=(4, 5))
    mask = np.zeros((4, 5), bool)
    mask[:, 3] = True
    check_grad(lambda a: (ad.softmax(a) * w).sum(), [(4, 5)], rng)
    check_grad(lambda a: (ad.softmax(a, mask) * w).sum(), [(4, 5)], rng)


def test_layer_norm_values():
    out = ad.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.array_equal(out, np.zeros((1, 3)))
    out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_gradient(rng):
    w = rng.normal(size=(2, 3, 6))
    check_grad(lambda x, g, b: (ad.layer_norm(x, g, b) * w).sum(), [(2, 3, 6), (6,), (6,)], rng)


def test_chain_rule_through_composition(rng):
    gain, bias = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    mix = rng.normal(size=(4, 4))

    def f(x, w):
        h = ad.layer_norm(ad.softplus(x @ w), gain, bias)
        return (ad.softmax(h @ ad.transpose(h)) * mix).sum() + ad.sigmoid(h).mean()

    check_grad(f, [(4, 5), (5, 3)], rng)


def test_backward_trivial_gradients(rng):
    w = ad.parameter(rng.normal(size=(3, 2)))
    unused = ad.parameter(rng.normal(size=(2,)))
    with Tape():
        s = w.sum()
    grads = ad.backward(s, {"w": w, "unused": unused})
    assert np.array_equal(grads["w"], np.ones((3, 2)))
    assert np.array_equal(grads["unused"], np.zeros(2))
    with Tape():
        sq = (w * w).sum()
    assert np.allclose(ad.backward(sq, {"w": w})["w"], 2 * w.data, rtol=0, atol=0)


def test_backward_requires_scalar(rng):
    w = ad.parameter(rng.normal(size=(3,)))
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(NotScalar):
        tape.gradient(y, [w])


def test_tape_visits_each_node_once(rng):
    w = ad.parameter(rng.normal(size=(2, 2)))
    with Tape() as tape:
        h = w @ w
        loss = (h + h).sum()
    # reused intermediate contributes twice, each node replayed once
    (g,) = tape.gradient(loss, [w])
    expected = 2 * (np.ones((2, 2)) @ w.data.T + w.data.T @ np.ones((2, 2)))
    assert np.allclose(g, expected, rtol=1e-14)
    assert [n[0]._node for n in tape.nodes] == list(range(len(tape)))


def test_no_tape_means_no_recording(rng):
    w = ad.parameter(rng.normal(size=(2,)))
    y = (w * 3.0).sum()
    assert y._tape is None


def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteValue):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteValue):
        Tensor([np.inf])


def test_adam_zero_gradient_no_decay_keeps_params(rng):
    p = ad.parameter(rng.normal(size=(3, 3)))
    before = p.data.copy()
    opt = Adam([({"p": p}, 0.1)])
    for _ in range(5):
        opt.step({"p": np.zeros((3, 3))})
    assert np.array_equal(p.data, before)


def test_adam_first_step_is_signed_lr(rng):
    p = ad.parameter(rng.normal(size=(10,)))
    g = rng.normal(size=(10,))
    before = p.data.copy()
    Adam([({"p": p}, 1e-3)]).step({"p": g})
    assert np.allclose(before - p.data, 1e-3 * np.sign(g), rtol=1e-6)


def test_adam_weight_decay_is_added_to_gradient():
    p = ad.parameter(np.array([2.0]))
    opt = Adam([({"p": p}, 0.0)], weight_decay=0.5)
    opt.step({"p": np.array([1.0])})
    # m after one step holds (1 - beta1) * (g + wd * theta)
    assert np.isclose(opt.state.m["p"][0], 0.1 * (1.0 + 0.5 * 2.0))


def test_adam_group_learning_rates(rng):
    a, b = ad.parameter(rng.normal(size=3)), ad.parameter(rng.normal(size=3))
    a0, b0 = a.data.copy(), b.data.copy()
    opt = Adam([({"a": a}, 0.0), ({"b": b}, 0.01)], weight_decay=1e-6)
    opt.step({"a": np.ones(3), "b": np.ones(3)})
    assert np.array_equal(a.data, a0)
    assert not np.array_equal(b.data, b0)


def test_adam_shape_mismatch(rng):
    p = ad.parameter(rng.normal(size=(3,)))
    with pytest.raises(ShapeMismatch):
        Adam([({"p": p}, 0.1)]).step({"p": np.zeros(4)})


def test_adam_deterministic_replay():
    def run():
        rng = np.random.default_rng(7)
        w = ad.parameter(rng.normal(size=(4, 3)))
        x = rng.normal(size=(5, 4))
        opt = Adam([({"w": w}, 0.01)], weight_decay=1e-6)
        for _ in range(10):
            with Tape():
                loss = (ad.relu(Tensor(x) @ w) ** 2).mean()
            opt.step(ad.backward(loss, {"w": w}))
        return w.data

    assert np.array_equal(run(), run())
