import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from touchline import autodiff as ad
from touchline.autodiff import NotScalar, ShapeMismatch, Tape, Tensor

from oracles import central_difference, naive_matmul

RNG = np.random.default_rng(1234)


def leaf(*shape, lo=-1.0, hi=1.0, rng=RNG):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def check(f, *params, tol=1e-6):
    res = ad.gradcheck(lambda: f(*params), list(params), samples_per_param=None)
    assert res.checked > 0
    assert res.max_rel_error < tol, res


# weighted sums make the scalar depend on every output coordinate differently
def wsum(t):
    w = np.random.default_rng(t.data.size).uniform(0.5, 1.5, size=t.shape)
    return ad.sum_(ad.mul(t, Tensor(w)))


PRIMITIVES = {
    "add": (lambda a, b: wsum(ad.add(a, b)), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: wsum(ad.add(a, b)), [(2, 3, 4), (4,)]),
    "sub": (lambda a, b: wsum(ad.sub(a, b)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: wsum(ad.mul(a, b)), [(3, 4), (3, 4)]),
    "div": (lambda a, b: wsum(ad.div(a, ad.add(ad.mul(b, b), 1.0))), [(3, 4), (3, 4)]),
    "matmul_2d": (lambda a, b: wsum(ad.matmul(a, b)), [(3, 5), (5, 2)]),
    "matmul_shared": (lambda a, b: wsum(ad.matmul(a, b)), [(2, 3, 5), (5, 4)]),
    "matmul_batched": (lambda a, b: wsum(ad.matmul(a, b)), [(2, 2, 3, 5), (2, 2, 5, 4)]),
    "transpose": (lambda a: wsum(ad.transpose(a, (1, 0, 2))), [(2, 3, 4)]),
    "reshape": (lambda a: wsum(ad.reshape(a, (4, 6))), [(2, 3, 4)]),
    "concat": (lambda a, b: wsum(ad.concat([a, b], axis=1)), [(2, 3), (2, 5)]),
    "slice": (lambda a: wsum(a[:, 1:3]), [(3, 4)]),
    "softmax": (lambda a: wsum(ad.softmax(a, -1)), [(3, 5)]),
    "log_softmax": (lambda a: wsum(ad.log_softmax(a, -1)), [(3, 5)]),
    "layer_norm": (lambda a, g, b: wsum(ad.layer_norm(a, g, b)), [(3, 6), (6,), (6,)]),
    "sigmoid": (lambda a: wsum(ad.sigmoid(a)), [(3, 4)]),
    "exp": (lambda a: wsum(ad.exp(a)), [(3, 4)]),
    "log": (lambda a: wsum(ad.log(ad.add(ad.mul(a, a), 0.5))), [(3, 4)]),
    "sqrt": (lambda a: wsum(ad.sqrt(ad.add(ad.mul(a, a), 0.5))), [(3, 4)]),
    "sum_axis": (lambda a: wsum(ad.sum_(a, axis=1)), [(3, 4)]),
    "mean_axis": (lambda a: wsum(ad.mean(a, axis=0, keepdims=True)), [(3, 4)]),
    "scalar_ops": (lambda a: wsum(ad.mul(ad.add(a, 2.0), 3.0)), [(3, 4)]),
    "power": (lambda a: wsum(ad.power(ad.add(ad.mul(a, a), 1.0), 1.5)), [(3, 4)]),
    "expand": (lambda a: wsum(ad.expand(a, (2,))), [(3, 4)]),
    "expand_last": (lambda a: wsum(ad.expand_last(a, 3)), [(3, 1)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_central_differences(name):
    f, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [leaf(*s, rng=rng) for s in shapes]
    check(f, *params)


def test_relu_away_from_kink():
    a = Tensor(np.array([-0.7, -0.2, 0.3, 0.9]), requires_grad=True)
    check(lambda x: wsum(ad.relu(x)), a)


def test_embedding_gradient_accumulates_repeats():
    table = leaf(5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    check(lambda t: wsum(ad.embedding(t, ids)), table)
    table.grad = None
    ad.backward(ad.sum_(ad.embedding(table, ids)))
    assert np.array_equal(table.grad[:, 0], [2.0, 1.0, 2.0, 0.0, 1.0])


def test_advanced_index_gradient():
    a = leaf(4, 5, 2)
    rows = np.array([0, 3, 3])
    cols = np.array([1, 4, 4])
    check(lambda x: wsum(x[rows, cols]), a)


def test_matmul_against_naive_oracle():
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))
    x, y = RNG.normal(size=(4, 6)), RNG.normal(size=(6, 3))
    assert np.allclose(ad.matmul(Tensor(x), Tensor(y)).data, naive_matmul(x, y), atol=1e-12)


def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tensor(np.zeros(4)), -1).data
    assert np.array_equal(out, np.full(4, 0.25))


def test_relu_subgradient_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    ad.backward(ad.sum_(ad.mul(ad.relu(ad.neg(x)), ad.relu(x))))
    assert np.array_equal(x.grad, np.zeros(3))
    x.grad = None
    ad.backward(ad.sum_(ad.relu(x)))
    assert np.array_equal(x.grad, np.zeros(3))


def test_backward_examples():
    x = Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    ad.backward(ad.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))
    y = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.backward(ad.sum_(ad.mul(y, y)))
    assert np.array_equal(y.grad, [2.0, 4.0, 6.0])


def test_composite_graph_matches_independent_differences():
    w = RNG.normal(size=(4, 3))
    x = RNG.normal(size=(5, 4))

    def f_np(wv):
        h = x @ wv
        z = np.exp(h - h.max(-1, keepdims=True))
        p = z / z.sum(-1, keepdims=True)
        return float((p * np.arange(3)).sum() + (1 / (1 + np.exp(-h))).mean())

    wt = Tensor(w.copy(), requires_grad=True)
    h = ad.matmul(Tensor(x), wt)
    loss = ad.add(ad.sum_(ad.mul(ad.softmax(h, -1), Tensor(np.tile(np.arange(3.0), (5, 1))))),
                  ad.mean(ad.sigmoid(h)))
    assert loss.item() == pytest.approx(f_np(w), abs=1e-12)
    ad.backward(loss)
    num = central_difference(f_np, w, h=1e-5)
    assert np.max(np.abs(wt.grad - num) / np.maximum(1, np.abs(num))) < 1e-6


def test_backward_requires_scalar():
    with pytest.raises(NotScalar):
        ad.backward(ad.mul(leaf(3), 2.0))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.add(leaf(3, 4), leaf(4, 3))
    with pytest.raises(ShapeMismatch):
        ad.matmul(leaf(3, 4), leaf(3, 4))
    with pytest.raises(ShapeMismatch):
        ad.concat([leaf(2, 3), leaf(3, 3)], axis=1)


def test_gradcheck_quadratic_form_is_tight():
    a = RNG.normal(size=(4, 4))
    q = Tensor(a @ a.T)
    x = leaf(4, 1)
    res = ad.gradcheck(lambda: ad.sum_(ad.mul(x, ad.matmul(q, x))), [x], samples_per_param=None)
    assert res.max_rel_error < 1e-8


def test_gradcheck_excludes_relu_kink():
    x = Tensor(np.array([0.0, 0.5, -0.5]), requires_grad=True)
    res = ad.gradcheck(lambda: ad.sum_(ad.relu(x)), {"x": x}, samples_per_param=None)
    assert res.excluded == [("x", (0,))]
    assert res.checked == 2 and res.max_rel_error < 1e-9


def test_tape_topological_and_replay():
    a, b = leaf(3, 4), leaf(4, 2)
    out = ad.sum_(ad.sigmoid(ad.matmul(ad.relu(a), b)))
    tape = Tape.of(out)
    seen = set()
    for n in tape.nodes:
        assert all(id(p) in seen for p in n._parents)
        seen.add(id(n))
    assert tape.nodes[-1] is out
    assert tape.replay()


def test_backward_is_deterministic():
    a, b = leaf(6, 5), leaf(5, 3)

    def run():
        a.grad = b.grad = None
        ad.backward(ad.sum_(ad.log_softmax(ad.matmul(a, b), -1)))
        return a.grad.copy(), b.grad.copy()

    g1, g2 = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


def test_no_grad_records_nothing():
    a = leaf(2, 2)
    with ad.no_grad():
        out = ad.mul(a, a)
    assert not out.requires_grad and not out._parents


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_layer_norm_gradients_random_points(seed):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(2, 5, rng=rng), leaf(5, rng=rng), leaf(5, rng=rng)
    check(lambda *t: wsum(ad.layer_norm(*t)), x, g, b)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    p = ad.softmax(Tensor(np.array(vals)), -1).data
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)
