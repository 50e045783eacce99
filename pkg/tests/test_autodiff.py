import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfgan import autodiff as ad
from sdfgan.autodiff import Tape, Tensor

from helpers import central_diff, rel_err


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def check_grad(op, shapes, rng, tol=1e-4, positive=False):
    xs = [(_away_from_zero(rng, s) if not positive else rng.uniform(0.5, 2.0, s)) for s in shapes]
    with ad.no_record():
        out_shape = op(*[Tensor(x) for x in xs]).shape
    w = rng.standard_normal(out_shape)

    def scalar(*arrs):
        with ad.no_record():
            return float((op(*[Tensor(a) for a in arrs]).data * w).sum())

    ins = [Tensor(x, requires_grad=True) for x in xs]
    with Tape() as tape:
        out = op(*ins)
        loss = ad.tsum(out * w)
    grads = tape.gradient(loss, ins)
    for i, (x, g) in enumerate(zip(xs, grads)):
        def f(xi, i=i):
            args = list(xs)
            args[i] = xi
            return scalar(*args)
        fd = central_diff(f, x)
        assert g.shape == x.shape
        assert rel_err(g.data, fd) < tol, (i, rel_err(g.data, fd))


PRIMITIVES = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (1, 4)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)], False),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)], False),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)], True),
    "pow": (lambda a: a ** 3, [(5,)], False),
    "sqrt": (lambda a: ad.sqrt(a), [(5,)], True),
    "exp": (lambda a: ad.exp(a), [(5,)], False),
    "log": (lambda a: ad.log(a), [(5,)], True),
    "relu": (lambda a: ad.relu(a), [(4, 5)], False),
    "leaky_relu": (lambda a: ad.leaky_relu(a), [(4, 5)], False),
    "abs": (lambda a: ad.tabs(a), [(6,)], False),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4, 2)], False),
    "mean_keepdims": (lambda a: a.mean(axis=(0, 2), keepdims=True), [(3, 4, 2)], False),
    "reshape": (lambda a: a.reshape(6, 2), [(3, 4)], False),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    "getitem": (lambda a: a[1:, ::2], [(4, 5)], False),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)], False),
    "gather_rows": (lambda a: ad.gather_rows(a, np.array([2, 0, 2, 1])), [(3, 4)], False),
    "matmul": (lambda a, b: a @ b, [(4, 4), (4, 4)], False),
    "matmul_exact": (lambda a, b: ad.matmul(a, b, exact=True), [(5, 3), (3, 2)], False),
    "segment_max": (lambda a: ad.segment_max(a, [0, 3, 7]), [(7, 5)], False),
    "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [(3, 6), (6,), (6,)], False),
    "conv3d_s2": (lambda x, w: ad.conv3d(x, w, stride=2, pad=1), [(2, 2, 4, 4, 4), (3, 2, 4, 4, 4)], False),
    "conv3d_1x1": (lambda x, w: ad.conv3d(x, w), [(1, 1, 3, 3, 3), (2, 1, 1, 1, 1)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    op, shapes, positive = PRIMITIVES[name]
    check_grad(op, shapes, np.random.default_rng(hash(name) % 2**32), positive=positive)


def test_conv_adjoints_are_twice_differentiable():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 4, 4, 4))
    g = rng.standard_normal((1, 3, 2, 2, 2))
    check_grad(lambda gg, ww: ad.conv3d_transpose(gg, ww, 2, 1, (4, 4, 4)), [g.shape, w.shape], rng)
    check_grad(lambda xx, gg: ad.conv3d_weight_grad(xx, gg, 4, 2, 1), [x.shape, g.shape], rng)


def test_relu_negative_clamps():
    assert ad.relu(Tensor([-1.5])).data[0] == 0.0


def test_relu_derivative_at_zero_is_zero():
    x = Tensor([0.0], requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
    assert tape.gradient(y, x).data[0] == 0.0


def test_layer_norm_constant_vector_is_zero():
    out = ad.layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]))
    assert np.array_equal(out.data, np.zeros(4))


def test_identity_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x.reshape(2)
    assert y is x
    assert np.array_equal(tape.gradient(y, x).data, [1.0, 1.0])


def test_square_gradient():
    assert ad.grad(lambda x: x * x, 3.0)[0] == 6.0


def test_matrix_product_gradient_vs_central_differences():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    ga, gb = ad.grad(lambda x, y: (x @ y).sum(), a, b)
    fd_a = central_diff(lambda x: (x @ b).sum(), a)
    fd_b = central_diff(lambda y: (a @ y).sum(), b)
    assert rel_err(ga, fd_a) < 1e-6 and rel_err(gb, fd_b) < 1e-6


def test_max_pool_routes_to_argmax():
    x = Tensor(np.array([[0.1], [0.7], [0.3]]), requires_grad=True)
    with Tape() as tape:
        y = ad.segment_max(x, [0, 3])
    assert np.array_equal(tape.gradient(y, x).data.ravel(), [0.0, 1.0, 0.0])


def test_second_derivative_of_cube():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = x ** 3
        (dy,) = tape.gradient(y, [x], create_graph=True)
    d2 = tape.gradient(dy, x)
    assert abs(d2.item() - 12.0) < 1e-12


def test_penalty_vanishes_for_unit_linear_critic():
    a = Tensor(np.array([0.6, 0.8]), requires_grad=True)
    x = Tensor(np.array([[0.3, -1.2]]), requires_grad=True)
    with Tape() as tape:
        d = (x * a).sum()
        gx = tape.gradient(d, x, create_graph=True)
        pen = (ad.norm_rows(gx) - 1.0) ** 2
        pen = pen.sum()
    ga = tape.gradient(pen, a)
    assert abs(pen.item()) < 1e-20
    assert np.allclose(ga.data, 0.0, atol=1e-11)


def _mlp_critic(params, x):
    w1, b1, w2, b2 = params
    h = ad.leaky_relu(x @ w1 + b1)
    return (h @ w2 + b2).sum()


def _penalty(params, x):
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        d = _mlp_critic(params, xt)
        gx = tape.gradient(d, xt, create_graph=True)
        pen = ((ad.norm_rows(gx) - 1.0) ** 2).mean()
    return tape, pen


def test_penalty_parameter_gradient_vs_finite_differences():
    rng = np.random.default_rng(11)
    shapes = [(3, 5), (5,), (5, 1), (1,)]
    vals = [rng.standard_normal(s) for s in shapes]
    x = rng.standard_normal((4, 3))
    params = [Tensor(v, requires_grad=True) for v in vals]
    tape, pen = _penalty(params, x)
    grads = tape.gradient(pen, params)
    for i, v in enumerate(vals):
        def f(vi, i=i):
            ps = [Tensor(u, requires_grad=True) for u in vals]
            ps[i] = Tensor(vi, requires_grad=True)
            return _penalty(ps, x)[1].item()
        fd = central_diff(f, v)
        assert rel_err(grads[i].data, fd) < 1e-4


def test_backward_before_forward_rejected():
    tape = Tape()
    with pytest.raises(RuntimeError):
        tape.gradient(Tensor([1.0]), [Tensor([1.0], requires_grad=True)])


def test_shape_mismatch_names_operation():
    with pytest.raises(ad.ShapeError, match="matmul"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="conv3d"):
        ad.conv3d(Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((1, 3, 4, 4, 4))))


def test_linearity_of_adjoints():
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3)))
    with Tape() as tape:
        h = ad.leaky_relu(x @ w)
        f1 = (h * h).sum()
        f2 = h.mean()
        total = f1 + f2
    g1, g2, gt = (tape.gradient(f, w).data for f in (f1, f2, total))
    assert np.allclose(g1 + g2, gt, rtol=1e-13, atol=1e-15)


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 1, 8, 8, 8))
    w = rng.standard_normal((4, 1, 4, 4, 4))
    a = ad.conv3d(Tensor(x), Tensor(w), 2, 1).data
    b = ad.conv3d(Tensor(x), Tensor(w), 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_gradients_have_primal_shapes():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = (x * b).sum()
    gx, gb = tape.gradient(y, [x, b])
    assert gx.shape == x.shape and gb.shape == b.shape


def test_exact_matmul_rows_do_not_depend_on_batch():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((300, 131))
    w = rng.standard_normal((131, 64))
    full = ad.matmul(Tensor(a), Tensor(w), exact=True).data
    for i in (0, 17, 299):
        row = ad.matmul(Tensor(a[i:i + 1]), Tensor(w), exact=True).data[0]
        assert row.tobytes() == full[i].tobytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
def test_leaky_relu_gradient_is_piecewise_constant(values):
    x = Tensor(np.array(values), requires_grad=True)
    with Tape() as tape:
        y = ad.leaky_relu(x).sum()
    g = tape.gradient(y, x).data
    assert np.all((g == 1.0) | (g == 0.2))
    assert np.all(g[np.array(values) > 0] == 1.0)


def test_checkpoint_round_trip(tmp_path):
    store = ad.ParameterStore()
    store.add("layer0/w", np.arange(6.0).reshape(2, 3))
    store.add("bias", np.array([1.5]))
    store.rmsprop_update({"bias": np.array([2.0]), "layer0/w": np.ones((2, 3))}, lr=0.1)
    path = tmp_path / "p.sgpc"
    store.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"SGPC"
    other = ad.ParameterStore()
    other.add("layer0/w", np.zeros((2, 3)))
    other.add("bias", np.zeros(1))
    other.load(path)
    assert other.digest() == store.digest()
    assert np.array_equal(other._sq_avg["bias"], store._sq_avg["bias"])


def test_parameter_names_unique():
    store = ad.ParameterStore()
    store.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("w", np.zeros(2))
