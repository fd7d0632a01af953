import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nirfuse import diffcore as dc
from nirfuse.losses import charbonnier


def rand(rng, *shape):
    return dc.tensor(rng.standard_normal(shape), requires_grad=True)


class TestForward:
    def test_relu_negative(self):
        assert dc.relu(dc.tensor(-2.0)).item() == 0.0

    def test_mean(self):
        assert dc.mean(dc.tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5

    def test_matmul_identity(self):
        a = np.random.default_rng(0).standard_normal((3, 3))
        out = dc.matmul(dc.tensor(np.eye(3)), dc.tensor(a)).value
        np.testing.assert_array_equal(out, a)

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ValueError, match=r"add: shape mismatch \(2, 3\) vs \(4,\)"):
            dc.add(dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros(4)))
        with pytest.raises(ValueError, match="matmul"):
            dc.matmul(dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros((2, 3))))

    def test_nan_diagnostic_names_op(self):
        with np.errstate(invalid="ignore"):
            with dc.nan_check(True):
                with pytest.raises(dc.NumericalError, match="log"):
                    dc.log(dc.tensor(-1.0))
            # off by default
            assert np.isnan(dc.log(dc.tensor(-1.0)).item())

    def test_no_provenance_without_grad(self):
        out = dc.add(dc.tensor(1.0), dc.tensor(2.0))
        assert not out.requires_grad and out.parents == ()

    def test_decimate_stencil(self):
        x = dc.tensor(np.arange(16.0).reshape(4, 4, 1))
        out = dc.decimate2x2(x, [[1, 0], [0, 0]]).value[..., 0]
        np.testing.assert_array_equal(out, [[0, 2], [8, 10]])

    def test_gather_bilinear(self):
        table = dc.tensor(np.array([[1.0, 10.0], [3.0, 30.0]]))
        out = dc.gather_bilinear(table, np.array([[0, 1]]), np.array([[0.25, 0.75]])).value
        np.testing.assert_allclose(out, [[2.5, 25.0]])


class TestBackward:
    def test_square(self):
        x = dc.tensor(3.0, requires_grad=True)
        grads = dc.backward(dc.square(x))
        assert grads[x] == 6.0

    def test_constant_root_gives_empty_map(self):
        assert dc.backward(dc.sum_(dc.tensor(np.ones(4)))) == {}

    def test_non_scalar_root(self):
        with pytest.raises(ValueError, match="scalar"):
            dc.backward(dc.tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_second_backward_is_error(self):
        x = dc.tensor(2.0, requires_grad=True)
        y = dc.square(x)
        dc.backward(y)
        with pytest.raises(RuntimeError, match="consumed"):
            dc.backward(y)

    def test_unreachable_param_gets_zero(self):
        x = dc.tensor(2.0, requires_grad=True)
        unused = dc.tensor(np.ones(3), requires_grad=True)
        grads = dc.backward(dc.square(x), params=[x, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros(3))

    def test_shared_subexpression_accumulates(self):
        x = dc.tensor(1.5, requires_grad=True)
        y = x * x + x
        grads = dc.backward(y)
        assert grads[x] == pytest.approx(2 * 1.5 + 1)

    def test_sqrt_zero_backward_is_error(self):
        x = dc.tensor(0.0, requires_grad=True)
        with pytest.raises(ZeroDivisionError):
            dc.backward(dc.sqrt(x))

    def test_abs_subgradient_zero(self):
        x = dc.tensor(np.array([0.0, -2.0, 3.0]), requires_grad=True)
        grads = dc.backward(dc.sum_(dc.abs_(x)))
        np.testing.assert_array_equal(grads[x], [0.0, -1.0, 1.0])

    def test_charbonnier_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 8, 8), rand(rng, 8, 8)
        err = dc.grad_check(lambda: charbonnier(a - b, 1e-3), [a, b], h=1e-4)
        assert err < 1e-5


class TestGradCheck:
    def test_squared_norm(self):
        x = rand(np.random.default_rng(2), 10)
        err = dc.grad_check(lambda: dc.sum_(dc.square(x)), [x])
        assert err < 1e-7
        np.testing.assert_allclose(x.grad, 2 * x.value)

    def test_constant_function(self):
        x = rand(np.random.default_rng(3), 5)
        err = dc.grad_check(lambda: dc.sum_(x * 0.0) + 4.0, [x])
        assert err == 0.0
        assert np.all(np.abs(x.grad) < 1e-9)

    def test_nan_reports_coordinate(self):
        x = dc.tensor(np.array([1.0, 1e-7]), requires_grad=True)
        with np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError, match="coordinate 1"):
                dc.grad_check(lambda: dc.sum_(dc.log(x)), [x], h=1e-3)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            dc.grad_check(lambda: dc.tensor(0.0), [], h=0.0)


def _unary_cases(rng, shape):
    pos = lambda: dc.tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)
    away = lambda: dc.tensor(rng.choice([-1, 1], shape) * rng.uniform(0.1, 2.0, shape), requires_grad=True)
    return [
        ("relu", away, dc.relu),
        ("sqrt", pos, dc.sqrt),
        ("square", away, dc.square),
        ("abs", away, dc.abs_),
        ("exp", away, dc.exp),
        ("log", pos, dc.log),
        ("neg", away, dc.neg),
        ("affine", away, lambda x: dc.affine(x, 1.7, -0.3)),
        ("mean0", away, lambda x: dc.mean(x, axis=0)),
        ("sum-last", away, lambda x: dc.sum_(x, axis=-1, keepdims=True)),
        ("slice", away, lambda x: x[1:, ::2]),
        ("reshape", away, lambda x: dc.reshape(x, (-1,))),
    ]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), h=st.integers(2, 5), w=st.integers(2, 5))
def test_primitives_chain_rule(seed, h, w):
    rng = np.random.default_rng(seed)
    for name, make, op in _unary_cases(rng, (h, w)):
        x = make()
        wt = dc.constant(rng.standard_normal(op(x).shape))
        assert dc.grad_check(lambda: dc.sum_(op(x) * wt), [x], h=1e-6) < 1e-5, name

    a = dc.tensor(rng.standard_normal((h, w)), requires_grad=True)
    b = dc.tensor(rng.uniform(0.5, 2.0, (1, w)), requires_grad=True)
    c = dc.tensor(rng.standard_normal((w, 3)), requires_grad=True)
    binary = {
        "add": lambda: dc.add(a, b), "sub": lambda: dc.sub(a, b), "mul": lambda: dc.mul(a, b),
        "div": lambda: dc.div(a, b), "matmul": lambda: dc.matmul(a, c),
        "transpose": lambda: dc.transpose(a), "concat": lambda: dc.concat([a, b], axis=0),
        "broadcast": lambda: dc.broadcast_to(b, (h, w)),
    }
    for name, op in binary.items():
        def fn():
            out = op()
            return dc.sum_(dc.square(out))
        assert dc.grad_check(fn, [a, b, c], h=1e-6) < 1e-5, name


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_imaging_kernels_chain_rule(seed):
    rng = np.random.default_rng(seed)
    x = dc.tensor(rng.standard_normal((6, 8, 2)), requires_grad=True)
    k = rng.standard_normal((2, 2))
    g = rng.standard_normal(3)
    assert dc.grad_check(lambda: dc.sum_(dc.square(dc.decimate2x2(x, k))), [x]) < 1e-5
    assert dc.grad_check(lambda: dc.sum_(dc.square(dc.correlate_valid(x, g, axis=1))), [x]) < 1e-5
    table = dc.tensor(rng.standard_normal((7, 3)), requires_grad=True)
    idx = rng.integers(0, 7, size=(5, 4))
    wts = rng.uniform(0, 1, size=(5, 4))
    assert dc.grad_check(lambda: dc.sum_(dc.square(dc.gather_bilinear(table, idx, wts))), [table]) < 1e-5


def test_linearity_of_backward():
    rng = np.random.default_rng(4)
    x = dc.tensor(rng.standard_normal(6), requires_grad=True)
    f = lambda: dc.sum_(dc.exp(x))
    g = lambda: dc.sum_(dc.square(x))
    alpha, beta = 0.7, -1.3
    gf = dc.backward(f())[x].copy()
    x.grad = None
    gg = dc.backward(g())[x].copy()
    x.grad = None
    gc = dc.backward(alpha * f() + beta * g())[x]
    np.testing.assert_allclose(gc, alpha * gf + beta * gg, rtol=0, atol=1e-12)


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    a0 = rng.standard_normal((32, 16))
    w0 = rng.standard_normal((16, 8))

    def run():
        a = dc.tensor(a0, requires_grad=True)
        w = dc.tensor(w0, requires_grad=True)
        dc.backward(dc.mean(dc.relu(dc.matmul(a, w))))
        return a.grad, w.grad

    (ga1, gw1), (ga2, gw2) = run(), run()
    assert ga1.tobytes() == ga2.tobytes() and gw1.tobytes() == gw2.tobytes()


def test_tape_records_topological_order():
    x = dc.tensor(1.0, requires_grad=True)
    y = dc.exp(x)
    z = y * y + x
    tape = dc.Tape.record(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert tape.leaves() == [x]
    assert len(tape.nodes) == len({id(n) for n in tape.nodes})
