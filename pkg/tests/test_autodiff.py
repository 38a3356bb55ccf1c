import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracegrad import autodiff as ad
from tracegrad.autodiff import Tape, finite_diff_check
from tracegrad.errors import DiagnosticError, ParameterError, UsageError


def second_order(fn, x0, c):
    """Scalar <grad fn(x), c> as a function of x, built on the tape."""

    def out(x):
        y = fn(x)
        (g,) = x.tape.grad(y, [x])
        return ad.sum_(ad.mul(g, x.tape.constant(c)))

    return out


# each entry maps a variable x (shape (2, 3)) to a scalar through one primitive
UNARY = {
    "add": lambda x: ad.sum_(ad.mul(ad.add(x, x), x)),
    "scale": lambda x: ad.sum_(ad.mul(ad.scale(x, -1.7), x)),
    "mul": lambda x: ad.sum_(ad.mul(ad.mul(x, x), x)),
    "einsum": lambda x: ad.sum_(ad.pow_(ad.einsum("ij,kj->ik", x, x), 2.0)),
    "einsum3": lambda x: ad.sum_(ad.einsum("ij,ij,ij->i", x, x, x)),
    "matvec": lambda x: ad.sum_(ad.pow_(ad.matvec(ad.mul(x, x), ad.slice_(ad.reshape(x, (6,)), 0, 0, 3)), 2.0)),
    "inner": lambda x: ad.mul(ad.inner(ad.reshape(x, (6,)), ad.reshape(x, (6,))), ad.inner(ad.reshape(x, (6,)), ad.reshape(x, (6,)))),
    "concat": lambda x: ad.sum_(ad.pow_(ad.concat([x, ad.mul(x, x)], axis=1), 3.0)),
    "slice": lambda x: ad.sum_(ad.pow_(ad.slice_(x, 1, 1, 3), 3.0)),
    "sum": lambda x: ad.sum_(ad.pow_(ad.sum_(x, axis=0), 3.0)),
    "reshape": lambda x: ad.sum_(ad.pow_(ad.reshape(x, (3, 2)), 3.0)),
    "transpose": lambda x: ad.sum_(ad.mul(ad.transpose(x, (1, 0)), ad.transpose(ad.mul(x, x), (1, 0)))),
    "gather": lambda x: ad.sum_(ad.pow_(ad.gather(x, np.array([1, 0, 1])), 3.0)),
    "scatter_add": lambda x: ad.sum_(ad.pow_(ad.scatter_add(x, np.array([2, 2]), 3), 3.0)),
    "broadcast_to": lambda x: ad.sum_(ad.pow_(ad.broadcast_to(ad.slice_(x, 0, 0, 1), (4, 3)), 3.0)),
    "sigmoid": lambda x: ad.sum_(ad.mul(ad.sigmoid(x), x)),
    "silu": lambda x: ad.sum_(ad.mul(ad.silu(x), x)),
    "layernorm": lambda x: ad.sum_(ad.mul(ad.layernorm(x), ad.mul(x, x))),
    "pow": lambda x: ad.sum_(ad.pow_(ad.add(ad.mul(x, x), 1.0), -0.5)),
    "abs": lambda x: ad.sum_(ad.mul(ad.abs_(x), ad.mul(x, x))),
}


class TestRecord:
    def test_add_zero(self):
        t = Tape()
        x = t.variable([1.5, -2.0])
        assert np.array_equal(ad.add(x, 0.0).value, x.value)

    def test_silu_zero(self):
        assert ad.silu(Tape().variable(0.0)).value == 0.0

    def test_inner(self):
        t = Tape()
        assert float(ad.inner(t.variable([1.0, 2.0]), t.variable([3.0, 4.0])).value) == 11.0

    def test_record_by_name(self):
        t = Tape()
        a, b = t.variable([1.0, 2.0]), t.variable([3.0, 4.0])
        assert float(t.record("inner", [a, b]).value) == 11.0
        assert np.array_equal(t.record("elementwise-mul", [a, b]).value, [3.0, 8.0])

    def test_primitive_set_covers_required(self):
        for name in ["add", "scale", "matvec", "inner", "concat", "slice", "silu", "layernorm", "sum", "elementwise-mul"]:
            assert name in ad.PRIMITIVES

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ParameterError):
            ad.add(t.variable(np.ones(3)), t.variable(np.ones(4)))

    def test_cross_tape(self):
        a, b = Tape().variable(1.0), Tape().variable(2.0)
        with pytest.raises(UsageError):
            ad.add(a, b)

    def test_unknown_primitive(self):
        with pytest.raises(ParameterError):
            Tape().record("softmax", [])

    def test_non_finite_leaf(self):
        with pytest.raises(ParameterError):
            Tape().variable([np.inf])

    def test_topological_order(self):
        t = Tape()
        x = t.variable(np.ones(3))
        y = ad.silu(ad.mul(x, x))
        t.grad(ad.sum_(y), [x])
        for n in t.nodes:
            assert all(i < n.id for i in n.inputs)

    def test_replay_bit_identical(self, rng):
        t = Tape()
        x = t.variable(rng.normal(size=(4, 5)))
        y = ad.layernorm(ad.silu(ad.einsum("ij,kj->ik", x, x)))
        (g,) = t.grad(ad.sum_(ad.mul(y, y)), [x])
        for n, v in zip(t.nodes, t.replay()):
            assert np.array_equal(n.value, v)

    def test_released_tape_is_closed(self):
        t = Tape()
        x = t.variable([1.0])
        t.release()
        assert len(t) == 0
        with pytest.raises(UsageError):
            ad.add(x, x)

    def test_layernorm_normalizes(self, rng):
        y = ad.layernorm(Tape().variable(rng.normal(size=(3, 8)) * 4 + 2)).value
        assert np.allclose(y.mean(axis=-1), 0, atol=1e-14)
        assert np.allclose(y.var(axis=-1), 1, atol=1e-5)


class TestGrad:
    def test_inner_self(self):
        t = Tape()
        x = t.variable([1.0, 2.0, 3.0])
        (g,) = t.grad(ad.inner(x, x), [x])
        assert np.array_equal(g.value, [2.0, 4.0, 6.0])

    def test_non_scalar(self):
        t = Tape()
        x = t.variable([1.0, 2.0])
        with pytest.raises(ParameterError):
            t.grad(ad.mul(x, x), [x])

    def test_unrelated_gets_zero(self):
        t = Tape()
        x, y = t.variable([1.0, 2.0]), t.variable([5.0])
        gx, gy = t.grad(ad.sum_(x), [x, y])
        assert np.array_equal(gy.value, [0.0])

    def test_silu_linear_fd(self, rng):
        w = rng.normal(size=(4, 5))
        r = finite_diff_check(lambda x: ad.sum_(ad.silu(ad.matvec(x.tape.constant(w), x))), rng.normal(size=5), step=1e-4)
        assert r.max_rel_error <= 1e-6

    def test_second_order_fd(self, rng):
        # output2 = |d output1 / dx|^2, differentiated w.r.t. w
        x0 = rng.normal(size=5)

        def out2(w):
            t = w.tape
            x = t.variable(x0)
            w_m = ad.reshape(w, (4, 5))
            o1 = ad.sum_(ad.silu(ad.matvec(w_m, x)))
            (g,) = t.grad(o1, [x])
            return ad.inner(g, g)

        r = finite_diff_check(out2, rng.normal(size=20), step=1e-4)
        assert r.max_rel_error <= 1e-5

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_first_order_each_primitive(self, name, rng):
        r = finite_diff_check(UNARY[name], rng.normal(size=(2, 3)), step=1e-5)
        assert r.max_rel_error <= 1e-6

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_closure_second_order(self, name, rng):
        x0 = rng.normal(size=(2, 3))
        c = rng.normal(size=(2, 3))
        r = finite_diff_check(second_order(UNARY[name], x0, c), x0, step=1e-5)
        assert r.max_rel_error <= 1e-5

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_linearity(self, a, b, seed):
        x0 = np.random.default_rng(seed).normal(size=4)
        t = Tape()
        x = t.variable(x0)
        f = ad.sum_(ad.silu(x))
        g = ad.inner(x, ad.layernorm(x))
        (combo,) = t.grad(ad.add(ad.scale(f, a), ad.scale(g, b)), [x])
        gf, gg = t.grad(f, [x])[0], t.grad(g, [x])[0]
        assert np.max(np.abs(combo.value - (a * gf.value + b * gg.value))) <= 1e-12

    def test_determinism(self, rng):
        x0 = rng.normal(size=(3, 4))

        def run():
            t = Tape()
            x = t.variable(x0)
            y = ad.sum_(ad.pow_(ad.layernorm(ad.silu(x)), 2.0))
            (g,) = t.grad(y, [x])
            (h,) = t.grad(ad.inner(ad.reshape(g, (12,)), ad.reshape(g, (12,))), [x])
            return g.value, h.value

        (g1, h1), (g2, h2) = run(), run()
        assert np.array_equal(g1, g2) and np.array_equal(h1, h2)

    def test_detach_blocks_gradient(self):
        t = Tape()
        x = t.variable([2.0])
        (g,) = t.grad(ad.sum_(ad.mul(ad.detach(x), x)), [x])
        assert np.array_equal(g.value, [2.0])


class TestFiniteDiffCheck:
    def test_quadratic(self, rng):
        a = rng.normal(size=(4, 4))
        a = a @ a.T
        r = finite_diff_check(lambda x: ad.inner(x, ad.matvec(x.tape.constant(a), x)), rng.normal(size=4))
        assert r.max_rel_error <= 1e-9

    def test_constant(self):
        r = finite_diff_check(lambda x: ad.sum_(ad.scale(x, 0.0)), np.ones(3))
        assert r.max_rel_error <= 1e-8

    def test_five_point_stencil(self, rng):
        # cubic: the five-point rule is exact up to roundoff even for a coarse step
        def fn(x):
            return ad.sum_(ad.pow_(x, 3.0))

        x0 = rng.normal(size=4)
        coarse2 = finite_diff_check(fn, x0, step=1e-2).max_rel_error
        coarse4 = finite_diff_check(fn, x0, step=1e-2, order=4).max_rel_error
        assert coarse4 <= 1e-10 < coarse2

    def test_bad_order(self):
        with pytest.raises(ParameterError):
            finite_diff_check(lambda x: ad.sum_(x), np.ones(2), order=3)

    def test_step_positive(self):
        with pytest.raises(ParameterError):
            finite_diff_check(lambda x: ad.sum_(x), np.ones(2), step=0.0)

    def test_non_finite_component(self):
        # pow(-0.5) blows up once component 1 is perturbed across zero
        def fn(x):
            return ad.sum_(ad.pow_(ad.mul(x, x), -0.5))

        with np.errstate(divide="ignore"), pytest.raises(DiagnosticError) as info:
            finite_diff_check(fn, np.array([1.0, 1e-3]), step=1e-3)
        assert info.value.index == 1
