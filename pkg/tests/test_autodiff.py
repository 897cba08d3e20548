"""Gradient checks and behavioural tests for the autodiff engine.

Every primitive gets a finite-difference check; expected values that are
not hand-derivable are computed by small numpy oracles inline.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphsurv import autodiff as ad

TOL = 1e-6


def _rng(k=0):
    return np.random.default_rng(12345 + k)


def check(f, tensors, tol=TOL):
    err = ad.grad_check(f, tensors)
    assert err < tol, f"gradient mismatch: relative error {err}"


def param(values):
    return ad.parameter(np.asarray(values, dtype=np.float64))


class TestElementwise:
    def test_add_sub_mul(self):
        rng = _rng()
        a = param(rng.normal(size=(3, 4)))
        b = param(rng.normal(size=(3, 4)))
        check(lambda: ad.sum_all(ad.add(a, b)), [a, b])
        check(lambda: ad.sum_all(ad.sub(a, b)), [a, b])
        check(lambda: ad.sum_all(ad.mul(a, b)), [a, b])

    def test_add_values(self):
        a = param([[1.0, 2.0]])
        b = param([[10.0, 20.0]])
        np.testing.assert_array_equal(ad.add(a, b).values, [[11.0, 22.0]])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.add(param([[1.0]]), param([[1.0, 2.0]]))

    def test_scalar_mul_by_float_and_tensor(self):
        a = param(_rng().normal(size=(2, 3)))
        check(lambda: ad.sum_all(ad.scalar_mul(a, -2.5)), [a])
        s = param([[0.7]])
        check(lambda: ad.sum_all(ad.scalar_mul(a, s)), [a, s])

    def test_relu_and_leaky_relu(self):
        a = param([[-2.0, -0.5, 0.5, 3.0]])
        np.testing.assert_array_equal(ad.relu(a).values, [[0.0, 0.0, 0.5, 3.0]])
        np.testing.assert_allclose(ad.leaky_relu(a).values, [[-0.4, -0.1, 0.5, 3.0]])
        b = param(_rng(1).normal(size=(3, 3)) + 0.05)  # keep away from the kink
        check(lambda: ad.sum_all(ad.relu(b)), [b])
        check(lambda: ad.sum_all(ad.leaky_relu(b)), [b])

    def test_relu_subgradient_at_zero_is_zero(self):
        a = param([[0.0]])
        loss = ad.sum_all(ad.relu(a))
        ad.backward(loss)
        assert a.grad[0, 0] == 0.0

    def test_exp_log_sigmoid_softplus(self):
        rng = _rng(2)
        a = param(rng.normal(size=(2, 3)))
        pos = param(np.abs(rng.normal(size=(2, 3))) + 0.5)
        check(lambda: ad.sum_all(ad.exp(a)), [a])
        check(lambda: ad.sum_all(ad.log(pos)), [pos])
        check(lambda: ad.sum_all(ad.sigmoid(a)), [a])
        check(lambda: ad.sum_all(ad.softplus(a)), [a])

    def test_sigmoid_softplus_stable_at_extremes(self):
        a = param([[-800.0, 800.0]])
        s = ad.sigmoid(a).values
        sp = ad.softplus(a).values
        assert np.all(np.isfinite(s)) and np.all(np.isfinite(sp))
        assert s[0, 0] == pytest.approx(0.0, abs=1e-300)
        assert s[0, 1] == pytest.approx(1.0)
        assert sp[0, 0] == pytest.approx(0.0, abs=1e-300)
        assert sp[0, 1] == pytest.approx(800.0)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            ad.log(param([[0.0]]))


class TestLinalg:
    def test_matmul_matches_numpy(self):
        rng = _rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        out = ad.matmul(param(a), param(b)).values
        np.testing.assert_allclose(out, a @ b)

    def test_matmul_grad(self):
        rng = _rng(4)
        a = param(rng.normal(size=(3, 4)))
        b = param(rng.normal(size=(4, 2)))
        w = ad.constant(rng.normal(size=(3, 2)))
        # weighted sum so the upstream gradient is non-uniform
        check(lambda: ad.sum_all(ad.mul(ad.matmul(a, b), w)), [a, b])

    def test_transpose(self):
        a = param(_rng(5).normal(size=(2, 5)))
        np.testing.assert_array_equal(ad.transpose(a).values, a.values.T)
        check(lambda: ad.sum_all(ad.mul(ad.transpose(a), ad.transpose(a))), [a])

    def test_concat_slice_take(self):
        rng = _rng(6)
        a = param(rng.normal(size=(3, 2)))
        b = param(rng.normal(size=(3, 3)))
        cat = ad.concat_cols(a, b)
        assert cat.values.shape == (3, 5)
        check(lambda: ad.sum_all(ad.mul(ad.concat_cols(a, b), ad.concat_cols(a, b))), [a, b])
        check(lambda: ad.sum_all(ad.slice_rows(ad.transpose(b), 1, 3)), [b])
        idx = np.array([2, 0, 0, 1])
        taken = ad.take_rows(a, idx)
        np.testing.assert_array_equal(taken.values, a.values[idx])
        check(lambda: ad.sum_all(ad.mul(ad.take_rows(a, idx), ad.take_rows(a, idx))), [a])

    def test_take_rows_accumulates_duplicate_rows(self):
        a = param([[1.0], [2.0]])
        loss = ad.sum_all(ad.take_rows(a, np.array([0, 0, 1])))
        ad.backward(loss)
        np.testing.assert_array_equal(a.grad, [[2.0], [1.0]])

    def test_add_rowvec_divide_rows(self):
        rng = _rng(7)
        x = param(rng.normal(size=(4, 3)))
        r = param(rng.normal(size=(1, 3)))
        d = param(np.abs(rng.normal(size=(4, 1))) + 0.5)
        check(lambda: ad.sum_all(ad.mul(ad.add_rowvec(x, r), ad.add_rowvec(x, r))), [x, r])
        check(lambda: ad.sum_all(ad.divide_rows(x, d)), [x, d])

    def test_divide_rows_rejects_zero(self):
        with pytest.raises(ZeroDivisionError):
            ad.divide_rows(param([[1.0]]), param([[0.0]]))

    def test_mean_all(self):
        a = param([[1.0, 2.0], [3.0, 4.0]])
        assert ad.mean_all(a).values[0, 0] == 2.5
        check(lambda: ad.mean_all(ad.mul(a, a)), [a])


class TestLayerNorm:
    def test_normalizes_rows(self):
        x = param(_rng(8).normal(size=(4, 6)) * 3 + 1)
        g = param(np.ones((1, 6)))
        b = param(np.zeros((1, 6)))
        out = ad.layer_norm(x, g, b).values
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)

    def test_grad(self):
        rng = _rng(9)
        x = param(rng.normal(size=(3, 5)))
        g = param(rng.normal(size=(1, 5)) + 1.0)
        b = param(rng.normal(size=(1, 5)))
        w = ad.constant(rng.normal(size=(3, 5)))
        check(lambda: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), w)), [x, g, b], tol=1e-5)


def _chain_edges():
    # graph 0->1->2 plus self loops; every node has an in-neighbourhood
    dst = np.array([0, 1, 1, 2, 2])
    src = np.array([0, 0, 1, 1, 2])
    return ad.EdgeList(dst, src, 3)


class TestGraphOps:
    def test_segment_softmax_uniform(self):
        edges = _chain_edges()
        scores = param(np.zeros((5, 1)))
        w = ad.segment_softmax(scores, edges.dst_ptr).values.ravel()
        np.testing.assert_allclose(w, [1.0, 0.5, 0.5, 0.5, 0.5])

    def test_segment_softmax_matches_dense(self):
        edges = _chain_edges()
        s = _rng(10).normal(size=(5, 1))
        w = ad.segment_softmax(param(s), edges.dst_ptr).values.ravel()
        for v in range(3):
            lo, hi = edges.dst_ptr[v], edges.dst_ptr[v + 1]
            seg = s.ravel()[lo:hi]
            np.testing.assert_allclose(
                w[lo:hi], np.exp(seg - seg.max()) / np.exp(seg - seg.max()).sum())

    def test_segment_softmax_grad(self):
        edges = _chain_edges()
        s = param(_rng(11).normal(size=(5, 1)))
        w = ad.constant(_rng(12).normal(size=(5, 1)))
        check(lambda: ad.sum_all(ad.mul(ad.segment_softmax(s, edges.dst_ptr), w)), [s])

    def test_edge_aggregate_matches_dense(self):
        edges = _chain_edges()
        rng = _rng(13)
        w = rng.normal(size=(5, 1))
        x = rng.normal(size=(3, 4))
        out = ad.edge_aggregate(param(w), param(x), edges).values
        dense = np.zeros((3, 4))
        for e in range(5):
            dense[edges.dst[e]] += w[e, 0] * x[edges.src[e]]
        np.testing.assert_allclose(out, dense)

    def test_edge_aggregate_grad(self):
        edges = _chain_edges()
        rng = _rng(14)
        w = param(rng.normal(size=(5, 1)))
        x = param(rng.normal(size=(3, 4)))
        m = ad.constant(rng.normal(size=(3, 4)))
        check(lambda: ad.sum_all(ad.mul(ad.edge_aggregate(w, x, edges), m)), [w, x])

    def test_edge_list_requires_full_coverage(self):
        with pytest.raises(ValueError):
            ad.EdgeList(np.array([0, 0]), np.array([0, 1]), 3)  # nodes 1,2 uncovered


class TestSpmm:
    def test_matches_dense(self):
        from graphsurv.graphs import SparseAdjacency
        rng = _rng(15)
        rows = np.array([0, 0, 1, 2, 2])
        cols = np.array([0, 2, 1, 0, 2])
        vals = np.abs(rng.normal(size=5))
        adj = SparseAdjacency(3, rows, cols, vals)
        x = param(rng.normal(size=(3, 4)))
        out = ad.spmm(adj, x).values
        np.testing.assert_allclose(out, adj.to_dense() @ x.values)

    def test_grad(self):
        from graphsurv.graphs import SparseAdjacency
        rng = _rng(16)
        adj = SparseAdjacency(3, np.array([0, 1, 2, 2]), np.array([1, 0, 1, 2]),
                              np.abs(rng.normal(size=4)))
        x = param(rng.normal(size=(3, 3)))
        m = ad.constant(rng.normal(size=(3, 3)))
        check(lambda: ad.sum_all(ad.mul(ad.spmm(adj, x), m)), [x])


class TestEngine:
    def test_backward_through_shared_subexpression(self):
        a = param([[2.0]])
        b = ad.mul(a, a)            # a^2
        loss = ad.sum_all(ad.add(b, b))  # 2 a^2 -> dLoss/da = 4a = 8
        ad.backward(loss)
        assert a.grad[0, 0] == pytest.approx(8.0)

    def test_backward_requires_scalar(self):
        a = param([[1.0, 2.0]])
        with pytest.raises(ValueError):
            ad.backward(ad.relu(a))

    def test_no_grad_blocks_taping(self):
        a = param([[1.0]])
        with ad.no_grad():
            out = ad.mul(a, a)
        assert out._parents == ()
        assert not out.requires_grad

    def test_zero_grads(self):
        a = param([[3.0]])
        ad.backward(ad.sum_all(ad.mul(a, a)))
        assert a.grad is not None
        ad.zero_grads([a])
        assert a.grad is None

    def test_constant_gets_no_grad(self):
        c = ad.constant([[1.0]])
        a = param([[2.0]])
        ad.backward(ad.sum_all(ad.mul(a, c)))
        assert c.grad is None and a.grad is not None

    def test_gradients_accumulate_across_backward_calls(self):
        a = param([[1.0]])
        ad.backward(ad.sum_all(ad.scalar_mul(a, 3.0)))
        ad.backward(ad.sum_all(ad.scalar_mul(a, 3.0)))
        assert a.grad[0, 0] == pytest.approx(6.0)

    def test_forward_is_deterministic(self):
        rng = _rng(17)
        a = rng.normal(size=(4, 4))
        f = lambda: ad.sum_all(ad.relu(ad.matmul(param(a), param(a)))).values.copy()
        np.testing.assert_array_equal(f(), f())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_of_add_and_scale(xs, alpha, beta):
    a = ad.parameter(np.array([xs]))
    lhs = ad.add(ad.scalar_mul(a, alpha), ad.scalar_mul(a, beta)).values
    rhs = ad.scalar_mul(a, alpha + beta).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4))
def test_segment_softmax_rows_sum_to_one(n, fan):
    rng = np.random.default_rng(100 * n + fan)
    dst = np.repeat(np.arange(n), fan)
    src = rng.integers(0, n, size=n * fan)
    src[::fan] = np.arange(n)  # guarantee coverage via self loops
    edges = ad.EdgeList(dst, src, n)
    w = ad.segment_softmax(ad.constant(rng.normal(size=(edges.dst.size, 1))),
                           edges.dst_ptr).values.ravel()
    sums = np.add.reduceat(w, edges.dst_ptr[:-1])
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
