"""Reverse-mode automatic differentiation over dense float64 matrices.

Just enough of a tape engine for the model and loss: every value is a
2-D float64 matrix (scalars are 1x1), every primitive records a closure
that propagates the upstream gradient to its inputs, and ``backward``
walks the tape once in reverse topological order. Repeated ``backward``
calls without ``zero_grads`` accumulate into ``.grad``.

Subgradient conventions are fixed for reproducibility: relu'(0) = 0 and
leaky_relu'(0) takes the negative-side slope.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (evaluation-only forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float64 matrix participating in the tape."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(-1, 1)
        if v.ndim != 2:
            raise ValueError(f"tensors are 2-D matrices, got shape {v.shape}")
        self.values = v
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _make(values, parents, backward_fn) -> Tensor:
    """Wrap an op result; parents are only tracked while grads are enabled."""
    out = Tensor(values)
    tracked = tuple(p for p in parents if isinstance(p, Tensor) and (p.requires_grad or p._parents))
    if _GRAD_ENABLED and tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.values + b.values, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.values - b.values, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.values, b.values

    def bwd(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return _make(av * bv, (a, b), bwd)


def scalar_mul(x: Tensor, s) -> Tensor:
    """x scaled by a python float or by a learnable 1x1 tensor."""
    if isinstance(s, Tensor):
        if s.shape != (1, 1):
            raise ValueError(f"scalar_mul: scale tensor must be 1x1, got {s.shape}")
        xv, sv = x.values, s.values[0, 0]

        def bwd(g):
            _accum(x, g * sv)
            _accum(s, np.array([[np.sum(g * xv)]]))

        return _make(xv * sv, (x, s), bwd)
    c = float(s)

    def bwd(g):
        _accum(x, g * c)

    return _make(x.values * c, (x,), bwd)


def add_const(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(x, g)

    return _make(x.values + float(c), (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        # skip the dead GEMM when one operand is a constant leaf
        if a.requires_grad or a._parents:
            _accum(a, g @ bv.T)
        if b.requires_grad or b._parents:
            _accum(b, av.T @ g)

    return _make(av @ bv, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g.T)

    return _make(a.values.T, (a,), bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_cols: row counts differ {a.shape} vs {b.shape}")
    na = a.shape[1]

    def bwd(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return _make(np.concatenate([a.values, b.values], axis=1), (a, b), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[0]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice_rows: [{start}:{stop}] out of range for {n} rows")

    def bwd(g):
        full = np.zeros_like(x.values)
        full[start:stop] = g
        _accum(x, full)

    return _make(x.values[start:stop].copy(), (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ValueError("take_rows: index out of range")

    def bwd(g):
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _make(x.values[idx], (x,), bwd)


def add_rowvec(x: Tensor, r: Tensor) -> Tensor:
    """Broadcast-add a 1xM row vector to every row of x."""
    if r.shape != (1, x.shape[1]):
        raise ValueError(f"add_rowvec: row vector {r.shape} vs matrix {x.shape}")

    def bwd(g):
        _accum(x, g)
        _accum(r, g.sum(axis=0, keepdims=True))

    return _make(x.values + r.values, (x, r), bwd)


def divide_rows(num: Tensor, den: Tensor) -> Tensor:
    """Divide each row of num by the matching scalar in den (Nx1); den must be nonzero."""
    if den.shape != (num.shape[0], 1):
        raise ValueError(f"divide_rows: denominator {den.shape} vs numerator {num.shape}")
    dv = den.values
    if np.any(dv == 0.0):
        raise ZeroDivisionError("divide_rows: zero denominator")
    out = num.values / dv

    def bwd(g):
        _accum(num, g / dv)
        _accum(den, -(g * out).sum(axis=1, keepdims=True) / dv)

    return _make(out, (num, den), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.values > 0.0

    def bwd(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.values, 0.0), (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.values > 0.0

    def bwd(g):
        _accum(x, g * np.where(pos, 1.0, slope))

    return _make(np.where(pos, x.values, slope * x.values), (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def bwd(g):
        _accum(x, g * out)

    return _make(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0.0):
        raise ValueError("log: domain violation (values must be positive)")
    xv = x.values

    def bwd(g):
        _accum(x, g / xv)

    return _make(np.log(xv), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xv = x.values
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    xv = x.values
    out = np.logaddexp(0.0, xv)
    sig = np.empty_like(xv)
    pos = xv >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    sig[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(x, g * sig)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g):
        _accum(x, np.full(shape, g[0, 0]))

    return _make(np.array([[x.values.sum()]]), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.values.size

    def bwd(g):
        _accum(x, np.full(shape, g[0, 0] / n))

    return _make(np.array([[x.values.mean()]]), (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise normalization followed by a learnable affine map."""
    m = x.shape[1]
    if gain.shape != (1, m) or bias.shape != (1, m):
        raise ValueError("layer_norm: gain/bias must be 1xM row vectors")
    xv = x.values
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gain.values

    def bwd(g):
        _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        _accum(bias, g.sum(axis=0, keepdims=True))
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        _accum(x, dx)

    return _make(xhat * gv + bias.values, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# graph-structured primitives
# ---------------------------------------------------------------------------

class EdgeList:
    """Directed edge list sorted by destination, with precomputed scatter layout.

    Every node must occur at least once as a destination and once as a
    source (guaranteed when self-loops are present); this keeps the
    segment reductions free of empty-segment special cases.
    """

    __slots__ = ("n", "dst", "src", "dst_ptr", "src_order", "src_ptr")

    def __init__(self, dst, src, n: int):
        dst = np.asarray(dst, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        if dst.shape != src.shape or dst.ndim != 1:
            raise ValueError("EdgeList: dst/src must be equal-length 1-D arrays")
        order = np.lexsort((src, dst))
        self.dst = dst[order]
        self.src = src[order]
        self.n = int(n)
        counts_dst = np.bincount(self.dst, minlength=n)
        counts_src = np.bincount(self.src, minlength=n)
        if np.any(counts_dst == 0) or np.any(counts_src == 0):
            raise ValueError("EdgeList: every node needs at least one in- and out-edge")
        self.dst_ptr = np.concatenate([[0], np.cumsum(counts_dst)]).astype(np.int64)
        self.src_order = np.lexsort((self.dst, self.src))
        self.src_ptr = np.concatenate([[0], np.cumsum(counts_src)]).astype(np.int64)

    @property
    def n_edges(self) -> int:
        return self.dst.size

    def seg_lengths(self) -> np.ndarray:
        return np.diff(self.dst_ptr)


def segment_softmax(scores: Tensor, seg_ptr: np.ndarray) -> Tensor:
    """Softmax within contiguous row segments of an Ex1 score column.

    seg_ptr holds segment boundaries (len n_segments+1, covering all rows,
    no empty segments).
    """
    if scores.shape[1] != 1:
        raise ValueError("segment_softmax: scores must be a column vector")
    seg_ptr = np.asarray(seg_ptr, dtype=np.int64)
    starts = seg_ptr[:-1]
    lengths = np.diff(seg_ptr)
    if np.any(lengths <= 0) or seg_ptr[-1] != scores.shape[0]:
        raise ValueError("segment_softmax: segments must be non-empty and cover all rows")
    s = scores.values[:, 0]
    smax = np.repeat(np.maximum.reduceat(s, starts), lengths)
    e = np.exp(s - smax)
    denom = np.repeat(np.add.reduceat(e, starts), lengths)
    w = e / denom

    def bwd(g):
        gc = g[:, 0]
        dot = np.repeat(np.add.reduceat(w * gc, starts), lengths)
        _accum(scores, (w * (gc - dot))[:, None])

    return _make(w[:, None], (scores,), bwd)


def edge_aggregate(weights: Tensor, x: Tensor, edges: EdgeList) -> Tensor:
    """out[v] = sum over edges (v <- u) of weight_e * x[u]."""
    if weights.shape != (edges.n_edges, 1):
        raise ValueError("edge_aggregate: one weight per edge expected")
    if x.shape[0] != edges.n:
        raise ValueError("edge_aggregate: feature rows must match node count")
    w = weights.values
    xv = x.values
    contrib = w * xv[edges.src]
    out = np.add.reduceat(contrib, edges.dst_ptr[:-1], axis=0)

    def bwd(g):
        g_edges = g[edges.dst]
        _accum(weights, np.einsum("ij,ij->i", xv[edges.src], g_edges)[:, None])
        wg = (w * g_edges)[edges.src_order]
        _accum(x, np.add.reduceat(wg, edges.src_ptr[:-1], axis=0))

    return _make(out, (weights, x), bwd)


def spmm(adj, x: Tensor) -> Tensor:
    """Sparse adjacency times dense matrix; the adjacency is a constant."""
    if adj.n != x.shape[0]:
        raise ValueError(f"spmm: adjacency is {adj.n}x{adj.n}, features have {x.shape[0]} rows")

    def bwd(g):
        _accum(x, adj.apply_t(g))

    return _make(adj.apply(x.values), (x,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad of every reachable requires_grad tensor with d(loss)/d(tensor)."""
    if loss.shape != (1, 1):
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    _accum(loss, np.ones((1, 1)))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f, tensors, step: float = 1e-5) -> float:
    """Max symmetrized relative error between tape gradients and central differences.

    f must be a zero-argument callable that rebuilds the scalar loss from
    the current values of `tensors`. Inputs should sit away from relu
    kinks; the comparison uses |a-n| / (|a| + |n| + 1e-6) per coordinate.
    """
    tensors = list(tensors)
    out = f()
    zero_grads(tensors)
    backward(out)
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        v = t.values
        it = np.nditer(v, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = v[ix]
            v[ix] = orig + step
            fp = f().item()
            v[ix] = orig - step
            fm = f().item()
            v[ix] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(a[ix] - numeric) / (abs(a[ix]) + abs(numeric) + 1e-6)
            worst = max(worst, err)
            it.iternext()
    return worst
