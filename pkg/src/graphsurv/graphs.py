"""Multi-scale spatial tissue graphs.

Builds the two-magnification graph pair: K-NN edges under Euclidean
distance at each scale, symmetrically normalized adjacencies with
self-loops (A+I convention so isolated nodes stay well-defined), and the
cross-scale parent map from coordinate containment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import EdgeList
from .common import DataError

# half-width of a low-scale patch footprint: 256 px at 1 micron/px, centered
DEFAULT_FOOTPRINT_HALF_WIDTH_UM = 128.0

_KNN_CHUNK = 512


class SparseAdjacency:
    """Symmetric non-negative sparse matrix stored as row-sorted COO triplets."""

    def __init__(self, n: int, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        self.n = int(n)
        self.rows = rows[order]
        self.cols = cols[order]
        self.vals = vals[order]
        if not np.all(np.isfinite(self.vals)) or np.any(self.vals < 0):
            raise DataError("adjacency values must be finite and non-negative")
        key = self.rows * self.n + self.cols
        if np.any(np.diff(key) == 0):
            raise DataError("duplicate (row, col) entry in adjacency")
        self._csr = sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.n, self.n))
        self._csr_t = self._csr.T.tocsr()

    @property
    def nnz(self) -> int:
        return self.vals.size

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._csr @ x

    def apply_t(self, x: np.ndarray) -> np.ndarray:
        return self._csr_t @ x

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def edge_list(self) -> EdgeList:
        """Directed edge list of the sparsity pattern (dst = row, src = col)."""
        return EdgeList(self.rows, self.cols, self.n)


@dataclass
class MultiScaleGraph:
    """Two-scale tissue graph with normalized adjacencies and the parent map."""

    n_low: int
    n_high: int
    adj_low: SparseAdjacency
    adj_high: SparseAdjacency
    parent: np.ndarray            # parent[h] = low-scale parent of high node h
    children: list[np.ndarray]    # children[v] = high nodes contained in low node v
    types_high: np.ndarray
    coords_low: np.ndarray
    coords_high: np.ndarray
    edges_low: EdgeList = field(init=False)
    edges_high: EdgeList = field(init=False)
    child_mean: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        if self.parent.shape != (self.n_high,):
            raise DataError("parent map length must equal high node count")
        self.edges_low = self.adj_low.edge_list()
        self.edges_high = self.adj_high.edge_list()
        # row-stochastic child-averaging operator (zero row when no children)
        rows, cols, vals = [], [], []
        for v, ch in enumerate(self.children):
            for h in ch:
                rows.append(v)
                cols.append(int(h))
                vals.append(1.0 / len(ch))
        self.child_mean = sp.csr_matrix(
            (np.array(vals), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)))
            if rows else (np.zeros(0), (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))),
            shape=(self.n_low, self.n_high),
        )
        self._child_mean_t = self.child_mean.T.tocsr()

    # duck-typed operator interface shared with SparseAdjacency, restricted to spmm
    @property
    def pool_op(self):
        outer = self

        class _Pool:
            n = outer.n_high  # input rows

            @staticmethod
            def apply(x):
                return outer.child_mean @ x

            @staticmethod
            def apply_t(g):
                return outer._child_mean_t @ g

        return _Pool


def knn_edges(coords: np.ndarray, k: int) -> set[tuple[int, int]]:
    """Undirected K-NN edge set under Euclidean distance.

    Directed K-NN lists are symmetrized by union; self is excluded and
    distance ties resolve to the smaller node index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not np.all(np.isfinite(coords)):
        raise DataError("knn_edges: coordinates must be finite")
    if k < 1:
        raise DataError("knn_edges: k must be >= 1")
    if n < k + 1:
        raise DataError(f"knn_edges: need at least {k + 1} nodes, got {n}")
    edges: set[tuple[int, int]] = set()
    for start in range(0, n, _KNN_CHUNK):
        block = coords[start:start + _KNN_CHUNK]
        d2 = ((block[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
        for bi in range(block.shape[0]):
            i = start + bi
            row = d2[bi].copy()
            row[i] = np.inf
            order = np.lexsort((np.arange(n), row))[:k]
            for j in order:
                a, b = (i, int(j)) if i < j else (int(j), i)
                edges.add((a, b))
    return edges


def normalize_adjacency(edges, n: int) -> SparseAdjacency:
    """Symmetric renormalization D^-1/2 (A + I) D^-1/2 with self-loop degrees."""
    rows = [i for i in range(n)]
    cols = [i for i in range(n)]
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise DataError(f"normalize_adjacency: bad edge ({a}, {b})")
        rows += [a, b]
        cols += [b, a]
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    dinv = 1.0 / np.sqrt(deg)
    vals = dinv[rows] * dinv[cols]
    return SparseAdjacency(n, rows, cols, vals)


def cross_scale_edges(coords_low: np.ndarray, half_width: float,
                      coords_high: np.ndarray) -> np.ndarray:
    """Map each high-scale center to its containing low-scale footprint.

    Footprints are axis-aligned squares [x-w, x+w] x [y-w, y+w]; boundary
    ties resolve to the lower-index low node. Returns parent[h].
    """
    coords_low = np.asarray(coords_low, dtype=np.float64)
    coords_high = np.asarray(coords_high, dtype=np.float64)
    parent = np.full(coords_high.shape[0], -1, dtype=np.int64)
    for h, (x, y) in enumerate(coords_high):
        inside = np.flatnonzero(
            (np.abs(coords_low[:, 0] - x) <= half_width)
            & (np.abs(coords_low[:, 1] - y) <= half_width)
        )
        if inside.size == 0:
            raise DataError(f"high patch {h} at ({x}, {y}) lies outside every low footprint")
        parent[h] = inside[0]
    return parent


def children_of(parent: np.ndarray, n_low: int) -> list[np.ndarray]:
    out = [np.zeros(0, dtype=np.int64) for _ in range(n_low)]
    order = np.argsort(parent, kind="stable")
    sorted_parents = parent[order]
    bounds = np.searchsorted(sorted_parents, np.arange(n_low + 1))
    for v in range(n_low):
        out[v] = order[bounds[v]:bounds[v + 1]]
    return out


def build_multiscale(slide, k_low: int = 8, k_high: int = 8,
                     half_width: float = DEFAULT_FOOTPRINT_HALF_WIDTH_UM) -> MultiScaleGraph:
    """Compose K-NN graphs, normalization and the parent map for one slide."""
    coords_low = slide.coords_low()
    coords_high = slide.coords_high()
    adj_low = normalize_adjacency(knn_edges(coords_low, k_low), coords_low.shape[0])
    adj_high = normalize_adjacency(knn_edges(coords_high, k_high), coords_high.shape[0])
    try:
        parent = cross_scale_edges(coords_low, half_width, coords_high)
    except DataError as e:
        raise DataError(f"slide {slide.slide_id}: {e}") from None
    children = children_of(parent, coords_low.shape[0])
    return MultiScaleGraph(
        n_low=coords_low.shape[0],
        n_high=coords_high.shape[0],
        adj_low=adj_low,
        adj_high=adj_high,
        parent=parent,
        children=children,
        types_high=slide.types_high(),
        coords_low=coords_low,
        coords_high=coords_high,
    )


def dump_graph_csv(graph: MultiScaleGraph, out_dir, slide_id: str) -> None:
    """Debug dump: row,col,value per adjacency plus the high->low parent map."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, adj in (("low", graph.adj_low), ("high", graph.adj_high)):
        with open(out / f"{slide_id}.adj_{name}.csv", "w") as f:
            f.write("row,col,value\n")
            for r, c, v in zip(adj.rows, adj.cols, adj.vals):
                f.write(f"{r},{c},{float(v)!r}\n")
    with open(out / f"{slide_id}.parents.csv", "w") as f:
        f.write("high_id,low_id\n")
        for h, p in enumerate(graph.parent):
            f.write(f"{h},{p}\n")
