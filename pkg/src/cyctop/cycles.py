"""Fundamental cycle basis, cycle incidence and cycle-restricted edge adjacency."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import TopologyError, ValidationError
from .graph import FunctionalGraph, TreeDecomposition, build_b1, build_hodge_l1
from .linalg import symmetric_eigh

SUPPORT_TOL = 1e-6
NULL_TOL = 1e-8


@dataclass(frozen=True)
class CycleIncidence:
    """Binary Q x E matrix; row q marks the edges of basis cycle q."""

    matrix: sp.csr_matrix
    method: str = "treepath"

    @property
    def q(self) -> int:
        return self.matrix.shape[0]

    @property
    def e(self) -> int:
        return self.matrix.shape[1]

    def rows(self) -> list[np.ndarray]:
        m = self.matrix
        return [m.indices[m.indptr[r]:m.indptr[r + 1]] for r in range(m.shape[0])]


def cycle_incidence(g: FunctionalGraph, td: TreeDecomposition, method: str = "nullspace") -> CycleIncidence:
    """One row per non-tree edge, in canonical order of those edges.

    ``nullspace`` reads the cycle off the kernel of the Hodge Laplacian of the
    tree plus that single edge; ``treepath`` closes the edge with the unique
    tree path between its endpoints. Both give the same matrix.
    """
    if len(td.tree_edges) + len(td.extra_edges) != g.n_edges:
        raise TopologyError("tree decomposition does not cover the graph's edges")
    if method == "nullspace":
        rows = _nullspace_cycles(g, td)
    elif method == "treepath":
        rows = _treepath_cycles(g, td)
    else:
        raise ValidationError(f"unknown cycle method {method!r}")
    return CycleIncidence(_rows_to_csr(rows, g.n_edges), method)


def _rows_to_csr(rows, n_cols) -> sp.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, dtype=np.int64)
    data = np.ones(len(indices), dtype=np.int64)
    t = sp.csr_matrix((data, indices, indptr), shape=(len(rows), n_cols))
    t.sort_indices()
    return t


def _nullspace_cycles(g, td):
    b1 = build_b1(g)
    tree = np.sort(td.tree_edges)
    rows = []
    for k in td.extra_edges:
        cols = np.sort(np.append(tree, k))
        l1 = build_hodge_l1(b1[:, cols]).toarray()
        w, v = symmetric_eigh(l1)
        tol = NULL_TOL * max(1.0, w[-1])
        nullity = int(np.sum(w <= tol))
        if nullity != 1:
            raise TopologyError(
                f"tree plus edge {tuple(g.edges[k])} has nullity {nullity}, expected exactly 1"
            )
        vec = np.abs(v[:, 0])
        rows.append(cols[vec > SUPPORT_TOL * vec.max()])
    return rows


def _treepath_cycles(g, td):
    n = g.n_nodes
    adj = [[] for _ in range(n)]
    for k in td.tree_edges:
        i, j = g.edges[k]
        adj[i].append((j, k))
        adj[j].append((i, k))
    parent = np.full(n, -1)
    parent_edge = np.full(n, -1)
    depth = np.full(n, -1)
    for root in range(n):
        if depth[root] >= 0:
            continue
        depth[root] = 0
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for w, k in adj[u]:
                if depth[w] < 0:
                    depth[w] = depth[u] + 1
                    parent[w] = u
                    parent_edge[w] = k
                    queue.append(w)
    rows = []
    for k in td.extra_edges:
        a, b = (int(x) for x in g.edges[k])
        path = [k]
        while a != b:
            if depth[a] < depth[b]:
                a, b = b, a
            if parent[a] < 0:
                raise TopologyError(f"extra edge {tuple(g.edges[k])} joins two tree components")
            path.append(parent_edge[a])
            a = parent[a]
        rows.append(np.sort(np.asarray(path)))
    return rows


def edge_cycle_adjacency(l1: sp.spmatrix, t: CycleIncidence) -> sp.csr_matrix:
    """Edges are adjacent when they share a node and at least one basis cycle."""
    if l1.shape != (t.e, t.e):
        raise ValidationError(f"L1 has shape {l1.shape} but T indexes {t.e} edges")
    shared = (t.matrix.T @ t.matrix).tocsr()
    a = sp.csr_matrix(l1, copy=True)
    a.eliminate_zeros()
    a.data = np.ones_like(a.data, dtype=np.int64)
    shared.eliminate_zeros()
    shared.data = np.ones_like(shared.data)
    a = a.multiply(shared).tocsr().astype(np.int64)
    a.eliminate_zeros()
    a.sort_indices()
    return a


def cycle_basis_combination(t: CycleIncidence, coeffs) -> np.ndarray:
    """Edge indicator of ``sum_q a_q C_q`` over GF(2) (symmetric difference)."""
    coeffs = np.asarray(coeffs, dtype=np.int64).reshape(-1)
    if len(coeffs) != t.q:
        raise ValidationError(f"expected {t.q} coefficients, got {len(coeffs)}")
    return np.asarray(t.matrix.T @ coeffs).reshape(-1) % 2


def is_simple_loop(g: FunctionalGraph, edge_ids) -> bool:
    """True when the edges form one connected closed walk with every node of degree 2."""
    edge_ids = np.asarray(edge_ids)
    if len(edge_ids) < 3:
        return False
    ends = g.edges[edge_ids]
    nodes, counts = np.unique(ends, return_counts=True)
    if np.any(counts != 2):
        return False
    # a 2-regular graph is a single loop iff it has as many nodes as edges and is connected
    local = {int(v): i for i, v in enumerate(nodes)}
    parent = list(range(len(nodes)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in ends:
        parent[find(local[int(i)])] = find(local[int(j)])
    return len({find(a) for a in range(len(nodes))}) == 1


def topology(g: FunctionalGraph, td: TreeDecomposition | None = None, method: str = "nullspace"):
    """Convenience bundle: (tree decomposition, T, L1, A_E)."""
    from .graph import max_spanning_tree

    td = td if td is not None else max_spanning_tree(g)
    t = cycle_incidence(g, td, method)
    l1 = build_hodge_l1(build_b1(g))
    return td, t, l1, edge_cycle_adjacency(l1, t)


def save_coo_csv(m: sp.spmatrix, path):
    coo = sp.coo_matrix(m)
    order = np.lexsort((coo.col, coo.row))
    lines = ["row,col,value"]
    for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        lines.append(f"{r},{c},{v:g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_coo_csv(path, shape) -> sp.csr_matrix:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix(shape, dtype=np.int64)
    return sp.csr_matrix(
        (data[:, 2].astype(np.int64), (data[:, 0].astype(np.int64), data[:, 1].astype(np.int64))),
        shape=shape,
    )


def export_incidence(t: CycleIncidence, path):
    path = Path(path)
    save_coo_csv(t.matrix, path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"q": t.q, "e": t.e, "method": t.method}, sort_keys=True))
