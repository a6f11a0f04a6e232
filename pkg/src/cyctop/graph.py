"""Functional graphs built from connectivity matrices.

Covers ingestion of correlation matrices, top-k thresholding into a binary
topology with signed edge signals, the node-edge incidence matrix, the
first-order Hodge Laplacian, maximum spanning forests and the first Betti
number.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

MAGIC = b"CYCG"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")  # magic, version, n, reserved
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class ConnectivityMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"connectivity matrix must be square, got shape {v.shape}")
        if v.shape[0] < 1:
            raise ValidationError("connectivity matrix is empty")
        if not np.all(np.isfinite(v)):
            raise ValidationError("connectivity matrix contains NaN or Inf entries")
        if not np.array_equal(v, v.T):
            raise ValidationError("connectivity matrix is not symmetric")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_array(cls, m) -> "ConnectivityMatrix":
        """Validate ``m`` and symmetrize it when the asymmetry is within tolerance."""
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"connectivity matrix must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("connectivity matrix contains NaN or Inf entries")
        asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
        if asym > SYMMETRY_TOL:
            raise ValidationError(f"asymmetric input (max |M - M^T| = {asym:.3g})")
        return cls((m + m.T) / 2)


@dataclass(frozen=True)
class FunctionalGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) int, lexicographically sorted, i < j
    edge_signals: np.ndarray  # (E,) float
    components: int

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(int(i), int(j)): k for k, (i, j) in enumerate(self.edges)}

    def slots(self) -> np.ndarray:
        """Position of every edge in the row-major upper triangle of the N x N matrix."""
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        return (i * (2 * n - i - 1)) // 2 + (j - i - 1)

    def to_json(self) -> dict:
        return {
            "n_nodes": int(self.n_nodes),
            "edges": [[int(i), int(j)] for i, j in self.edges],
            "signals": [float(s) for s in self.edge_signals],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FunctionalGraph":
        edges = np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2)
        signals = np.asarray(obj["signals"], dtype=np.float64)
        return make_graph(int(obj["n_nodes"]), edges, signals)


def make_graph(n_nodes: int, edges, signals=None) -> FunctionalGraph:
    """Build a validated graph, sorting edges into canonical order."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if signals is None:
        signals = np.ones(len(edges))
    signals = np.asarray(signals, dtype=np.float64).reshape(-1)
    if len(signals) != len(edges):
        raise ValidationError("edge count and signal count differ")
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    if len(edges) and (np.any(lo == hi) or lo.min() < 0 or hi.max() >= n_nodes):
        raise ValidationError("edges must join two distinct nodes in [0, N)")
    order = np.lexsort((hi, lo))
    edges = np.stack([lo[order], hi[order]], axis=1)
    signals = signals[order]
    if len(edges) > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
        raise ValidationError("duplicate edges")
    comps = UnionFind(n_nodes)
    for i, j in edges:
        comps.union(int(i), int(j))
    edges.setflags(write=False)
    signals.setflags(write=False)
    return FunctionalGraph(int(n_nodes), edges, signals, comps.n_sets)


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.n_sets = n

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.n_sets -= 1
        return True


# -- IO ---------------------------------------------------------------------


def load_connectivity(path, format: str | None = None) -> ConnectivityMatrix:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() in (".csv", ".txt") else "packed-binary"
    if not path.exists():
        raise ValidationError(f"no such file: {path}")
    if format == "csv":
        try:
            m = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from None
    elif format == "packed-binary":
        m = _read_packed(path.read_bytes(), str(path))
    else:
        raise ValidationError(f"unknown matrix format {format!r}")
    return ConnectivityMatrix.from_array(m)


def _read_packed(raw: bytes, name: str) -> np.ndarray:
    if len(raw) < HEADER.size:
        raise ValidationError(f"{name}: truncated header")
    magic, version, n, _ = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"{name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{name}: unsupported version {version}")
    body = raw[HEADER.size:]
    if len(body) != 8 * n * n:
        raise ValidationError(f"{name}: expected {n * n} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(n, n).astype(np.float64)


def save_connectivity(cm: ConnectivityMatrix | np.ndarray, path, format: str = "packed-binary"):
    values = cm.values if isinstance(cm, ConnectivityMatrix) else np.asarray(cm, dtype=np.float64)
    path = Path(path)
    if format == "packed-binary":
        n = values.shape[0]
        path.write_bytes(HEADER.pack(MAGIC, FORMAT_VERSION, n, 0) + values.astype("<f8").tobytes())
    elif format == "csv":
        np.savetxt(path, values, delimiter=",", fmt="%.17g")
    else:
        raise ValidationError(f"unknown matrix format {format!r}")


def save_graph_json(g: FunctionalGraph, path):
    Path(path).write_text(json.dumps(g.to_json()))


def load_graph_json(path) -> FunctionalGraph:
    try:
        obj = json.loads(Path(path).read_text())
        return FunctionalGraph.from_json(obj)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed graph file {path}: {exc}") from None


# -- construction -----------------------------------------------------------


def n_retained(n_nodes: int, quantile: float) -> int:
    pairs = n_nodes * (n_nodes - 1) // 2
    # guard against 0.25 * 35778 style products landing a hair above an integer
    return min(pairs, math.ceil(round(quantile * pairs, 9)))


def threshold_graph(cm: ConnectivityMatrix, quantile: float = 0.25) -> FunctionalGraph:
    """Keep the ``ceil(quantile * N(N-1)/2)`` strongest connections by absolute value.

    Ties go to the edge that comes first in lexicographic order. The retained
    edges carry their original signed correlation as signal.
    """
    if not (0 < quantile <= 1):
        raise ValidationError(f"quantile must lie in (0, 1], got {quantile}")
    n = cm.n_nodes
    if n < 2:
        raise ValidationError("thresholding needs at least two nodes")
    iu, ju = np.triu_indices(n, k=1)
    vals = cm.values[iu, ju]
    k = n_retained(n, quantile)
    keep = np.sort(np.argsort(-np.abs(vals), kind="stable")[:k])
    return make_graph(n, np.stack([iu[keep], ju[keep]], axis=1), vals[keep])


def build_b1(g: FunctionalGraph) -> sp.csc_matrix:
    """Signed node-edge incidence, -1 at the lower endpoint and +1 at the higher."""
    e = g.n_edges
    rows = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
    cols = np.concatenate([np.arange(e), np.arange(e)])
    data = np.concatenate([-np.ones(e), np.ones(e)])
    return sp.csc_matrix((data, (rows, cols)), shape=(g.n_nodes, e))


def build_hodge_l1(b1: sp.spmatrix) -> sp.csr_matrix:
    """Down Hodge Laplacian ``B1^T B1``; no 2-simplices are ever declared."""
    l1 = (b1.T @ b1).tocsr()
    l1.eliminate_zeros()
    l1.sort_indices()
    return l1


@dataclass(frozen=True)
class TreeDecomposition:
    tree_edges: np.ndarray
    extra_edges: np.ndarray
    q: int


def max_spanning_tree(g: FunctionalGraph) -> TreeDecomposition:
    """Kruskal on ``|signal|``; equal weights resolved by canonical edge order."""
    order = np.argsort(-np.abs(g.edge_signals), kind="stable")
    uf = UnionFind(g.n_nodes)
    in_tree = np.zeros(g.n_edges, dtype=bool)
    for k in order:
        i, j = g.edges[k]
        if uf.union(int(i), int(j)):
            in_tree[k] = True
    tree = np.flatnonzero(in_tree)
    extra = np.flatnonzero(~in_tree)
    return TreeDecomposition(tree, extra, len(extra))


def betti1(g: FunctionalGraph) -> int:
    return g.n_edges - g.n_nodes + g.components
