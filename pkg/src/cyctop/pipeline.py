"""From connectivity matrix to a model-ready edge batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch

from .cycles import CycleIncidence, topology
from .graph import ConnectivityMatrix, FunctionalGraph, TreeDecomposition, threshold_graph
from .spectral import Epec, epec


@dataclass(frozen=True)
class Sample:
    graph: FunctionalGraph
    tree: TreeDecomposition
    incidence: CycleIncidence
    l1: sp.csr_matrix
    a_e: sp.csr_matrix
    encoding: Epec
    label: int = 0

    @property
    def n_edges(self) -> int:
        return self.graph.n_edges


def prepare_sample(
    cm: ConnectivityMatrix | FunctionalGraph,
    label: int = 0,
    quantile: float = 0.25,
    k: int = 8,
    method: str = "treepath",
) -> Sample:
    g = cm if isinstance(cm, FunctionalGraph) else threshold_graph(cm, quantile)
    td, t, l1, a_e = topology(g, method=method)
    if t.q == 0:
        enc = Epec(np.zeros((0, k)), np.zeros((g.n_edges, k)), np.zeros(k), 0, no_cycles=True)
    else:
        enc = epec(t, None, k)
    return Sample(g, td, t, l1, a_e, enc, int(label))


@dataclass
class EdgeBatch:
    """Several graphs stacked into one disjoint edge set.

    ``src``/``dst`` list the nonzeros of the block-diagonal cycle adjacency,
    grouped by ``src``; the attention of edge ``i`` is normalised over the
    pairs with ``src == i``.
    """

    x: torch.Tensor  # (E, d)
    p: torch.Tensor  # (E, K)
    src: torch.Tensor  # (P,)
    dst: torch.Tensor  # (P,)
    active: torch.Tensor  # (E,) bool, edge has a non-empty neighbourhood
    graph_id: torch.Tensor  # (E,)
    slot: torch.Tensor  # (E,) upper-triangle position inside its own graph
    labels: torch.Tensor  # (B,)
    n_graphs: int
    n_slots: int

    @property
    def n_edges(self) -> int:
        return self.x.shape[0]


def collate(samples, use_epec: bool = True, dtype=torch.float64) -> EdgeBatch:
    n_nodes = {s.graph.n_nodes for s in samples}
    if len(n_nodes) != 1:
        raise ValueError(f"samples disagree on node count: {sorted(n_nodes)}")
    n = n_nodes.pop()
    xs, ps, srcs, dsts, gids, slots = [], [], [], [], [], []
    offset = 0
    for b, s in enumerate(samples):
        e = s.n_edges
        xs.append(s.graph.edge_signals.reshape(e, 1))
        enc = s.encoding.p_e
        ps.append(enc if use_epec else np.zeros_like(enc))
        coo = s.a_e.tocoo()
        order = np.lexsort((coo.col, coo.row))
        srcs.append(coo.row[order] + offset)
        dsts.append(coo.col[order] + offset)
        gids.append(np.full(e, b))
        slots.append(s.graph.slots())
        offset += e
    src = np.concatenate(srcs).astype(np.int64)
    active = np.zeros(offset, dtype=bool)
    active[src] = True
    return EdgeBatch(
        x=torch.as_tensor(np.concatenate(xs), dtype=dtype),
        p=torch.as_tensor(np.concatenate(ps), dtype=dtype),
        src=torch.as_tensor(src),
        dst=torch.as_tensor(np.concatenate(dsts).astype(np.int64)),
        active=torch.as_tensor(active),
        graph_id=torch.as_tensor(np.concatenate(gids).astype(np.int64)),
        slot=torch.as_tensor(np.concatenate(slots).astype(np.int64)),
        labels=torch.as_tensor([s.label for s in samples], dtype=dtype),
        n_graphs=len(samples),
        n_slots=n * (n - 1) // 2,
    )
