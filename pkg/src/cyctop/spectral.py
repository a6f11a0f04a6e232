"""Cycle Laplacian and edge positional encodings in cycles (EPEC)."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cycles import CycleIncidence
from .errors import ValidationError
from .linalg import symmetric_eigh

TRIVIAL_TOL = 1e-8


@dataclass(frozen=True)
class CycleLaplacian:
    a_c: np.ndarray  # shared-edge counts between basis cycles, zero diagonal
    d_c: np.ndarray  # degree vector (diagonal of D_C)
    l_c: np.ndarray


@dataclass(frozen=True)
class Epec:
    p_c: np.ndarray  # (Q, k)
    p_e: np.ndarray  # (E, k)
    eigenvalues: np.ndarray  # (k,), zero where padded
    effective_k: int
    no_cycles: bool = False

    @property
    def k(self) -> int:
        return self.p_e.shape[1]


def cycle_laplacian(t: CycleIncidence) -> CycleLaplacian:
    if t.q == 0:
        raise ValidationError("graph has no cycles; the cycle Laplacian is undefined")
    a = np.asarray((t.matrix @ t.matrix.T).toarray(), dtype=np.int64)
    np.fill_diagonal(a, 0)
    d = a.sum(axis=1)
    return CycleLaplacian(a, d, np.diag(d) - a)


def epec(t: CycleIncidence, cl: CycleLaplacian | None, k: int = 8) -> Epec:
    """Project the ``k`` lowest non-trivial cycle-Laplacian eigenvectors onto edges.

    Every edge receives the mean encoding of the basis cycles that contain it;
    edges on no cycle get zeros. Missing eigenvectors are zero-padded.
    """
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    if t.q == 0:
        warnings.warn("graph has no cycles; positional encodings are all zero", stacklevel=2)
        return Epec(np.zeros((0, k)), np.zeros((t.e, k)), np.zeros(k), 0, no_cycles=True)
    if cl is None:
        cl = cycle_laplacian(t)
    w, v = symmetric_eigh(cl.l_c.astype(np.float64))
    keep = np.flatnonzero(w > TRIVIAL_TOL)[:k]
    kk = len(keep)
    p_c = np.zeros((t.q, k))
    lam = np.zeros(k)
    p_c[:, :kk] = v[:, keep]
    lam[:kk] = w[keep]
    for c in range(kk):
        col = p_c[:, c]
        pivot = int(np.argmax(np.abs(col)))
        if col[pivot] < 0:
            p_c[:, c] = -col
    return Epec(p_c, project_to_edges(t, p_c), lam, kk)


def project_to_edges(t: CycleIncidence, p_c: np.ndarray) -> np.ndarray:
    """``H_E^+ T^T P_C`` with ``H_E`` the per-edge cycle count."""
    counts = np.asarray(t.matrix.sum(axis=0)).reshape(-1).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return inv[:, None] * np.asarray(t.matrix.T @ p_c)


def export_epec(enc: Epec, path):
    path = Path(path)
    np.savetxt(path, enc.p_e, delimiter=",", fmt="%.17g")
    sidecar = {
        "k": enc.k,
        "effective_k": enc.effective_k,
        "eigenvalues": [float(x) for x in enc.eigenvalues[: enc.effective_k]],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))
