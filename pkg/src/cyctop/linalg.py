import numpy as np

from .errors import ConvergenceError, ValidationError

SYMMETRY_TOL = 1e-10
RESIDUAL_TOL = 1e-8


def symmetric_eigh(m) -> tuple[np.ndarray, np.ndarray]:
    """Full eigendecomposition of a real symmetric matrix.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors as
    columns. LAPACK's divide-and-conquer driver does the work; every pair is
    checked against ``||Mv - lv|| <= 1e-8 * max(1, ||M||_2)`` before return.
    """
    if hasattr(m, "toarray"):
        m = m.toarray()
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    if m.size == 0:
        return np.zeros(0), np.zeros((0, 0))
    asym = float(np.max(np.abs(m - m.T)))
    if asym > SYMMETRY_TOL:
        raise ValidationError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    m = (m + m.T) / 2
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigensolver failed on {m.shape[0]}x{m.shape[0]} matrix: {exc}") from None
    scale = max(1.0, float(np.max(np.abs(w))))
    resid = float(np.max(np.linalg.norm(m @ v - v * w, axis=0)))
    if not np.isfinite(resid) or resid > RESIDUAL_TOL * scale:
        raise ConvergenceError(
            f"eigensolver residual {resid:.3g} exceeds tolerance on {m.shape[0]}x{m.shape[0]} matrix"
        )
    return w, v
