import logging

import numpy as np
from scipy import linalg

from app.exceptions import SingularGram
from app.models import FitResult

logger = logging.getLogger(__name__)

CHOLESKY_COND_MAX = 1e8
COND_MAX = 1e12


def tol_fit(Y: np.ndarray) -> float:
    return 1e-8 * (1.0 + (float(np.max(np.abs(Y))) if Y.size else 0.0))


def min_norm_fit(X: np.ndarray, Y: np.ndarray, w_start: np.ndarray) -> FitResult:
    """Closest interpolator to ``w_start``: w = w_start + X (XᵀX)⁻¹ (Y − Xᵀ w_start)."""
    p, m = X.shape
    if m == 0:
        return FitResult(w=np.array(w_start, dtype=float, copy=True), residual_norm=0.0,
                         conditioning=1.0, method="noop")
    if m >= p:
        raise SingularGram(f"min-norm fit needs m < p (m={m}, p={p})")

    r = Y - X.T @ w_start
    gram = X.T @ X
    eigvals = linalg.eigvalsh(gram)
    lo, hi = float(eigvals[0]), float(eigvals[-1])
    cond = hi / lo if lo > 0 else np.inf

    if cond <= CHOLESKY_COND_MAX:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
        s = linalg.cho_solve(factor, r, check_finite=False)
        w = w_start + X @ s
        method = "cholesky"
    elif cond <= COND_MAX:
        # X P = Q R, so Xᵀ(Q u) = r is Rᵀ u = Pᵀ r.
        Q, R, piv = linalg.qr(X, mode="economic", pivoting=True, check_finite=False)
        u = linalg.solve_triangular(R, r[piv], trans="T", check_finite=False)
        w = w_start + Q @ u
        method = "qr"
        logger.debug(f"Gram condition {cond:.3e} above Cholesky limit, using pivoted QR")
    else:
        raise SingularGram(f"Gram condition estimate {cond:.3e} exceeds {COND_MAX:.0e}")

    residual = X.T @ w - Y
    residual_norm = float(np.linalg.norm(residual))
    if residual.size and float(np.max(np.abs(residual))) > tol_fit(Y):
        raise SingularGram(
            f"interpolation residual {float(np.max(np.abs(residual))):.3e} exceeds tolerance {tol_fit(Y):.3e}"
        )
    return FitResult(w=w, residual_norm=residual_norm, conditioning=cond, method=method)


def project(X: np.ndarray, v: np.ndarray) -> np.ndarray:
    """P_X v, the orthogonal projection onto the column space of X."""
    return min_norm_fit(X, X.T @ v, np.zeros(X.shape[0])).w


def pinv_apply(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    """X† z for full-column-rank X, i.e. X (XᵀX)⁻¹ z."""
    return min_norm_fit(X, z, np.zeros(X.shape[0])).w
