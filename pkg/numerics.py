"""
Dense linear-algebra and scalar helpers shared by the learner and the oracles.

The covariance state tracks Lambda_t = I + sum phi phi^T together with its
inverse (Sherman-Morrison updates, periodic Cholesky refresh) and its log
determinant, plus the inverse frozen at the start of the current epoch.
"""

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, logsumexp

from config import settings
from errors import NumericFailure, RejectedInputError

logger = logging.getLogger(__name__)

# clamp events and similar recoverable numeric incidents, keyed by kind
numeric_warnings: Counter = Counter()


@dataclass(frozen=True, eq=False)
class CovarianceState:
    dim: int
    lam: np.ndarray
    lam_inv: np.ndarray
    log_det: float
    anchor_inv: np.ndarray
    anchor_log_det: float
    updates_since_refresh: int = 0

    @classmethod
    def identity(cls, dim: int) -> "CovarianceState":
        if dim < 1:
            raise RejectedInputError(f"dimension must be positive, got {dim}")
        eye = np.eye(dim)
        return cls(dim=dim, lam=eye, lam_inv=eye.copy(), log_det=0.0,
                   anchor_inv=eye.copy(), anchor_log_det=0.0)

    def inverse_residual(self) -> float:
        """Max-entry deviation of lam @ lam_inv from the identity."""
        return float(np.max(np.abs(self.lam @ self.lam_inv - np.eye(self.dim))))

    def with_anchor(self) -> "CovarianceState":
        """Freeze the current inverse as the epoch anchor."""
        return replace(self, anchor_inv=self.lam_inv.copy(), anchor_log_det=self.log_det)


def _as_feature(phi, dim: int) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (dim,):
        raise RejectedInputError(f"feature must have shape ({dim},), got {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise RejectedInputError("feature vector has non-finite entries")
    return phi


def rank_one_update(state: CovarianceState, phi, refresh_every: Optional[int] = None) -> CovarianceState:
    """Lambda <- Lambda + phi phi^T with the Sherman-Morrison inverse update."""
    phi = _as_feature(phi, state.dim)
    if not np.any(phi):
        return state

    u = state.lam_inv @ phi
    q = float(phi @ u)
    lam = state.lam + np.outer(phi, phi)
    lam_inv = state.lam_inv - np.outer(u, u) / (1.0 + q)
    lam_inv = 0.5 * (lam_inv + lam_inv.T)
    updated = replace(state, lam=lam, lam_inv=lam_inv,
                      log_det=state.log_det + float(np.log1p(max(q, 0.0))),
                      updates_since_refresh=state.updates_since_refresh + 1)

    period = refresh_every if refresh_every is not None else settings.refresh_every
    if period and updated.updates_since_refresh >= period:
        updated = refresh_inverse(updated)
    return updated


def refresh_inverse(state: CovarianceState) -> CovarianceState:
    """Recompute inverse and log determinant from a Cholesky factorization."""
    try:
        factor = linalg.cho_factor(state.lam, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericFailure(f"covariance lost positive definiteness: {exc}") from exc

    lam_inv = linalg.cho_solve(factor, np.eye(state.dim))
    lam_inv = 0.5 * (lam_inv + lam_inv.T)
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    drift = state.inverse_residual()
    if drift > settings.inverse_tolerance:
        logger.warning("covariance refresh: inverse drift %.3e above tolerance", drift)
    else:
        logger.debug("covariance refresh: drift before=%.3e", drift)
    return replace(state, lam_inv=lam_inv, log_det=log_det, updates_since_refresh=0)


def elliptical_norm(inv: np.ndarray, phi) -> float:
    """sqrt(phi^T inv phi); a negative quadratic form is clamped to zero."""
    phi = np.asarray(phi, dtype=np.float64)
    q = float(phi @ inv @ phi)
    if q < 0.0:
        numeric_warnings["negative_quadratic_form"] += 1
        logger.warning("negative quadratic form %.3e clamped to 0", q)
        q = 0.0
    return float(np.sqrt(q))


def elliptical_norms(inv: np.ndarray, phis: np.ndarray) -> np.ndarray:
    """Row-wise elliptical norms for a stack of feature vectors (..., d)."""
    phis = np.asarray(phis, dtype=np.float64)
    q = np.einsum("...i,ij,...j->...", phis, inv, phis)
    negative = q < 0.0
    if np.any(negative):
        numeric_warnings["negative_quadratic_form"] += int(np.count_nonzero(negative))
        logger.warning("%d negative quadratic forms clamped to 0", int(np.count_nonzero(negative)))
        q = np.where(negative, 0.0, q)
    return np.sqrt(q)


def weighted_logsumexp(weights, values, eta: float) -> float:
    """(1/eta) log sum_a w_a exp(eta v_a), bounded by the values on the support."""
    weights = np.asarray(weights, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if eta <= 0:
        raise RejectedInputError(f"eta must be positive, got {eta}")
    if weights.shape != values.shape:
        raise RejectedInputError("weights and values must have the same shape")
    if np.any(weights < 0) or not np.any(weights > 0):
        raise RejectedInputError("weights must be non-negative with positive mass")
    if abs(weights.sum() - 1.0) > 1e-12 * max(1, weights.size):
        raise RejectedInputError(f"weights sum to {weights.sum()!r}, expected 1")

    support = weights > 0
    result = float(logsumexp(eta * values[support], b=weights[support])) / eta
    return float(np.clip(result, values[support].min(), values[support].max()))


def sigmoid(z):
    """Logistic function; saturates without overflow."""
    return expit(z)
