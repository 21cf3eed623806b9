"""Soft normalized ranks from pairwise sigmoid comparisons.

``R_i = (1/N) sum_{j != i} sigmoid((s_j - s_i) / tau)`` approaches the count
of scores above ``s_i`` divided by ``N`` as ``tau -> 0``. Rank weights are
``r = exp(-R)``, so the top-scored element gets the weight closest to 1.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError

DEFAULT_TAU = 0.1


def _validate(scores, tau):
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("soft rank of an empty sequence")
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s


def _pairwise_sigmoid(s, tau):
    # x[i, j] = (s_j - s_i) / tau
    x = (s[None, :] - s[:, None]) / tau
    sig = expit(x)
    np.fill_diagonal(sig, 0.0)
    return sig


def soft_normalized_rank(scores, tau: float = DEFAULT_TAU) -> np.ndarray:
    s = _validate(scores, tau)
    return _pairwise_sigmoid(s, tau).sum(axis=1) / s.size


def rank_weight(R) -> np.ndarray:
    return np.exp(-np.asarray(R, dtype=float))


def soft_rank_gradient(scores, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Jacobian ``J[i, j] = dR_i / ds_j``."""
    s = _validate(scores, tau)
    sig = _pairwise_sigmoid(s, tau)
    dsig = sig * (1.0 - sig) / (tau * s.size)
    jac = dsig.copy()
    np.fill_diagonal(jac, -dsig.sum(axis=1))
    return jac


def hard_normalized_rank(scores) -> np.ndarray:
    """Number of strictly larger scores, over N; the tau -> 0 limit for distinct scores."""
    s = np.asarray(scores, dtype=float).ravel()
    return (s[None, :] > s[:, None]).sum(axis=1) / s.size
