"""Focal loss and its derivative with respect to the pre-sigmoid logit."""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


def focal_loss(y, p, alpha: float = 0.25, gamma: float = 2.0):
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0.0) | (p > 1.0)) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    logp = np.log(np.maximum(p, LOG_FLOOR))
    log1mp = np.log(np.maximum(1.0 - p, LOG_FLOOR))
    return -alpha * y * (1.0 - p) ** gamma * logp - (1.0 - alpha) * (1.0 - y) * p ** gamma * log1mp


def focal_grad_logit(y, logit, alpha: float = 0.25, gamma: float = 2.0):
    """d focal_loss(y, sigmoid(a)) / d a, evaluated without the log floor."""
    y = np.asarray(y, dtype=np.float64)
    a = np.asarray(logit, dtype=np.float64)
    p = 0.5 * (1.0 + np.tanh(0.5 * a))
    q = 1.0 - p
    # log p = -softplus(-a), log(1-p) = -softplus(a)
    logp = -np.logaddexp(0.0, -a)
    logq = -np.logaddexp(0.0, a)
    pos = alpha * q ** gamma * (gamma * p * logp - q)
    neg = -(1.0 - alpha) * p ** gamma * (gamma * q * logq - p)
    return y * pos + (1.0 - y) * neg
