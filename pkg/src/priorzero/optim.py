"""Plain SGD with global gradient-norm clipping."""

from __future__ import annotations

import numpy as np


def global_norm(grad: np.ndarray) -> float:
    return float(np.sqrt(np.sum(grad * grad)))


def clip_by_global_norm(grad: np.ndarray, clip: float) -> tuple[np.ndarray, float]:
    """Return (possibly scaled gradient, pre-clip norm)."""
    norm = global_norm(grad)
    if clip > 0.0 and norm > clip:
        grad = grad * (clip / norm)
    return grad, norm


def sgd_step(flat_params: np.ndarray, grad: np.ndarray, lr: float, clip: float = 1.0) -> tuple[np.ndarray, float]:
    """One descent step on the flattened parameter vector; returns (new params, grad norm)."""
    grad, norm = clip_by_global_norm(grad, clip)
    return flat_params - lr * grad, norm
