"""Accuracy and communication metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricRecord:
    t: int
    mse: float
    cum_bits: int
    cum_bits_quantized: int
    quant_noise_sq: float
    residual: float = 0.0


def mse(x, x_star):
    """Summed squared error ``sum_i ||x_i - x_i*||^2``."""
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    if x.shape != x_star.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_star.shape}")
    return float(np.sum((x - x_star) ** 2))


def comm_cost(T, m, l, u=1, init_bits_per_scalar=64):
    """Total bits: initialization plus ``T * 2m * l * u``."""
    return 2 * m * u * init_bits_per_scalar + T * 2 * m * l * u


def iterations_to_threshold(trace, eps):
    """First iteration whose MSE is at most ``eps``, or None."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    for rec in trace:
        if rec.mse <= eps:
            return rec.t
    return None


def bits_to_threshold(trace, eps):
    """Cumulative bits spent when the MSE first reaches ``eps``, or None."""
    for rec in trace:
        if rec.mse <= eps:
            return rec.cum_bits
    return None
