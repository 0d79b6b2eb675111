"""Univariate Gaussian kernel density estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateDistributionError(ValueError):
    """Raised when a bandwidth rule is applied to zero-variance data."""


@dataclass(frozen=True)
class KdeConfig:
    kernel: str = "gaussian"
    bandwidth: float = 3.0
    bandwidth_rule: str = "fixed"  # "fixed" or "silverman"

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        if self.bandwidth_rule not in ("fixed", "silverman"):
            raise ValueError(f"unknown bandwidth_rule {self.bandwidth_rule!r}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    def bandwidth_for(self, points) -> float:
        """Bandwidth to use for ``points`` under this config's rule.

        Silverman falls back to the fixed bandwidth on degenerate (constant or
        single-point) samples.
        """
        if self.bandwidth_rule == "silverman":
            try:
                return silverman_bandwidth(points)
            except DegenerateDistributionError:
                return self.bandwidth
        return self.bandwidth


def gaussian_kernel(u):
    """Standard normal density ``exp(-u**2 / 2) / sqrt(2 pi)``; works on scalars and arrays."""
    return INV_SQRT_2PI * np.exp(-0.5 * np.square(u))


def kde_density(query: float, points, cfg: KdeConfig = KdeConfig()) -> float:
    points = np.asarray(points, dtype=np.float64).ravel()
    if points.size == 0:
        raise ValueError("kde_density needs at least one point")
    h = cfg.bandwidth_for(points)
    return float(gaussian_kernel((query - points) / h).sum() / (points.size * h))


def density_at_points(points, cfg: KdeConfig = KdeConfig()) -> np.ndarray:
    """Density of each point against the whole set, its own kernel term included."""
    points = np.asarray(points, dtype=np.float64).ravel()
    if points.size == 0:
        raise ValueError("density_at_points needs at least one point")
    h = cfg.bandwidth_for(points)
    diffs = (points[:, None] - points[None, :]) / h
    return gaussian_kernel(diffs).sum(axis=1) / (points.size * h)


def columnwise_self_density(values: np.ndarray, h: float) -> np.ndarray:
    """Self-density of every entry against the other entries of its column.

    ``values`` has shape (n, m); column j is an independent sample of size n.
    Returns an (n, m) array whose [i, j] entry is the KDE of column j
    evaluated at ``values[i, j]``.
    """
    n = values.shape[0]
    diffs = (values[:, None, :] - values[None, :, :]) / h
    return gaussian_kernel(diffs).sum(axis=1) / (n * h)


def silverman_bandwidth(points) -> float:
    """Silverman's rule of thumb, ``1.06 * std * n**(-1/5)`` (sample std, ddof=1)."""
    points = np.asarray(points, dtype=np.float64).ravel()
    if points.size < 2:
        raise DegenerateDistributionError("silverman bandwidth needs at least 2 points")
    sd = float(np.std(points, ddof=1))
    if not sd > 0:
        raise DegenerateDistributionError("silverman bandwidth undefined for zero-variance points")
    return 1.06 * sd * points.size ** (-0.2)
