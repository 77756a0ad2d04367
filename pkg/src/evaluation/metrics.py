"""
Histogram Density Estimates and Distribution Distances

TV is reported unhalved (Σ|p − q| ∈ [0, 2]); KL is smoothed with a small eps and
renormalized before scipy's relative-entropy kernel.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import entropy

from src.errors import ShapeError


class EvalGrid(BaseModel):
    """
    Histogram grid used by evaluation

    pooled=True flattens every coordinate of every sample into one 1D marginal
    (trajectory tasks).
    """
    model_config = ConfigDict(extra="forbid")

    bounds: List[Tuple[float, float]] = Field(default_factory=lambda: [(-4.0, 4.0)])
    bins: List[int] = Field(default_factory=lambda: [100])
    pooled: bool = False

    @model_validator(mode="after")
    def _check_grid(self):
        if len(self.bounds) != len(self.bins):
            raise ValueError(f"{len(self.bounds)} bounds for {len(self.bins)} bin counts")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        if any(b <= 0 for b in self.bins):
            raise ValueError(f"bin counts must be positive, got {self.bins}")
        return self


@dataclass
class HistDensity:
    """Normalized bin masses over a bounded grid"""
    bounds: Tuple[Tuple[float, float], ...]
    bins: Tuple[int, ...]
    masses: np.ndarray
    clipped: int = 0

    def same_grid(self, other: "HistDensity") -> bool:
        return self.bounds == other.bounds and self.bins == other.bins

    def edges(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(self.bounds, self.bins)]

    def centers(self) -> List[np.ndarray]:
        return [0.5 * (e[:-1] + e[1:]) for e in self.edges()]


def _as_numpy(samples) -> np.ndarray:
    if isinstance(samples, torch.Tensor):
        samples = samples.detach().cpu().numpy()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    return samples


def histogram(samples, bounds: Sequence[Tuple[float, float]], bins: Sequence[int]) -> HistDensity:
    """
    Normalized histogram; out-of-bounds samples are clipped into the edge bins

    Args:
        samples: [n, d] samples (torch or numpy)
        bounds: (lo, hi) per dimension
        bins: Bin count per dimension

    Returns:
        HistDensity with masses summing to 1
    """
    x = _as_numpy(samples)
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    bins = tuple(int(b) for b in bins)
    if x.shape[0] == 0:
        raise ShapeError("histogram of zero samples")
    if x.shape[1] != len(bounds):
        raise ShapeError(f"{x.shape[1]}-dimensional samples for a {len(bounds)}-dimensional grid")

    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    outside = np.any((x < lo) | (x > hi), axis=1)
    clipped = int(outside.sum())
    if clipped:
        logger.debug(f"📐 {clipped} of {x.shape[0]} samples clipped into edge bins")
    # nudge inside so the upper edge lands in the last bin
    x = np.clip(x, lo, np.nextafter(hi, lo))

    counts, _ = np.histogramdd(x, bins=bins, range=bounds)
    return HistDensity(bounds=bounds, bins=bins, masses=counts / counts.sum(), clipped=clipped)


def histogram_on_grid(samples, grid: EvalGrid) -> HistDensity:
    """Histogram of samples on an evaluation grid (pooling all coordinates when asked)"""
    x = _as_numpy(samples)
    if grid.pooled:
        x = x.reshape(-1, 1)
    return histogram(x, grid.bounds, grid.bins)


def _check_grids(p: HistDensity, q: HistDensity):
    if not p.same_grid(q):
        raise ShapeError(f"histogram grids differ: {p.bounds}/{p.bins} vs {q.bounds}/{q.bins}")


def tv_distance(p: HistDensity, q: HistDensity) -> float:
    """Σ_i |p_i − q_i|, in [0, 2]"""
    _check_grids(p, q)
    return float(np.abs(p.masses - q.masses).sum())


def kl_divergence(p: HistDensity, q: HistDensity, eps: float = 1e-10) -> float:
    """KL(p ‖ q) over eps-smoothed, renormalized bin masses"""
    _check_grids(p, q)
    p_s = p.masses.ravel() + eps
    q_s = q.masses.ravel() + eps
    return float(entropy(p_s / p_s.sum(), q_s / q_s.sum()))


def wasserstein2_1d(samples_p, samples_q) -> float:
    """
    Empirical W₂² between equal-size 1D sample sets

    The sorted (quantile) coupling is optimal in one dimension.
    """
    a = _as_numpy(samples_p).ravel()
    b = _as_numpy(samples_q).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"W2 needs equal sample counts, got {a.size} and {b.size}")
    return float(np.mean((np.sort(a) - np.sort(b)) ** 2))
