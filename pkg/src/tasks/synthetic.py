"""
Synthetic Density Tasks: 1D Gaussian Mixture, 2D Checkerboard, 1D Gaussian Shift
"""

from typing import List

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import norm

from src.core.tensor import DTYPE, Rng, rand, randn
from src.errors import ShapeError


class GmmSpec(BaseModel):
    """Weights, means and variances of a 1D Gaussian mixture"""
    model_config = ConfigDict(extra="forbid")

    weights: List[float] = Field(default_factory=lambda: [0.35, 0.25, 0.4])
    means: List[float] = Field(default_factory=lambda: [1.5, 0.5, -1.5])
    variances: List[float] = Field(default_factory=lambda: [0.04, 0.04, 0.04])

    @model_validator(mode="after")
    def _check_mixture(self):
        if not len(self.weights) == len(self.means) == len(self.variances):
            raise ValueError("weights, means and variances need the same length")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got {self.weights}")
        if any(v <= 0 for v in self.variances):
            raise ValueError(f"variances must be positive, got {self.variances}")
        return self

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))


def sample_gmm_with_components(rng: Rng, spec: GmmSpec, n: int):
    """
    Draw n samples and the component each came from

    Returns:
        (samples [n, 1], component indices [n])
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        return torch.zeros((0, 1), dtype=DTYPE), torch.zeros((0,), dtype=torch.long)
    weights = torch.tensor(spec.weights, dtype=DTYPE)
    components = torch.multinomial(weights, n, replacement=True, generator=rng.generator)
    means = torch.tensor(spec.means, dtype=DTYPE)[components]
    stds = torch.sqrt(torch.tensor(spec.variances, dtype=DTYPE))[components]
    samples = means + stds * randn(rng, (n,))
    return samples[:, None], components


def sample_gmm(rng: Rng, spec: GmmSpec, n: int) -> torch.Tensor:
    """i.i.d. mixture draws: a categorical component, then its Gaussian. Shape [n, 1]"""
    return sample_gmm_with_components(rng, spec, n)[0]


def gmm_density(spec: GmmSpec, x) -> np.ndarray:
    """Mixture density evaluated pointwise"""
    x = np.asarray(x, dtype=np.float64)
    return sum(
        w * norm.pdf(x, loc=mu, scale=np.sqrt(var))
        for w, mu, var in zip(spec.weights, spec.means, spec.variances)
    )


class CheckerboardSpec(BaseModel):
    """
    Uniform density on alternating cells of [−extent, extent]²

    Cell (i, j), counted from the lower-left corner, is "on" when i + j is even.
    """
    model_config = ConfigDict(extra="forbid")

    extent: float = Field(2.0, gt=0.0)
    cells: int = Field(4, gt=0)

    @model_validator(mode="after")
    def _check_cells(self):
        if self.cells % 2:
            raise ValueError(f"cells must be even, got {self.cells}")
        return self

    @property
    def cell_size(self) -> float:
        return 2.0 * self.extent / self.cells

    def on_cells(self) -> np.ndarray:
        """[#on, 2] integer (i, j) indices of the populated cells"""
        i, j = np.meshgrid(np.arange(self.cells), np.arange(self.cells), indexing="ij")
        mask = (i + j) % 2 == 0
        return np.stack([i[mask], j[mask]], axis=1)

    def cell_masses(self) -> np.ndarray:
        """[cells, cells] exact probability of each cell, indexed [i (x), j (y)]"""
        masses = np.zeros((self.cells, self.cells))
        on = self.on_cells()
        masses[on[:, 0], on[:, 1]] = 1.0 / len(on)
        return masses


def sample_checkerboard(rng: Rng, spec: CheckerboardSpec, n: int) -> torch.Tensor:
    """
    Pick an "on" cell uniformly, then a uniform point inside it

    Returns:
        Tensor [n, 2]
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    on = torch.as_tensor(spec.on_cells(), dtype=DTYPE)
    picks = torch.randint(len(on), (n,), generator=rng.generator)
    corners = -spec.extent + spec.cell_size * on[picks]
    return corners + spec.cell_size * rand(rng, (n, 2))


def checkerboard_support(spec: CheckerboardSpec, x: torch.Tensor) -> torch.Tensor:
    """Boolean [n]: whether each point lies in an "on" cell"""
    if x.dim() != 2 or x.shape[1] != 2:
        raise ShapeError(f"expected [n, 2] points, got {tuple(x.shape)}")
    idx = torch.floor((x + spec.extent) / spec.cell_size).long()
    inside = ((idx >= 0) & (idx < spec.cells)).all(dim=1)
    return inside & (idx.sum(dim=1) % 2 == 0)


class ShiftSpec(BaseModel):
    """x_data = x0 + μ with x0 ~ N(0, 1); the exact average velocity is μ everywhere"""
    model_config = ConfigDict(extra="forbid")

    mu: float = 2.0
