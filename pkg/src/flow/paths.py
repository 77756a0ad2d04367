"""
Interpolant Paths, Conditional Velocity and the (t, r) Sampler

Two clocks are in play:
- path time s: prior at s=0, data at s=1, x_s = s·x1 + (1−s)·x0 + γ(s)·ε
- network time t = 1 − s: the sampler draws pairs r ≤ t and the network is
  conditioned on (t, t − r)

The network output is stored in path direction, so moving from network time t to
r ≤ t is x ← x + (t − r)·û_{t,r}(x) and the full span (t, r) = (1, 0) is
x_data ≈ x_prior + û_{1,0}(x_prior).
"""

from dataclasses import dataclass
from typing import Callable, Literal, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import simpson

from src.core.tensor import DTYPE, Rng, batch_broadcast, rand, randn
from src.errors import NumericalError, ShapeError

# d(network time)/d(path time); the CMFM jvp moves x along ORIENTATION·u_s(x|z)
ORIENTATION = -1.0

# Full-span generation endpoints in network time
GENERATION_T = 1.0
GENERATION_R = 0.0


class InterpolantConfig(BaseModel):
    """Noise schedule γ(s) = η(1 − s) plus the RMFlow noise levels"""
    model_config = ConfigDict(extra="forbid")

    eta: float = Field(5e-2, ge=0.0)
    sigma_min: float = Field(1e-3, ge=0.0)
    sigma: float = Field(5e-4, ge=0.0)
    sigma_c: float = Field(1e-3, ge=0.0)
    t_clamp: float = 1.0 - 1e-5

    @model_validator(mode="after")
    def _check_noise_levels(self):
        # sigma == sigma_min is admitted: it switches the noise injection off
        if self.sigma > self.sigma_min:
            raise ValueError(
                f"need sigma <= sigma_min, got sigma={self.sigma}, sigma_min={self.sigma_min}"
            )
        if self.eta > 0 and not 0.0 < self.t_clamp < 1.0:
            raise ValueError(f"t_clamp must lie in (0, 1) when eta > 0, got {self.t_clamp}")
        return self

    @property
    def injection_variance(self) -> float:
        """σ_min² − σ²"""
        return self.sigma_min ** 2 - self.sigma ** 2


class TimeSamplerConfig(BaseModel):
    """
    Pair sampler for (t, r)

    "linear": t has density 2t; "uniform": t, r are the max/min of two U[0,1] draws.
    With probability q the pair keeps r < t, otherwise r = t.
    """
    model_config = ConfigDict(extra="forbid")

    q: float = Field(0.25, ge=0.0, le=1.0)
    distribution: Literal["linear", "uniform"] = "linear"


@dataclass
class FlowBatch:
    """One CMFM evaluation: coupling, noisy point, network times, conditional velocity"""
    x0: torch.Tensor
    x1: torch.Tensor
    xt: torch.Tensor
    t: torch.Tensor
    r: torch.Tensor
    v_cond: torch.Tensor

    def __post_init__(self):
        if bool((self.r > self.t).any()):
            raise ShapeError("FlowBatch requires r <= t elementwise")


def path_time(t_net: torch.Tensor) -> torch.Tensor:
    """Network time → path time"""
    return 1.0 - t_net


def sample_times(rng: Rng, cfg: TimeSamplerConfig, batch: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draw network-time pairs with r ≤ t

    Args:
        rng: Random stream
        cfg: Sampler configuration
        batch: Number of pairs

    Returns:
        (t, r), each of shape [batch]
    """
    if cfg.distribution == "linear":
        # inverse CDF of p(t) = 2t
        t = torch.sqrt(rand(rng, (batch,)))
        r_below = t * rand(rng, (batch,))
    else:
        a, b = rand(rng, (batch,)), rand(rng, (batch,))
        t, r_below = torch.maximum(a, b), torch.minimum(a, b)

    keep_gap = rand(rng, (batch,)) < cfg.q
    r = torch.where(keep_gap, r_below, t)
    return t, r


def interpolate(
    rng: Rng,
    cfg: InterpolantConfig,
    x0: torch.Tensor,
    x1: torch.Tensor,
    s: torch.Tensor,
) -> torch.Tensor:
    """
    Noisy point on the path between prior x0 and target x1

    Args:
        rng: Random stream (untouched when eta == 0)
        cfg: Interpolant configuration
        x0: Prior samples [B, d]
        x1: Target samples [B, d]
        s: Path times [B]

    Returns:
        x_s = s·x1 + (1−s)·x0 + η(1−s)·ε
    """
    if x0.shape != x1.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ")
    s_b = batch_broadcast(s, x0)
    xs = s_b * x1 + (1.0 - s_b) * x0
    if cfg.eta > 0:
        xs = xs + cfg.eta * (1.0 - s_b) * randn(rng, x0.shape)
    return xs


def conditional_velocity(
    cfg: InterpolantConfig,
    x: torch.Tensor,
    x0: torch.Tensor,
    x1: torch.Tensor,
    s: torch.Tensor,
) -> torch.Tensor:
    """
    u_s(x | x0, x1) = (γ̇/γ)·(x − s·x1 − (1−s)·x0) + (x1 − x0)

    With γ(s) = η(1−s), γ̇/γ = −1/(1−s); at η = 0 only x1 − x0 remains.
    """
    drift = x1 - x0
    if cfg.eta == 0:
        return drift
    if bool((s >= cfg.t_clamp).any()):
        raise NumericalError(f"path time reached t_clamp={cfg.t_clamp}; γ̇/γ is singular at 1")
    s_b = batch_broadcast(s, x)
    return -(x - s_b * x1 - (1.0 - s_b) * x0) / (1.0 - s_b) + drift


def mean_velocity_exact(
    path: Callable[[float], torch.Tensor],
    x_t: torch.Tensor,
    t: float,
    r: float,
    n_quad: int = 129,
) -> torch.Tensor:
    """
    Reference mean velocity (1/(r−t))·∫_t^r u_s(x_s) ds by composite Simpson

    Test oracle only.

    Args:
        path: s ↦ u_s(x_s), the instantaneous velocity along the exact trajectory through x_t
        x_t: Point at time t (fixes the output shape)
        t: Start time
        r: End time
        n_quad: Odd number of quadrature nodes

    Returns:
        Tensor shaped like x_t
    """
    if t == r:
        raise ValueError("mean velocity needs t != r")
    if n_quad < 3 or n_quad % 2 == 0:
        raise ValueError(f"n_quad must be odd and >= 3, got {n_quad}")

    nodes = np.linspace(t, r, n_quad)
    values = np.stack([
        torch.broadcast_to(torch.as_tensor(path(float(s)), dtype=DTYPE), x_t.shape).numpy()
        for s in nodes
    ])
    integral = simpson(values, x=nodes, axis=0)
    return torch.as_tensor(integral / (r - t), dtype=DTYPE)


def make_flow_batch(
    rng: Rng,
    interp_cfg: InterpolantConfig,
    time_cfg: TimeSamplerConfig,
    x0: torch.Tensor,
    x1: torch.Tensor,
) -> FlowBatch:
    """
    Sample (t, r), place x_s on the path and evaluate the conditional velocity

    Network time is clamped away from 0 so path time stays below t_clamp when η > 0.
    """
    t, r = sample_times(rng, time_cfg, x0.shape[0])
    if interp_cfg.eta > 0:
        t = torch.clamp(t, min=1.0 - interp_cfg.t_clamp + 1e-12)
        r = torch.minimum(r, t)
    s = path_time(t)
    xt = interpolate(rng, interp_cfg, x0, x1, s)
    v_cond = conditional_velocity(interp_cfg, xt, x0, x1, s)
    return FlowBatch(x0=x0, x1=x1, xt=xt, t=t, r=r, v_cond=v_cond)


def full_span(net: Callable[..., torch.Tensor], x0: torch.Tensor) -> torch.Tensor:
    """
    One-evaluation transport x0 + û_{1,0}(x0): prior to data in a single step

    Args:
        net: Average-velocity field called as net(x, t, r)
        x0: Prior samples [B, d]

    Returns:
        Transported samples [B, d]
    """
    batch = x0.shape[0]
    t = torch.full((batch,), GENERATION_T, dtype=x0.dtype)
    r = torch.full((batch,), GENERATION_R, dtype=x0.dtype)
    return x0 + (GENERATION_T - GENERATION_R) * net(x0, t, r)
