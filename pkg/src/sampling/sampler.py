"""
Generation: n-NFE MeanFlow Transport and One-Step RMFlow

Grids are given in path time 0 = τ_0 < ... < τ_n = 1; each step calls the network
at network time (1 − τ_k, 1 − τ_{k+1}).
"""

import math
from typing import List, Literal, Optional

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.tensor import DTYPE, Rng, add, randn, scale, slice_rows
from src.errors import ConfigurationError, ShapeError
from src.flow.paths import InterpolantConfig, full_span
from src.models.nets import GuidanceEncoder, VelocityNet, encode_guidance
from src.tasks.registry import Task


class SamplerConfig(BaseModel):
    """NFE, time grid, mode and seed of one sampling request"""
    model_config = ConfigDict(extra="forbid")

    nfe: int = Field(1, gt=0)
    grid: Optional[List[float]] = None
    mode: Literal["meanflow", "rmflow"] = "meanflow"
    seed: int = Field(0, ge=0)
    shard_size: int = Field(4096, gt=0)

    @model_validator(mode="after")
    def _check_grid(self):
        if self.mode == "rmflow" and self.nfe != 1:
            raise ValueError(f"rmflow generates in one step, got nfe={self.nfe}")
        if self.grid is not None:
            if len(self.grid) != self.nfe + 1:
                raise ValueError(f"grid needs nfe + 1 = {self.nfe + 1} points, got {len(self.grid)}")
            if self.grid[0] != 0.0 or self.grid[-1] != 1.0:
                raise ValueError(f"grid must start at 0 and end at 1, got {self.grid}")
            if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
                raise ValueError(f"grid must be strictly increasing, got {self.grid}")
        return self

    @property
    def times(self) -> List[float]:
        if self.grid is not None:
            return list(self.grid)
        return np.linspace(0.0, 1.0, self.nfe + 1).tolist()


class CountedNet:
    """Call-counting wrapper around a velocity network"""

    def __init__(self, net):
        self.net = net
        self.calls = 0

    def __call__(self, x: torch.Tensor, t: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return self.net(x, t, r)


@torch.no_grad()
def sample_meanflow(net, x0: torch.Tensor, cfg: SamplerConfig) -> torch.Tensor:
    """
    Transport prior samples along the grid, one network evaluation per interval

    Args:
        net: Average-velocity field net(x, t, r)
        x0: Prior samples [B, d]
        cfg: Sampler configuration (nfe, grid)

    Returns:
        Generated samples [B, d]
    """
    times = cfg.times
    x = x0.clone()
    batch = x.shape[0]
    for tau, tau_next in zip(times[:-1], times[1:]):
        t = torch.full((batch,), 1.0 - tau, dtype=x.dtype)
        r = torch.full((batch,), 1.0 - tau_next, dtype=x.dtype)
        x = add(x, scale(net(x, t, r), tau_next - tau))
    return x


@torch.no_grad()
def sample_rmflow(net, x0: torch.Tensor, rng: Rng, interp_cfg: InterpolantConfig) -> torch.Tensor:
    """
    One-step generation x̂ = x0 + û(x0) + √(σ_min² − σ²)·ε₂

    Raises:
        ConfigurationError: sigma exceeds sigma_min
    """
    if interp_cfg.sigma > interp_cfg.sigma_min:
        raise ConfigurationError(
            f"rmflow sampling needs sigma <= sigma_min, got {interp_cfg.sigma} > {interp_cfg.sigma_min}"
        )
    noise_std = math.sqrt(interp_cfg.injection_variance)
    return add(full_span(net, x0), scale(randn(rng, x0.shape), noise_std))


def make_prior(
    rng: Rng,
    task: Task,
    guided: bool,
    enc: Optional[GuidanceEncoder] = None,
    c: Optional[torch.Tensor] = None,
    interp_cfg: Optional[InterpolantConfig] = None,
    n: Optional[int] = None,
) -> torch.Tensor:
    """
    Prior draw: φ_ω(c) + σ_c·ε when guided, ε ~ N(0, I) otherwise

    The guided prior keeps the encoder graph so the training loss reaches ω.

    Raises:
        ConfigurationError: guided without an encoder or context
    """
    if guided:
        if enc is None or c is None:
            raise ConfigurationError(f"guided prior for task {task.name} needs an encoder and a context")
        sigma_c = (interp_cfg or InterpolantConfig()).sigma_c
        embedding = encode_guidance(enc, c)
        return embedding + sigma_c * randn(rng, embedding.shape)
    if n is None:
        raise ShapeError("unguided prior needs the sample count n")
    return randn(rng, (n, task.data_dim))


def generate(
    net: VelocityNet,
    enc: Optional[GuidanceEncoder],
    task: Task,
    n: int,
    cfg: SamplerConfig,
    interp_cfg: InterpolantConfig,
    c: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Draw n samples shard by shard, each shard on its own split stream

    Args:
        net: Trained average-velocity network (EMA weights)
        enc: Guidance encoder for guided tasks
        task: Task the network was trained on
        n: Number of samples
        cfg: Sampler configuration
        interp_cfg: Noise levels for the guided prior and the injection
        c: Contexts [n, context_dim] for guided tasks

    Returns:
        Tensor [n, d] in model space
    """
    if task.guided and (c is None or c.shape[0] != n):
        raise ShapeError(f"guided sampling needs {n} contexts")
    bounds = list(range(0, n, cfg.shard_size)) + [n]
    streams = Rng(cfg.seed).split(max(len(bounds) - 1, 1))
    counted = CountedNet(net)
    shards = []
    for stream, lo, hi in zip(streams, bounds[:-1], bounds[1:]):
        prior_rng, noise_rng = stream.split(2)
        with torch.no_grad():
            x0 = make_prior(
                prior_rng, task, task.guided, enc,
                slice_rows(c, lo, hi) if c is not None else None, interp_cfg, n=hi - lo,
            )
        if cfg.mode == "rmflow":
            shards.append(sample_rmflow(counted, x0, noise_rng, interp_cfg))
        else:
            shards.append(sample_meanflow(counted, x0, cfg))
    logger.debug(f"🎲 {cfg.mode} sampling: {n} samples, nfe={cfg.nfe}, {counted.calls} network calls")
    if not shards:
        return torch.zeros((0, task.data_dim), dtype=DTYPE)
    return torch.cat(shards, dim=0)
