"""
Average-Velocity Network and Guidance Encoder

VelocityNet is the residual SiLU MLP û_{t,r}(x;θ) conditioned on (t, t - r);
GuidanceEncoder φ_ω(c) maps a context vector into data space for guided priors.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from src.core.tensor import DTYPE, concat_last
from src.errors import ShapeError


class NetConfig(BaseModel):
    """Backbone hyperparameters (6 residual blocks of width 256 by default)"""
    model_config = ConfigDict(extra="forbid")

    width: int = Field(256, gt=0)
    depth: int = Field(6, gt=0)
    embed_dim: int = Field(64, gt=0)
    # log2 of the highest embedding frequency in units of π
    embed_max_log2: float = Field(10.0, ge=0.0)
    guidance_hidden: int = Field(256, ge=0)


class SinusoidalEmbedding(nn.Module):
    """
    Fixed sinusoidal embedding of a scalar in [0, 1]

    dim/2 frequencies π·2^k with k log-spaced on [0, max_log2]; output is
    [sin(ω t) ‖ cos(ω t)].
    """

    def __init__(self, dim: int = 64, max_log2: float = 10.0):
        super().__init__()
        if dim % 2:
            raise ShapeError(f"embedding dimension must be even, got {dim}")
        exponents = torch.linspace(0.0, max_log2, dim // 2, dtype=DTYPE)
        self.register_buffer("frequencies", math.pi * torch.pow(2.0, exponents))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t[:, None] * self.frequencies[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class ResidualBlock(nn.Module):
    """h + W₂·silu(W₁·[h ‖ emb(t) ‖ emb(t−r)] + b₁) + b₂"""

    def __init__(self, width: int, cond_dim: int):
        super().__init__()
        self.inner = nn.Linear(width + cond_dim, width)
        self.outer = nn.Linear(width, width)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return h + self.outer(F.silu(self.inner(concat_last([h, cond]))))


def _uniform_fan_in_(layer: nn.Linear):
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.uniform_(layer.bias, -bound, bound)


class VelocityNet(nn.Module):
    """
    Average velocity field û_{t,r}(x;θ) := net(x, t, t − r)

    The output is the path-direction average velocity, so one full-span step is
    x_data ≈ x_prior + net(x_prior, t=1, r=0).
    """

    def __init__(self, data_dim: int, config: NetConfig = None):
        super().__init__()
        config = config or NetConfig()
        self.data_dim = data_dim
        self.config = config

        self.time_embed = SinusoidalEmbedding(config.embed_dim, config.embed_max_log2)
        self.gap_embed = SinusoidalEmbedding(config.embed_dim, config.embed_max_log2)
        self.proj_in = nn.Linear(data_dim, config.width)
        self.blocks = nn.ModuleList(
            ResidualBlock(config.width, 2 * config.embed_dim) for _ in range(config.depth)
        )
        self.proj_out = nn.Linear(config.width, data_dim)

        for module in self.modules():
            if isinstance(module, nn.Linear):
                _uniform_fan_in_(module)
        # û ≡ 0 at initialization
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)
        self.to(DTYPE)

    @staticmethod
    def parameter_count(data_dim: int, width: int, depth: int, embed_dim: int) -> int:
        """
        Closed-form number of trainable parameters

        proj_in: d·W + W; each block: (W + 2E)·W + W + W·W + W; proj_out: W·d + d
        """
        per_block = (width + 2 * embed_dim) * width + width + width * width + width
        return data_dim * width + width + depth * per_block + width * data_dim + data_dim

    def forward(self, x: torch.Tensor, t: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[1] != self.data_dim:
            raise ShapeError(f"expected x of shape [B, {self.data_dim}], got {tuple(x.shape)}")
        if t.shape != (x.shape[0],) or r.shape != (x.shape[0],):
            raise ShapeError(
                f"times must have shape [{x.shape[0]}], got t {tuple(t.shape)}, r {tuple(r.shape)}"
            )

        cond = torch.cat([self.time_embed(t), self.gap_embed(t - r)], dim=-1)
        h = self.proj_in(x)
        for block in self.blocks:
            h = block(h, cond)
        return self.proj_out(h)


class GuidanceEncoder(nn.Module):
    """
    Guidance encoder φ_ω(c)

    SiLU MLP from the context vector to the prior space; hidden=0 gives a single
    affine layer.
    """

    def __init__(self, context_dim: int, out_dim: int, hidden: int = 256, bias: bool = True):
        super().__init__()
        self.context_dim = context_dim
        self.out_dim = out_dim

        if hidden > 0:
            self.mlp = nn.Sequential(
                nn.Linear(context_dim, hidden, bias=bias),
                nn.SiLU(),
                nn.Linear(hidden, hidden, bias=bias),
                nn.SiLU(),
                nn.Linear(hidden, out_dim, bias=bias),
            )
        else:
            self.mlp = nn.Linear(context_dim, out_dim, bias=bias)
        self.to(DTYPE)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return self.mlp(c)


def forward(net: VelocityNet, x: torch.Tensor, t: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """û_{t,r}(x;θ)"""
    return net(x, t, r)


def encode_guidance(enc: GuidanceEncoder, c: torch.Tensor) -> torch.Tensor:
    """
    Embed a context batch into data space

    Args:
        enc: Guidance encoder
        c: Context tensor [B, context_dim]

    Returns:
        Embedding [B, out_dim]
    """
    if c.dim() != 2 or c.shape[1] != enc.context_dim:
        raise ShapeError(f"expected context of shape [B, {enc.context_dim}], got {tuple(c.shape)}")
    return enc(c)
