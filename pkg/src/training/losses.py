"""
Training Objectives for MeanFlow and RMFlow

- cmfm_loss: conditional mean-flow matching with a stop-gradient JVP target and
  adaptive per-sample weights
- nll_loss: likelihood term enabled by the noise-injection step
- minibatch_ot_pairing: assignment of data rows to prior rows for the likelihood term
- guidance_reg: squared norm of guidance embeddings
- rl_loss: optional policy-gradient term with a caller-supplied reward
- rmflow_loss: the weighted sum, reported component by component
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Literal, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linear_sum_assignment

from src.core.autodiff import jvp, stop_gradient
from src.core.tensor import Rng, batch_broadcast, mean, mul, randn, squared_norm, sub
from src.errors import ConfigurationError, ShapeError
from src.flow.paths import ORIENTATION, FlowBatch, InterpolantConfig, full_span
from src.models.nets import GuidanceEncoder, VelocityNet, encode_guidance

RewardFn = Callable[[torch.Tensor], torch.Tensor]


class LossConfig(BaseModel):
    """Weights of the joint objective"""
    model_config = ConfigDict(extra="forbid")

    lambda1: float = Field(1e-1, ge=0.0)
    lambda2: float = Field(0.0, ge=0.0)
    m: float = Field(0.5, ge=0.0, lt=1.0)
    eps_w: float = Field(1e-3, gt=0.0)
    rl_weight: float = Field(0.0, ge=0.0)
    # how x_data rows meet prior rows in the likelihood term (unguided, uncoupled tasks)
    nll_pairing: Literal["minibatch_ot", "independent"] = "minibatch_ot"


@dataclass
class LossReport:
    """Loss components of one step; total carries the graph"""
    total: torch.Tensor
    cmfm: torch.Tensor
    nll: torch.Tensor
    guidance_reg: torch.Tensor
    rl: torch.Tensor
    grad_norm: float = 0.0
    extras: Dict[str, float] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "cmfm": float(self.cmfm.detach()),
            "nll": float(self.nll.detach()),
            "guidance_reg": float(self.guidance_reg.detach()),
            "rl": float(self.rl.detach()),
            "grad_norm": float(self.grad_norm),
        }


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype)


def adaptive_weight(delta_sq: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """w = (1 / (‖Δ‖² + eps_w))^m, detached so it only rescales the regression gradient"""
    return stop_gradient((1.0 / (delta_sq + cfg.eps_w)) ** cfg.m)


def cmfm_target(net: VelocityNet, batch: FlowBatch):
    """
    Network output and stop-gradient target for one batch

    The jvp moves (x, t, r) along (ORIENTATION·u_s(x|z), 1, 0), which is d/dt of
    û along the path in network time.

    Returns:
        (prediction with graph, detached target)
    """
    tangents = (
        ORIENTATION * batch.v_cond,
        torch.ones_like(batch.t),
        torch.zeros_like(batch.r),
    )
    pred, dudt = jvp(net, (batch.xt, batch.t, batch.r), tangents)
    gap = batch_broadcast(batch.r - batch.t, batch.xt)
    target = batch.v_cond + gap * dudt
    return pred, stop_gradient(target)


def cmfm_loss(net: VelocityNet, batch: FlowBatch, cfg: LossConfig) -> torch.Tensor:
    """
    Weighted conditional mean-flow matching loss

    Args:
        net: Average-velocity network
        batch: FlowBatch with r ≤ t
        cfg: Loss configuration (m, eps_w)

    Returns:
        Scalar mean over the batch of w·‖û − sg(u_tgt)‖²
    """
    pred, target = cmfm_target(net, batch)
    delta_sq = squared_norm(sub(pred, target))
    return mean(mul(adaptive_weight(delta_sq, cfg), delta_sq))


def cfm_loss(net: VelocityNet, batch: FlowBatch, cfg: LossConfig) -> torch.Tensor:
    """Weighted instantaneous flow matching: the network at r = t regressed on u_s(x|z)"""
    pred = net(batch.xt, batch.t, batch.t)
    delta_sq = squared_norm(sub(pred, batch.v_cond))
    return mean(mul(adaptive_weight(delta_sq, cfg), delta_sq))


def nll_loss(
    net: VelocityNet,
    x0: torch.Tensor,
    x_data: torch.Tensor,
    rng: Rng,
    cfg: InterpolantConfig,
) -> torch.Tensor:
    """
    Likelihood term: mean ‖(x_data + σ_min·ε) − (x0 + û_{1,0}(x0))‖²

    Only the full-span generation endpoint is evaluated; no (t, r) is sampled.
    """
    x_tgt = x_data + cfg.sigma_min * randn(rng, x_data.shape)
    return mean(squared_norm(sub(x_tgt, full_span(net, x0))))


def minibatch_ot_pairing(x0: torch.Tensor, x_data: torch.Tensor) -> torch.Tensor:
    """
    Reorder x_data so row i is the exact-OT partner of x0[i] within the batch

    Uniform weights on both sides make the plan a permutation, solved as a linear
    assignment on squared Euclidean costs. In 1D this is the sorted (monotone) pairing.

    Args:
        x0: Prior samples [B, ...]
        x_data: Data samples with the same shape

    Returns:
        Permuted copy of x_data
    """
    if x0.shape != x_data.shape:
        raise ShapeError(f"pairing needs equal shapes, got {tuple(x0.shape)} and {tuple(x_data.shape)}")
    with torch.no_grad():
        cost = torch.cdist(x0.reshape(x0.shape[0], -1), x_data.reshape(x_data.shape[0], -1)).pow(2)
    rows, cols = linear_sum_assignment(cost.cpu().numpy())
    return x_data[torch.as_tensor(cols[rows.argsort()], dtype=torch.long)]


def guidance_reg(enc: Optional[GuidanceEncoder], c_batch: Optional[torch.Tensor]) -> torch.Tensor:
    """Mean squared norm of the guidance embeddings; 0 when unguided"""
    if enc is None or c_batch is None:
        return torch.zeros(())
    return mean(squared_norm(encode_guidance(enc, c_batch)))


def log_likelihood(
    net: VelocityNet,
    x_tgt: torch.Tensor,
    x0: torch.Tensor,
    cfg: InterpolantConfig,
) -> torch.Tensor:
    """
    Per-sample log p_θ(x_tgt | x0) under the noise-injection Gaussian

    log p = −‖x_tgt − (x0 + û(x0))‖² / (2(σ_min² − σ²)) − (d/2)·log(2π(σ_min² − σ²))

    Returns:
        Tensor [B]
    """
    variance = cfg.injection_variance
    if not cfg.sigma < cfg.sigma_min:
        raise ConfigurationError(
            f"log-likelihood needs sigma < sigma_min, got {cfg.sigma} >= {cfg.sigma_min}"
        )
    d = x_tgt[0].numel()
    const = -0.5 * d * math.log(2.0 * math.pi * variance)
    return -squared_norm(sub(x_tgt, full_span(net, x0))) / (2.0 * variance) + const


def rl_loss(
    net: VelocityNet,
    x0: torch.Tensor,
    x_tgt_sampled: torch.Tensor,
    reward_fn: RewardFn,
    cfg: InterpolantConfig,
) -> torch.Tensor:
    """
    Policy-gradient loss −mean[log p_θ(x̂ | x0) · r(x̂)]

    x̂ comes from the one-step sampler and is held fixed; the reward is a constant
    w.r.t. θ.
    """
    x_hat = stop_gradient(x_tgt_sampled)
    reward = stop_gradient(torch.as_tensor(reward_fn(x_hat), dtype=x_hat.dtype)).reshape(-1)
    return -mean(mul(log_likelihood(net, x_hat, x0, cfg), reward))


def rmflow_loss(
    net: VelocityNet,
    enc: Optional[GuidanceEncoder],
    batch: FlowBatch,
    x0: torch.Tensor,
    x_data: torch.Tensor,
    c: Optional[torch.Tensor],
    cfg: LossConfig,
    interp_cfg: InterpolantConfig,
    rng: Rng,
    reward_fn: Optional[RewardFn] = None,
) -> LossReport:
    """
    Joint objective cmfm + λ₁·nll + λ₂·guidance_reg (+ rl_weight·rl)

    One backward pass on report.total reaches both θ and ω (the prior x0 carries
    the encoder graph in guided mode).

    Args:
        net: Average-velocity network
        enc: Guidance encoder, None when unguided
        batch: FlowBatch built from (x0, x1)
        x0: Prior samples the batch was built from
        x_data: Clean data samples, row i the likelihood partner of x0[i]
        c: Context batch, None when unguided
        cfg: Loss weights
        interp_cfg: Noise levels (σ_min, σ)
        rng: Stream for the NLL target noise and RL sampling
        reward_fn: Reward for the policy-gradient term

    Returns:
        LossReport
    """
    cmfm = cmfm_loss(net, batch, cfg)
    nll = nll_loss(net, x0, x_data, rng, interp_cfg)
    reg = guidance_reg(enc, c).to(cmfm.dtype)

    rl = _zero(cmfm)
    if cfg.rl_weight > 0:
        if reward_fn is None:
            raise ConfigurationError("rl_weight > 0 needs a reward function")
        with torch.no_grad():
            x_hat = full_span(net, x0) + math.sqrt(interp_cfg.injection_variance) * randn(rng, x0.shape)
        rl = rl_loss(net, x0, x_hat, reward_fn, interp_cfg)

    total = cmfm + cfg.lambda1 * nll + cfg.lambda2 * reg + cfg.rl_weight * rl
    return LossReport(total=total, cmfm=cmfm, nll=nll, guidance_reg=reg, rl=rl)
