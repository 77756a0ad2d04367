"""
Optimizer, Learning-Rate Schedule and EMA

Adam comes from torch.optim; this module wires it to the polynomial schedule,
checks gradients before every step and keeps the EMA shadow weights.
"""

from typing import Iterable, List, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.core.tensor import ensure_finite, total
from src.errors import NumericalError


class TrainConfig(BaseModel):
    """Optimization budget and schedule"""
    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(100_000, gt=0)
    batch_size: int = Field(256, gt=0)
    lr: float = Field(1e-4, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.95)
    adam_eps: float = Field(1e-8, gt=0.0)
    ema_decay: float = Field(0.9995, ge=0.0, le=1.0)
    warmup_iters: int = Field(0, ge=0)
    # polynomial decay exponent; 1.0 is linear decay to zero
    power: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)
    log_every: int = Field(1000, gt=0)
    # keep an EMA snapshot every k steps (0 disables)
    snapshot_every: int = Field(0, ge=0)

    @field_validator("betas")
    @classmethod
    def _betas_in_unit_interval(cls, betas):
        if not all(0.0 < b < 1.0 for b in betas):
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        return betas


def make_adam(params: Iterable[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.Adam:
    """Adam without weight decay; single-tensor code path for reproducible updates"""
    return torch.optim.Adam(
        list(params),
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        weight_decay=0.0,
        foreach=False,
    )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """
    Learning rate at a given step

    Linear warmup from 0 to lr over warmup_iters, then
    lr·(1 − (step − warmup)/(iterations − warmup))^power, reaching 0 at the final step.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < cfg.warmup_iters:
        return cfg.lr * step / cfg.warmup_iters
    span = cfg.iterations - cfg.warmup_iters
    if span <= 0:
        return cfg.lr
    remaining = max(0.0, 1.0 - (step - cfg.warmup_iters) / span)
    return cfg.lr * remaining ** cfg.power


def adam_step(
    optimizer: torch.optim.Adam,
    params: Sequence[torch.nn.Parameter],
    grads: Sequence[torch.Tensor],
    lr_t: float,
) -> None:
    """
    One bias-corrected Adam update in place

    Args:
        optimizer: Adam instance holding the first/second moments and betas
        params: Parameters to update
        grads: Gradients, one per parameter
        lr_t: Learning rate for this step

    Raises:
        NumericalError: a gradient holds NaN/Inf (nothing is updated)
    """
    for i, g in enumerate(grads):
        try:
            ensure_finite(g, f"gradient of parameter {i}")
        except NumericalError:
            optimizer.zero_grad(set_to_none=True)
            raise

    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    for group in optimizer.param_groups:
        group["lr"] = lr_t
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


@torch.no_grad()
def ema_update(
    shadow: Sequence[torch.Tensor],
    params: Sequence[torch.Tensor],
    decay: float,
) -> List[torch.Tensor]:
    """shadow ← decay·shadow + (1 − decay)·params, in place"""
    for s, p in zip(shadow, params):
        if s.shape != p.shape:
            raise ValueError(f"EMA shadow {tuple(s.shape)} does not match parameter {tuple(p.shape)}")
        s.lerp_(p.detach(), 1.0 - decay)
    return list(shadow)


def global_grad_norm(grads: Sequence[torch.Tensor]) -> float:
    """‖g‖₂ over all parameters"""
    if not grads:
        return 0.0
    return float(torch.sqrt(total(torch.stack([total(g.pow(2)) for g in grads]))))
