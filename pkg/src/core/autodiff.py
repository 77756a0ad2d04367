"""
Forward- and reverse-mode differentiation helpers

Forward mode uses torch.func.jvp (dual propagation, one pass); reverse mode uses
torch.autograd.grad. stop_gradient is an autograd.Function whose value (and, inside a jvp,
the tangent) still flows forward but the reverse sweep sees a constant.
"""

from typing import Callable, List, Sequence, Tuple

import torch
from torch.func import jvp as _func_jvp

from src.errors import AutodiffError, ShapeError


def jvp(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    tangents: Sequence[torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Value and directional derivative of f in a single forward pass

    Args:
        f: Function of len(inputs) tensors returning one tensor
        inputs: Primal inputs
        tangents: Direction, one tensor per input with the same shape

    Returns:
        (f(*inputs), J_f(inputs) · tangents)
    """
    if len(inputs) != len(tangents):
        raise ShapeError(f"jvp: {len(inputs)} inputs but {len(tangents)} tangents")
    for i, (x, v) in enumerate(zip(inputs, tangents)):
        if x.shape != v.shape:
            raise ShapeError(
                f"jvp: tangent {i} has shape {tuple(v.shape)}, input has {tuple(x.shape)}"
            )

    try:
        return _func_jvp(f, tuple(inputs), tuple(tangents))
    except RuntimeError as e:
        raise AutodiffError(f"jvp failed: {e}") from e


def grad(
    scalar_loss: torch.Tensor,
    params: Sequence[torch.Tensor],
    retain_graph: bool = False,
) -> List[torch.Tensor]:
    """
    Exact reverse-mode gradient of a scalar loss

    Parameters the loss does not reach get zero gradients rather than None.

    Args:
        scalar_loss: 0-dim (or single-element) tensor
        params: Leaf tensors with requires_grad
        retain_graph: Keep the graph for another sweep

    Returns:
        One gradient tensor per parameter
    """
    if scalar_loss.numel() != 1:
        raise AutodiffError(f"loss must be scalar, got shape {tuple(scalar_loss.shape)}")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise AutodiffError("grad requested for a tensor without requires_grad")
    if not scalar_loss.requires_grad:
        return [torch.zeros_like(p) for p in params]

    grads = torch.autograd.grad(
        scalar_loss.reshape(()),
        params,
        retain_graph=retain_graph,
        allow_unused=True,
    )
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


class _StopGradient(torch.autograd.Function):
    """Identity forward (value and tangent), zero contribution to the reverse sweep"""

    @staticmethod
    def forward(x):
        return x.clone()

    @staticmethod
    def setup_context(ctx, inputs, output):
        pass

    @staticmethod
    def backward(ctx, grad_output):
        return None

    @staticmethod
    def jvp(ctx, x_tangent):
        return x_tangent.clone()


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Constant w.r.t. the reverse sweep; value and tangent pass through; idempotent"""
    return _StopGradient.apply(x)
