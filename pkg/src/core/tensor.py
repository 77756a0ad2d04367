"""
Dense float64 tensors and seeded random streams

Thin layer over torch: every helper here returns float64 CPU tensors, checks shapes
up front and refuses to hand back NaN/Inf. Batch axis is always axis 0.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch

from src.errors import NumericalError, ShapeError

DTYPE = torch.float64


def as_tensor(data, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Convert nested lists / numpy arrays / scalars to a float64 tensor"""
    if isinstance(data, torch.Tensor):
        return data.to(dtype)
    return torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=dtype)


def ensure_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """
    Raise if x holds NaN or Inf

    Args:
        x: Tensor to check
        what: Label used in the error message

    Returns:
        x unchanged
    """
    if x.numel() and not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise NumericalError(f"{what} has {bad} non-finite entr{'y' if bad == 1 else 'ies'}")
    return x


@dataclass
class Rng:
    """
    Splittable seeded random source

    A numpy SeedSequence names the stream; a torch.Generator produces it.
    Identical (seed, spawn_key) gives a bit-identical stream. Children from split()
    are independent of the parent's draws, so shards stay reproducible for any
    thread count.
    """
    seed: int
    spawn_key: Tuple[int, ...] = ()
    _generator: torch.Generator = field(default=None, init=False, repr=False, compare=False)
    _children: int = field(default=0, init=False, repr=False, compare=False)

    def __post_init__(self):
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._generator = torch.Generator(device="cpu")
        self._generator.manual_seed(int(sequence.generate_state(1, dtype=np.uint64)[0] >> 1))

    @property
    def generator(self) -> torch.Generator:
        return self._generator

    def split(self, n: int = 1) -> List["Rng"]:
        """Spawn n child streams"""
        children = [
            Rng(self.seed, self.spawn_key + (self._children + i,))
            for i in range(n)
        ]
        self._children += n
        return children

    def state(self) -> dict:
        """JSON-serializable snapshot of the stream position"""
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "children": self._children,
            "generator": self._generator.get_state().tolist(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(int(state["seed"]), tuple(state["spawn_key"]))
        rng._children = int(state["children"])
        rng._generator.set_state(torch.tensor(state["generator"], dtype=torch.uint8))
        return rng


def randn(rng: Rng, shape: Sequence[int]) -> torch.Tensor:
    """i.i.d. standard normal entries"""
    return torch.randn(tuple(shape), generator=rng.generator, dtype=DTYPE)


def rand(rng: Rng, shape: Sequence[int]) -> torch.Tensor:
    """i.i.d. U[0, 1) entries"""
    return torch.rand(tuple(shape), generator=rng.generator, dtype=DTYPE)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of an m×k and a k×n tensor"""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return ensure_finite(a @ b, "matmul result")


def _same_shape(op: str, a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape("add", a, b)
    return ensure_finite(a + b, "add result")


def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape("sub", a, b)
    return ensure_finite(a - b, "sub result")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape("mul", a, b)
    return ensure_finite(a * b, "mul result")


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return ensure_finite(a * c, "scale result")


def total(a: torch.Tensor) -> torch.Tensor:
    """Sum of all entries (0-dim tensor)"""
    return ensure_finite(a.sum(), "sum")


def mean(a: torch.Tensor) -> torch.Tensor:
    if a.numel() == 0:
        raise ShapeError("mean of an empty tensor")
    return ensure_finite(a.mean(), "mean")


def squared_norm(a: torch.Tensor) -> torch.Tensor:
    """Per-sample squared Euclidean norm over all non-batch axes: [B, ...] -> [B]"""
    return ensure_finite(a.reshape(a.shape[0], -1).pow(2).sum(dim=1), "squared norm")


def batch_broadcast(per_sample: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape a [B] vector so it broadcasts against a [B, ...] tensor"""
    if per_sample.shape[0] != like.shape[0]:
        raise ShapeError(
            f"batch broadcast: {per_sample.shape[0]} values for batch of {like.shape[0]}"
        )
    return per_sample.reshape(per_sample.shape[0], *([1] * (like.dim() - 1)))


def concat_last(parts: Iterable[torch.Tensor]) -> torch.Tensor:
    """Concatenate along the last axis; leading extents must agree"""
    parts = list(parts)
    lead = {tuple(p.shape[:-1]) for p in parts}
    if len(lead) > 1:
        raise ShapeError(f"concat: leading shapes disagree {sorted(lead)}")
    return torch.cat(parts, dim=-1)


def slice_rows(a: torch.Tensor, start: int, stop: int) -> torch.Tensor:
    """Rows [start, stop) along the batch axis"""
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"row slice [{start}, {stop}) out of range for {a.shape[0]} rows")
    return a[start:stop]
