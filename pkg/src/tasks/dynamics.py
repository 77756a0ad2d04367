"""
Trajectory Datasets from Lorenz and FitzHugh–Nagumo Dynamics

Each sample is a flattened trajectory [x(τ_1), ..., x(τ_M)] ∈ R^{M·d} produced by RK4
from a random initial condition after a burn-in. Trajectories are z-scored per
coordinate with training-set statistics.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, Literal, Optional

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.core.tensor import DTYPE, Rng, concat_last, ensure_finite, randn
from src.errors import ShapeError

VectorField = Callable[[torch.Tensor], torch.Tensor]


class TrajectorySpec(BaseModel):
    """
    System, discretization, initial distribution and event constraint

    Event constraint C(x) > 0:
    - lorenz: max_m x-coordinate − event_threshold
    - fhn: number of upward crossings of v through spike_level − event_threshold
    """
    model_config = ConfigDict(extra="forbid")

    system: Literal["lorenz", "fhn"] = "lorenz"
    steps: int = Field(64, gt=0)
    dt: float = Field(0.02, gt=0.0)
    params: Dict[str, float] = Field(default_factory=lambda: {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0})
    init_mean: float = 0.0
    init_std: float = Field(1.0, ge=0.0)
    burn_in: int = Field(500, ge=0)
    event_threshold: float = 12.0
    spike_level: float = 1.0

    @property
    def state_dim(self) -> int:
        return 3 if self.system == "lorenz" else 2

    @property
    def data_dim(self) -> int:
        return self.steps * self.state_dim

    @classmethod
    def lorenz(cls, **overrides) -> "TrajectorySpec":
        return cls(**{"system": "lorenz", **overrides})

    @classmethod
    def fhn(cls, **overrides) -> "TrajectorySpec":
        defaults = {
            "system": "fhn",
            "dt": 0.1,
            "params": {"I": 0.5, "a": 0.7, "b": 0.8, "epsilon": 0.08},
            "burn_in": 1000,
            # at least one spike
            "event_threshold": 0.5,
        }
        return cls(**{**defaults, **overrides})


def vector_field(spec: TrajectorySpec) -> VectorField:
    """Right-hand side of the system as a batched map [N, d] → [N, d]"""
    p = spec.params
    if spec.system == "lorenz":
        sigma, rho, beta = p["sigma"], p["rho"], p["beta"]

        def lorenz(state: torch.Tensor) -> torch.Tensor:
            x, y, z = state.unbind(-1)
            return torch.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], dim=-1)

        return lorenz

    drive, a, b, eps = p["I"], p["a"], p["b"], p["epsilon"]

    def fitzhugh_nagumo(state: torch.Tensor) -> torch.Tensor:
        v, w = state.unbind(-1)
        return torch.stack([v - v ** 3 / 3.0 - w + drive, eps * (v + a - b * w)], dim=-1)

    return fitzhugh_nagumo


def rk4_step(f: VectorField, x: torch.Tensor, dt: float) -> torch.Tensor:
    """Classic fourth-order Runge–Kutta step"""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(f: VectorField, x_init: torch.Tensor, dt: float, steps: int) -> torch.Tensor:
    """
    RK4 solution sampled at every step

    Args:
        f: Vector field
        x_init: Initial state(s) [..., d]
        dt: Step size
        steps: Number of steps

    Returns:
        Tensor [steps + 1, ..., d], starting with x_init

    Raises:
        NumericalError: the state leaves the finite range
    """
    states = [x_init]
    x = x_init
    for k in range(steps):
        x = ensure_finite(rk4_step(f, x, dt), f"RK4 state at step {k + 1}")
        states.append(x)
    return torch.stack(states)


def _initial_states(rng: Rng, spec: TrajectorySpec, f: VectorField, n: int) -> torch.Tensor:
    x = spec.init_mean + spec.init_std * randn(rng, (n, spec.state_dim))
    if spec.burn_in:
        x = integrate(f, x, spec.dt, spec.burn_in)[-1]
    return x


def integrate_trajectory(
    rng: Rng,
    spec: TrajectorySpec,
    field: Optional[VectorField] = None,
) -> torch.Tensor:
    """
    One trajectory [x(τ_1), ..., x(τ_M)] from a random initial condition

    Args:
        rng: Stream for the initial condition
        spec: System specification
        field: Vector field override (defaults to the system's own)

    Returns:
        Tensor [M, d]
    """
    f = field or vector_field(spec)
    x = _initial_states(rng, spec, f, 1)
    return integrate(f, x, spec.dt, spec.steps - 1)[:, 0, :]


def generate_trajectories(rng: Rng, spec: TrajectorySpec, n: int, shards: int = 8) -> torch.Tensor:
    """
    n trajectories [n, M, d], integrated shard by shard on split streams

    Shard sizes depend only on n, so the result is independent of how shards are
    scheduled.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    f = vector_field(spec)
    sizes = [len(chunk) for chunk in np.array_split(np.arange(n), shards) if len(chunk)]
    streams = rng.split(len(sizes))
    parts = [
        integrate(f, _initial_states(stream, spec, f, size), spec.dt, spec.steps - 1).transpose(0, 1)
        for stream, size in zip(streams, sizes)
    ]
    if not parts:
        return torch.zeros((0, spec.steps, spec.state_dim), dtype=DTYPE)
    return torch.cat(parts, dim=0)


def _as_trajectories(spec: TrajectorySpec, x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 1:
        x = x[None]
    if x.dim() == 2:
        if x.shape[1] != spec.data_dim:
            raise ShapeError(f"expected flattened trajectories of length {spec.data_dim}, got {x.shape[1]}")
        x = x.reshape(x.shape[0], spec.steps, spec.state_dim)
    if x.shape[1:] != (spec.steps, spec.state_dim):
        raise ShapeError(f"expected trajectories [B, {spec.steps}, {spec.state_dim}], got {tuple(x.shape)}")
    return x


def event_constraint(spec: TrajectorySpec, x_data: torch.Tensor) -> torch.Tensor:
    """C(x) per trajectory; the event set is C > 0"""
    traj = _as_trajectories(spec, x_data)
    if spec.system == "lorenz":
        return traj[:, :, 0].max(dim=1).values - spec.event_threshold
    v = traj[:, :, 0]
    spikes = ((v[:, :-1] < spec.spike_level) & (v[:, 1:] >= spec.spike_level)).sum(dim=1)
    return spikes.to(DTYPE) - spec.event_threshold


def event_indicator(spec: TrajectorySpec, x_data: torch.Tensor):
    """
    1 iff the trajectory lies in the event set

    Args:
        spec: System specification holding the constraint
        x_data: One flattened trajectory [M·d], or a batch [B, M·d] / [B, M, d]

    Returns:
        int for a single trajectory, otherwise a long tensor [B]
    """
    flags = (event_constraint(spec, x_data) > 0).long()
    if torch.as_tensor(x_data).dim() == 1:
        return int(flags[0])
    return flags


@dataclass
class Standardizer:
    """Per-coordinate z-scoring of trajectories"""
    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, trajectories: torch.Tensor) -> "Standardizer":
        flat = trajectories.reshape(-1, trajectories.shape[-1])
        std = flat.std(dim=0)
        return cls(mean=flat.mean(dim=0), std=torch.where(std > 0, std, torch.ones_like(std)))

    def standardize(self, trajectories: torch.Tensor) -> torch.Tensor:
        return (trajectories - self.mean) / self.std

    def unstandardize(self, trajectories: torch.Tensor) -> torch.Tensor:
        return trajectories * self.std + self.mean

    def state(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "Standardizer":
        return cls(mean=torch.tensor(state["mean"], dtype=DTYPE), std=torch.tensor(state["std"], dtype=DTYPE))


CONTEXT_STEPS = 3


def build_context(standardized: torch.Tensor, events: torch.Tensor) -> torch.Tensor:
    """
    Guidance context [event flag, x(τ_1), x(τ_2), x(τ_3)]

    Args:
        standardized: Trajectories [B, M, d] in standardized units
        events: Event flags [B]

    Returns:
        Tensor [B, 1 + 3·d]
    """
    head = standardized[:, :CONTEXT_STEPS, :].reshape(standardized.shape[0], -1)
    return concat_last([events.to(DTYPE)[:, None], head])


def context_dim(spec: TrajectorySpec) -> int:
    return 1 + CONTEXT_STEPS * spec.state_dim


@dataclass
class TrajectoryDataset:
    """Immutable pool of trajectories with their flags, contexts and standardized form"""
    spec: TrajectorySpec
    raw: torch.Tensor
    events: torch.Tensor
    data: torch.Tensor
    contexts: torch.Tensor

    def __len__(self) -> int:
        return self.raw.shape[0]

    @property
    def event_rate(self) -> float:
        return float(self.events.to(DTYPE).mean()) if len(self) else math.nan

    @classmethod
    def build(cls, spec: TrajectorySpec, raw: torch.Tensor, scaler: Standardizer) -> "TrajectoryDataset":
        events = event_indicator(spec, raw)
        standardized = scaler.standardize(raw)
        return cls(
            spec=spec,
            raw=raw,
            events=events,
            data=standardized.reshape(raw.shape[0], -1),
            contexts=build_context(standardized, events),
        )


def generate_dataset(rng: Rng, spec: TrajectorySpec, n_train: int, n_test: int):
    """
    Train and test pools from independent streams, both standardized with train statistics

    Returns:
        (train TrajectoryDataset, test TrajectoryDataset, Standardizer)
    """
    train_rng, test_rng = rng.split(2)
    train_raw = generate_trajectories(train_rng, spec, n_train)
    test_raw = generate_trajectories(test_rng, spec, n_test)
    scaler = Standardizer.fit(train_raw)
    train = TrajectoryDataset.build(spec, train_raw, scaler)
    test = TrajectoryDataset.build(spec, test_raw, scaler)
    logger.info(
        f"🌀 {spec.system} dataset: {n_train} train / {n_test} test, "
        f"M={spec.steps}, dt={spec.dt}, event rate {train.event_rate:.3f}"
    )
    logger.debug(f"📋 {spec.system} spec: {spec.model_dump()}")
    return train, test, scaler
