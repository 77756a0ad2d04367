"""
Checkpoint State

Everything needed to resume a run bit-exactly: raw and EMA parameters, Adam moments,
the random stream position and a snapshot of the configuration.
"""

from dataclasses import dataclass, field
from typing import Dict, List

import torch

from src.core.tensor import DTYPE
from src.errors import ConfigurationError

CHECKPOINT_VERSION = 1

TensorDict = Dict[str, torch.Tensor]


def _pack(tensors: TensorDict) -> Dict[str, dict]:
    return {
        name: {"shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}
        for name, t in tensors.items()
    }


def _unpack(packed: Dict[str, dict]) -> TensorDict:
    return {
        name: torch.tensor(entry["values"], dtype=DTYPE).reshape(entry["shape"])
        for name, entry in packed.items()
    }


@dataclass
class Checkpoint:
    """
    Training state at a given step

    Parameter names carry a "net." or "enc." prefix. adam_steps is empty until the
    first optimizer step.
    """
    step: int
    model_kind: str
    config: dict
    params: TensorDict
    ema: TensorDict
    adam_m: TensorDict = field(default_factory=dict)
    adam_v: TensorDict = field(default_factory=dict)
    adam_steps: Dict[str, float] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    task_state: dict = field(default_factory=dict)
    snapshots: List[dict] = field(default_factory=list)
    failed: bool = False
    version: int = CHECKPOINT_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "step": self.step,
            "model_kind": self.model_kind,
            "failed": self.failed,
            "config": self.config,
            "params": _pack(self.params),
            "ema": _pack(self.ema),
            "adam_m": _pack(self.adam_m),
            "adam_v": _pack(self.adam_v),
            "adam_steps": dict(self.adam_steps),
            "rng_state": self.rng_state,
            "task_state": self.task_state,
            "snapshots": [{"step": s["step"], "ema": _pack(s["ema"])} for s in self.snapshots],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Checkpoint":
        version = data.get("version")
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        return cls(
            step=int(data["step"]),
            model_kind=data["model_kind"],
            config=data["config"],
            params=_unpack(data["params"]),
            ema=_unpack(data["ema"]),
            adam_m=_unpack(data.get("adam_m", {})),
            adam_v=_unpack(data.get("adam_v", {})),
            adam_steps={k: float(v) for k, v in data.get("adam_steps", {}).items()},
            rng_state=data.get("rng_state", {}),
            task_state=data.get("task_state", {}),
            snapshots=[{"step": int(s["step"]), "ema": _unpack(s["ema"])} for s in data.get("snapshots", [])],
            failed=bool(data.get("failed", False)),
            version=version,
        )

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every tensor plus step, streams and config"""
        def same(a: TensorDict, b: TensorDict) -> bool:
            return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)

        return (
            self.step == other.step
            and self.config == other.config
            and self.rng_state == other.rng_state
            and self.adam_steps == other.adam_steps
            and same(self.params, other.params)
            and same(self.ema, other.ema)
            and same(self.adam_m, other.adam_m)
            and same(self.adam_v, other.adam_v)
        )
