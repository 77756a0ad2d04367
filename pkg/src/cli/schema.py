"""
Run Configuration Schema

One JSON document describes a run end to end. Validation happens before any work
starts; pydantic errors surface as ConfigurationError with the field path.
"""

import json
from pathlib import Path
from typing import List, Literal, Optional

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config import RUNS_DIR
from src.errors import ConfigurationError
from src.evaluation.metrics import EvalGrid
from src.flow.paths import InterpolantConfig, TimeSamplerConfig
from src.models.nets import NetConfig
from src.sampling.sampler import SamplerConfig
from src.tasks.registry import TASKS, TaskOptions, make_task
from src.training.losses import LossConfig
from src.training.optim import TrainConfig

ABLATION_GRID = [0.0, 1e-2, 1e-1, 1e1, 1e2]


class RunConfig(BaseModel):
    """Task, model kind and every sub-configuration of a run"""
    model_config = ConfigDict(extra="forbid")

    task: str = "gmm"
    model_kind: Literal["meanflow", "rmflow"] = "rmflow"
    seed: int = Field(0, ge=0)
    out: Optional[str] = None

    task_options: TaskOptions = Field(default_factory=TaskOptions)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    interpolant: InterpolantConfig = Field(default_factory=InterpolantConfig)
    time_sampler: TimeSamplerConfig = Field(default_factory=TimeSamplerConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    eval: Optional[EvalGrid] = None
    n_eval_samples: int = Field(100_000, gt=0)
    nfe_sweep: List[int] = Field(default_factory=list)
    lambda1_grid: List[float] = Field(default_factory=lambda: list(ABLATION_GRID))

    @model_validator(mode="before")
    @classmethod
    def _apply_task_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        task = data.get("task", "gmm")
        if task not in TASKS:
            raise ValueError(f"unknown task '{task}'; choose one of {sorted(TASKS)}")

        loss = dict(data.get("loss") or {})
        defaults = TASKS[task]().loss_defaults()
        for key, value in defaults.items():
            if key not in loss:
                loss[key] = value
                logger.debug(f"⚙️ {key} defaulted to {value} for task {task}")
        data["loss"] = loss

        sampler = dict(data.get("sampler") or {})
        sampler.setdefault("mode", data.get("model_kind", "rmflow"))
        data["sampler"] = sampler
        return data

    @model_validator(mode="after")
    def _check_cross_fields(self):
        if self.model_kind == "rmflow" and not self.interpolant.sigma < self.interpolant.sigma_min:
            raise ValueError(
                f"rmflow needs sigma < sigma_min, got sigma={self.interpolant.sigma}, "
                f"sigma_min={self.interpolant.sigma_min}"
            )
        if self.sampler.mode == "rmflow" and self.sampler.nfe != 1:
            raise ValueError(f"rmflow sampling is one-step, got nfe={self.sampler.nfe}")
        if any(n <= 0 for n in self.nfe_sweep):
            raise ValueError(f"nfe_sweep entries must be positive, got {self.nfe_sweep}")
        if not self.lambda1_grid or any(v < 0 for v in self.lambda1_grid):
            raise ValueError("lambda1_grid must be a nonempty list of non-negative values")
        # the run seed drives both training and sampling
        self.train = self.train.model_copy(update={"seed": self.seed})
        self.sampler = self.sampler.model_copy(update={"seed": self.seed})
        return self

    def eval_grid(self) -> EvalGrid:
        return self.eval or self.make_task().eval_grid()

    def make_task(self):
        return make_task(self.task, self.task_options)

    def run_dir(self) -> Path:
        return Path(self.out) if self.out else RUNS_DIR / f"{self.task}_{self.model_kind}_seed{self.seed}"

    def echo(self) -> dict:
        """Fully populated JSON-compatible dump, sufficient to reproduce the run"""
        return self.model_dump(mode="json")


def parse_run_config(data: dict) -> RunConfig:
    """
    Validate a raw config dict

    Raises:
        ConfigurationError: field-level message from pydantic
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"invalid run config: {details}") from e


def load_run_config(path: Path) -> RunConfig:
    """Read and validate a JSON run config"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e
    return parse_run_config(data)


def default_config(task: str) -> RunConfig:
    """Fully populated defaults for a task"""
    return parse_run_config({"task": task})
