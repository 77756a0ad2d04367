"""
Task Registry

A Task bundles a data source, its evaluation grid and its loss defaults so the
trainer, sampler and evaluator never branch on the task name.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Type

import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.core.tensor import Rng, randn
from src.errors import ConfigurationError
from src.evaluation.metrics import EvalGrid
from src.tasks.dynamics import (
    Standardizer,
    TrajectoryDataset,
    TrajectorySpec,
    context_dim,
    event_indicator,
    generate_dataset,
)
from src.tasks.synthetic import (
    CheckerboardSpec,
    GmmSpec,
    ShiftSpec,
    sample_checkerboard,
    sample_gmm,
)


class TaskOptions(BaseModel):
    """Per-run task knobs; only the fields a task understands are read"""
    model_config = ConfigDict(extra="forbid")

    n_train: int = Field(10_000, gt=0)
    n_test: int = Field(2_000, gt=0)
    dataset_seed: int = Field(1234, ge=0)
    event_threshold: Optional[float] = None
    mu: float = 2.0


@dataclass
class TaskBatch:
    """Data samples with their guidance contexts (None when unguided)"""
    x_data: torch.Tensor
    c: Optional[torch.Tensor] = None


class Task(ABC):
    """Data source + evaluation grid + loss defaults"""
    name: str = ""
    data_dim: int = 0
    context_dim: int = 0
    # the data sample is a deterministic function of the prior draw
    coupled: bool = False

    def __init__(self, options: Optional[TaskOptions] = None):
        self.options = options or TaskOptions()

    @property
    def guided(self) -> bool:
        return self.context_dim > 0

    @abstractmethod
    def eval_grid(self) -> EvalGrid:
        ...

    @abstractmethod
    def draw(self, rng: Rng, n: int) -> TaskBatch:
        """Training draws"""

    def reference(self, rng: Rng, n: int, event: Optional[int] = None) -> TaskBatch:
        """Fresh samples for evaluation; synthetic tasks just draw again"""
        return self.draw(rng, n)

    def couple(self, x0: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError(f"task {self.name} has no deterministic coupling")

    def loss_defaults(self) -> Dict[str, float]:
        return {"lambda1": 1e-1, "lambda2": 1e-4 if self.guided else 0.0}

    def to_raw(self, x: torch.Tensor) -> torch.Tensor:
        """Map model-space samples back to physical units"""
        return x

    def state(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass

    def describe(self) -> dict:
        return {"name": self.name, "data_dim": self.data_dim, "context_dim": self.context_dim}


class GmmTask(Task):
    name = "gmm"
    data_dim = 1

    def __init__(self, options: Optional[TaskOptions] = None, spec: Optional[GmmSpec] = None):
        super().__init__(options)
        self.spec = spec or GmmSpec()

    def eval_grid(self) -> EvalGrid:
        return EvalGrid(bounds=[(-4.0, 4.0)], bins=[100])

    def draw(self, rng: Rng, n: int) -> TaskBatch:
        return TaskBatch(sample_gmm(rng, self.spec, n))

    def describe(self) -> dict:
        return {**super().describe(), "spec": self.spec.model_dump()}


class CheckerboardTask(Task):
    name = "checkerboard"
    data_dim = 2

    def __init__(self, options: Optional[TaskOptions] = None, spec: Optional[CheckerboardSpec] = None):
        super().__init__(options)
        self.spec = spec or CheckerboardSpec()

    def eval_grid(self) -> EvalGrid:
        e = self.spec.extent
        return EvalGrid(bounds=[(-e, e), (-e, e)], bins=[50, 50])

    def draw(self, rng: Rng, n: int) -> TaskBatch:
        return TaskBatch(sample_checkerboard(rng, self.spec, n))

    def describe(self) -> dict:
        return {**super().describe(), "spec": self.spec.model_dump()}


class ShiftTask(Task):
    """Deterministic translation of the standard normal prior"""
    name = "shift"
    data_dim = 1
    coupled = True

    def __init__(self, options: Optional[TaskOptions] = None):
        super().__init__(options)
        self.spec = ShiftSpec(mu=self.options.mu)

    def eval_grid(self) -> EvalGrid:
        mu = self.spec.mu
        return EvalGrid(bounds=[(mu - 5.0, mu + 5.0)], bins=[100])

    def draw(self, rng: Rng, n: int) -> TaskBatch:
        return TaskBatch(self.couple(randn(rng, (n, 1))))

    def couple(self, x0: torch.Tensor) -> torch.Tensor:
        return x0 + self.spec.mu

    def describe(self) -> dict:
        return {**super().describe(), "spec": self.spec.model_dump()}


class TrajectoryTask(Task):
    """
    Flattened, z-scored trajectories of a dynamical system

    The dataset is generated on first use from options.dataset_seed; guided variants
    carry the context [event flag, first three states].
    """
    spec_factory = staticmethod(TrajectorySpec.lorenz)
    guided_variant = False

    def __init__(self, options: Optional[TaskOptions] = None):
        super().__init__(options)
        overrides = {}
        if self.options.event_threshold is not None:
            overrides["event_threshold"] = self.options.event_threshold
        self.spec = self.spec_factory(**overrides)
        self.data_dim = self.spec.data_dim
        self.context_dim = context_dim(self.spec) if self.guided_variant else 0
        self._train = None
        self._test = None
        self.scaler: Optional[Standardizer] = None

    def _ensure_data(self):
        if self._train is None:
            self._train, self._test, scaler = generate_dataset(
                Rng(self.options.dataset_seed), self.spec, self.options.n_train, self.options.n_test
            )
            # statistics restored from a checkpoint take precedence
            if self.scaler is None:
                self.scaler = scaler
            else:
                self._rebuild_with(self.scaler)

    def _rebuild_with(self, scaler: Standardizer):
        self._train = TrajectoryDataset.build(self.spec, self._train.raw, scaler)
        self._test = TrajectoryDataset.build(self.spec, self._test.raw, scaler)

    @property
    def train_set(self):
        self._ensure_data()
        return self._train

    @property
    def test_set(self):
        self._ensure_data()
        return self._test

    def eval_grid(self) -> EvalGrid:
        return EvalGrid(bounds=[(-4.0, 4.0)], bins=[100], pooled=True)

    def _pick(self, dataset, rng: Rng, n: int, event: Optional[int]) -> TaskBatch:
        rows = torch.arange(len(dataset))
        if event is not None:
            rows = rows[dataset.events == event]
            if len(rows) == 0:
                raise ConfigurationError(
                    f"no {self.name} trajectories with event={event}; "
                    f"adjust event_threshold or the dataset size"
                )
        picks = rows[torch.randint(len(rows), (n,), generator=rng.generator)]
        c = dataset.contexts[picks] if self.guided else None
        return TaskBatch(dataset.data[picks], c)

    def draw(self, rng: Rng, n: int) -> TaskBatch:
        return self._pick(self.train_set, rng, n, None)

    def reference(self, rng: Rng, n: int, event: Optional[int] = None) -> TaskBatch:
        return self._pick(self.test_set, rng, n, event)

    def to_raw(self, x: torch.Tensor) -> torch.Tensor:
        self._ensure_data()
        traj = x.reshape(x.shape[0], self.spec.steps, self.spec.state_dim)
        return self.scaler.unstandardize(traj).reshape(x.shape[0], -1)

    def event_indicator(self, x: torch.Tensor) -> torch.Tensor:
        """Event flags [B] of model-space samples"""
        return event_indicator(self.spec, self.to_raw(x))

    def state(self) -> dict:
        self._ensure_data()
        return {"standardizer": self.scaler.state()}

    def load_state(self, state: dict) -> None:
        if "standardizer" not in state:
            return
        self.scaler = Standardizer.from_state(state["standardizer"])
        if self._train is not None:
            self._rebuild_with(self.scaler)

    def describe(self) -> dict:
        return {**super().describe(), "spec": self.spec.model_dump(), "options": self.options.model_dump()}


class LorenzTask(TrajectoryTask):
    name = "lorenz"


class FhnTask(TrajectoryTask):
    name = "fhn"
    spec_factory = staticmethod(TrajectorySpec.fhn)


class LorenzEventTask(LorenzTask):
    name = "lorenz_event"
    guided_variant = True


class FhnEventTask(FhnTask):
    name = "fhn_event"
    guided_variant = True


TASKS: Dict[str, Type[Task]] = {
    cls.name: cls
    for cls in (GmmTask, CheckerboardTask, ShiftTask, LorenzTask, FhnTask, LorenzEventTask, FhnEventTask)
}


def make_task(name: str, options: Optional[TaskOptions] = None) -> Task:
    """
    Instantiate a registered task

    Raises:
        ConfigurationError: unknown task name
    """
    if name not in TASKS:
        raise ConfigurationError(f"unknown task '{name}'; choose one of {sorted(TASKS)}")
    task = TASKS[name](options)
    logger.debug(f"🧩 task {name}: d={task.data_dim}, context={task.context_dim}")
    return task
