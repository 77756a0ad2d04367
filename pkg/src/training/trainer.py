"""
Training Loop for MeanFlow and RMFlow

One serial loop: draw data and prior, build the flow batch, evaluate the joint loss,
take an Adam step, update the EMA shadow, stream the loss report to the metrics log.
Everything random comes from one seeded stream whose position is checkpointed.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import torch
from loguru import logger
from tqdm import tqdm

from src.core import autodiff
from src.core.tensor import Rng, ensure_finite, randn
from src.errors import ConfigurationError, NumericalError
from src.flow.paths import InterpolantConfig, TimeSamplerConfig, make_flow_batch
from src.models.nets import GuidanceEncoder, NetConfig, VelocityNet
from src.sampling.sampler import make_prior
from src.storage.artifacts import CheckpointStore, MetricsLog
from src.tasks.registry import Task
from src.training.checkpoint import Checkpoint
from src.training.losses import LossConfig, RewardFn, minibatch_ot_pairing, rmflow_loss
from src.training.optim import (
    TrainConfig,
    adam_step,
    ema_update,
    global_grad_norm,
    lr_at,
    make_adam,
)

ModelKind = Literal["meanflow", "rmflow"]
MODEL_KINDS = ("meanflow", "rmflow")


@dataclass
class TrainResult:
    """Final checkpoint, live modules (raw weights) and the per-step metric rows"""
    checkpoint: Checkpoint
    net: VelocityNet
    enc: Optional[GuidanceEncoder]
    history: List[Dict[str, float]] = field(default_factory=list)


def effective_loss_config(model_kind: str, loss_cfg: LossConfig) -> LossConfig:
    """MeanFlow is the joint objective with both likelihood and guidance weights at zero"""
    if model_kind not in MODEL_KINDS:
        raise ConfigurationError(f"model_kind must be one of {MODEL_KINDS}, got '{model_kind}'")
    if model_kind == "meanflow":
        return loss_cfg.model_copy(update={"lambda1": 0.0, "lambda2": 0.0})
    return loss_cfg


def build_models(task: Task, net_cfg: NetConfig, seed: int) -> Tuple[VelocityNet, Optional[GuidanceEncoder]]:
    """Seeded initialization that leaves the global torch stream untouched"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = VelocityNet(task.data_dim, net_cfg)
        enc = (
            GuidanceEncoder(task.context_dim, task.data_dim, hidden=net_cfg.guidance_hidden)
            if task.guided else None
        )
    return net, enc


def named_parameters(net: VelocityNet, enc: Optional[GuidanceEncoder]) -> "OrderedDict[str, torch.nn.Parameter]":
    named = OrderedDict((f"net.{k}", p) for k, p in net.named_parameters())
    if enc is not None:
        named.update((f"enc.{k}", p) for k, p in enc.named_parameters())
    return named


def config_snapshot(
    task: Task,
    model_kind: str,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    interp_cfg: InterpolantConfig,
    time_cfg: TimeSamplerConfig,
    net_cfg: NetConfig,
) -> dict:
    return {
        "task": task.name,
        "task_options": task.options.model_dump(),
        "model_kind": model_kind,
        "train": cfg.model_dump(mode="json"),
        "loss": loss_cfg.model_dump(),
        "interpolant": interp_cfg.model_dump(),
        "time_sampler": time_cfg.model_dump(),
        "net": net_cfg.model_dump(),
    }


def load_models(checkpoint: Checkpoint, task: Task, use_ema: bool = True):
    """
    Rebuild (net, enc) from a checkpoint

    Args:
        checkpoint: Saved state
        task: Task the checkpoint was trained on
        use_ema: Load the EMA shadow instead of the raw weights

    Returns:
        (VelocityNet, GuidanceEncoder or None)
    """
    net_cfg = NetConfig(**checkpoint.config["net"])
    net, enc = build_models(task, net_cfg, seed=0)
    source = checkpoint.ema if use_ema else checkpoint.params
    with torch.no_grad():
        for name, p in named_parameters(net, enc).items():
            if name not in source:
                raise ConfigurationError(f"checkpoint lacks parameter {name}")
            if source[name].shape != p.shape:
                raise ConfigurationError(
                    f"parameter {name}: checkpoint shape {tuple(source[name].shape)} != model {tuple(p.shape)}"
                )
            p.copy_(source[name])
    task.load_state(checkpoint.task_state)
    return net, enc


def _capture(
    step: int,
    model_kind: str,
    config: dict,
    named: "OrderedDict[str, torch.nn.Parameter]",
    shadow: Dict[str, torch.Tensor],
    optimizer: torch.optim.Adam,
    rng: Rng,
    task: Task,
    snapshots: List[dict],
    failed: bool = False,
) -> Checkpoint:
    adam_m, adam_v, adam_steps = {}, {}, {}
    for name, p in named.items():
        state = optimizer.state.get(p)
        if state:
            adam_m[name] = state["exp_avg"].detach().clone()
            adam_v[name] = state["exp_avg_sq"].detach().clone()
            adam_steps[name] = float(state["step"])
    return Checkpoint(
        step=step,
        model_kind=model_kind,
        config=config,
        params={k: p.detach().clone() for k, p in named.items()},
        ema={k: s.clone() for k, s in shadow.items()},
        adam_m=adam_m,
        adam_v=adam_v,
        adam_steps=adam_steps,
        rng_state=rng.state(),
        task_state=task.state(),
        snapshots=list(snapshots),
        failed=failed,
    )


def _restore(
    checkpoint: Checkpoint,
    named: "OrderedDict[str, torch.nn.Parameter]",
    shadow: Dict[str, torch.Tensor],
    optimizer: torch.optim.Adam,
):
    with torch.no_grad():
        for name, p in named.items():
            p.copy_(checkpoint.params[name])
            shadow[name].copy_(checkpoint.ema[name])
    for name, p in named.items():
        if name in checkpoint.adam_m:
            optimizer.state[p] = {
                "step": torch.tensor(checkpoint.adam_steps[name]),
                "exp_avg": checkpoint.adam_m[name].clone(),
                "exp_avg_sq": checkpoint.adam_v[name].clone(),
            }


def train_step(
    task: Task,
    net: VelocityNet,
    enc: Optional[GuidanceEncoder],
    rng: Rng,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    interp_cfg: InterpolantConfig,
    time_cfg: TimeSamplerConfig,
    reward_fn: Optional[RewardFn] = None,
):
    """
    Draw one batch and evaluate the joint objective

    Returns:
        LossReport with the graph attached to report.total
    """
    data = task.draw(rng, cfg.batch_size)
    x0 = make_prior(rng, task, task.guided, enc, data.c, interp_cfg, n=cfg.batch_size)
    x_data = task.couple(x0.detach()) if task.coupled else data.x_data
    # intermediate noisy target of the two-stage construction
    x1 = x_data + interp_cfg.sigma * randn(rng, x_data.shape)
    batch = make_flow_batch(rng, interp_cfg, time_cfg, x0, x1)
    # guided and coupled tasks already pair each prior row with its own data row
    x_nll = x_data
    if loss_cfg.nll_pairing == "minibatch_ot" and not (task.guided or task.coupled):
        x_nll = minibatch_ot_pairing(x0, x_data)
    return rmflow_loss(net, enc, batch, x0, x_nll, data.c, loss_cfg, interp_cfg, rng, reward_fn)


def train_run(
    task: Task,
    model_kind: ModelKind,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    interp_cfg: Optional[InterpolantConfig] = None,
    time_cfg: Optional[TimeSamplerConfig] = None,
    net_cfg: Optional[NetConfig] = None,
    metrics_path: Optional[Path] = None,
    failure_path: Optional[Path] = None,
    resume: Optional[Checkpoint] = None,
    max_steps: Optional[int] = None,
    reward_fn: Optional[RewardFn] = None,
    show_progress: bool = True,
) -> TrainResult:
    """
    Train a MeanFlow or RMFlow model

    Args:
        task: Data source
        model_kind: "meanflow" (λ₁ = λ₂ = 0) or "rmflow"
        cfg: Optimization budget and schedule
        loss_cfg: Loss weights
        interp_cfg: Interpolant noise levels
        time_cfg: (t, r) sampler
        net_cfg: Backbone hyperparameters
        metrics_path: CSV receiving one row per step
        failure_path: Where the checkpoint-at-failure goes on divergence
        resume: Continue from this checkpoint
        max_steps: Stop early at this step (the schedule still spans cfg.iterations)
        reward_fn: Reward for the optional policy-gradient term
        show_progress: tqdm progress bar

    Returns:
        TrainResult

    Raises:
        NumericalError: non-finite loss or gradient (after writing the failure checkpoint)
    """
    interp_cfg = interp_cfg or InterpolantConfig()
    time_cfg = time_cfg or TimeSamplerConfig()
    net_cfg = net_cfg or NetConfig()
    loss_cfg = effective_loss_config(model_kind, loss_cfg)
    config = config_snapshot(task, model_kind, cfg, loss_cfg, interp_cfg, time_cfg, net_cfg)

    net, enc = build_models(task, net_cfg, cfg.seed)
    named = named_parameters(net, enc)
    params = list(named.values())
    shadow = {k: p.detach().clone() for k, p in named.items()}
    optimizer = make_adam(params, cfg)

    start, rng, snapshots = 0, Rng(cfg.seed).split(1)[0], []
    if resume is not None:
        if resume.config != config:
            raise ConfigurationError("resume checkpoint was trained with a different configuration")
        _restore(resume, named, shadow, optimizer)
        task.load_state(resume.task_state)
        rng = Rng.from_state(resume.rng_state)
        start, snapshots = resume.step, list(resume.snapshots)
        logger.info(f"🔁 Resuming {model_kind} on {task.name} from step {start}")

    end = min(cfg.iterations, max_steps) if max_steps is not None else cfg.iterations
    logger.info(
        f"🚀 Training {model_kind} on {task.name}: steps {start}→{end}, batch {cfg.batch_size}, "
        f"lr {cfg.lr}, λ₁={loss_cfg.lambda1}, λ₂={loss_cfg.lambda2}, "
        f"{sum(p.numel() for p in params)} parameters"
    )

    def fail(step: int, error: NumericalError):
        checkpoint = _capture(step, model_kind, config, named, shadow, optimizer, rng, task, snapshots, failed=True)
        if failure_path is not None:
            CheckpointStore.save(failure_path, checkpoint)
        logger.error(f"💥 Diverged at step {step}: {error}")
        raise error

    history: List[Dict[str, float]] = []
    log = MetricsLog(metrics_path, append=resume is not None) if metrics_path else None
    try:
        for step in tqdm(range(start, end), desc=f"{model_kind}:{task.name}", disable=not show_progress):
            try:
                report = train_step(task, net, enc, rng, cfg, loss_cfg, interp_cfg, time_cfg, reward_fn)
                ensure_finite(report.total.detach(), f"loss at step {step}")
                grads = autodiff.grad(report.total, params)
                lr_t = lr_at(step, cfg)
                adam_step(optimizer, params, grads, lr_t)
            except NumericalError as e:
                fail(step, e)
            ema_update(list(shadow.values()), params, cfg.ema_decay)

            report.grad_norm = global_grad_norm(grads)
            row = {"step": step + 1, **report.as_row(), "lr": lr_t}
            history.append(row)
            if log:
                log.append(row)

            if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
                snapshots.append({"step": step + 1, "ema": {k: s.clone() for k, s in shadow.items()}})
            if (step + 1) % cfg.log_every == 0:
                logger.info(
                    f"📈 step {step + 1}: total={row['total']:.4e} cmfm={row['cmfm']:.4e} "
                    f"nll={row['nll']:.4e} lr={lr_t:.2e}"
                )
            else:
                logger.debug(f"step {step + 1}: total={row['total']:.4e}")
    finally:
        if log:
            log.close()

    checkpoint = _capture(end, model_kind, config, named, shadow, optimizer, rng, task, snapshots)
    logger.success(f"✅ Training finished at step {end}")
    return TrainResult(checkpoint=checkpoint, net=net, enc=enc, history=history)
