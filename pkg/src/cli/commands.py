"""
Command Implementations for rmflow-lab
train, sample, eval, ablate and print-default-config.
"""

import hashlib
import json
from pathlib import Path
from typing import List, Optional, Sequence

from loguru import logger
from pydantic import ValidationError

from src.cli.schema import RunConfig, default_config, load_run_config, parse_run_config
from src.core.tensor import Rng
from src.errors import ConfigurationError
from src.evaluation.report import REFERENCE_STREAM, evaluate_run
from src.flow.paths import InterpolantConfig
from src.sampling.sampler import SamplerConfig, generate
from src.storage.artifacts import CheckpointStore, DatasetStore, ReportStore, SampleStore
from src.tasks.registry import TaskOptions, make_task
from src.training.trainer import TrainResult, load_models, train_run

CHECKPOINT_FILE = "checkpoint.json"
FAILURE_FILE = "checkpoint-failed.json"
METRICS_FILE = "metrics.csv"
ECHO_FILE = "config-echo.json"
ABLATION_COLUMNS = ["lambda1", "tv", "kl", "noise_floor_tv", "noise_floor_kl"]


def _with_overrides(cfg: RunConfig, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    data = cfg.echo()
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = str(out)
    return parse_run_config(data)


def _sampler_config(nfe: int, mode: str, seed: int) -> SamplerConfig:
    try:
        return SamplerConfig(nfe=nfe, mode=mode, seed=seed)
    except ValidationError as e:
        raise ConfigurationError(f"invalid sampler request: {e.errors()[0]['msg']}") from e


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_training(cfg: RunConfig, run_dir: Path, show_progress: bool = True) -> TrainResult:
    """Train per cfg, writing the config echo, metrics log and checkpoint into run_dir"""
    run_dir.mkdir(parents=True, exist_ok=True)
    ReportStore.save_report(run_dir / ECHO_FILE, cfg.echo())

    task = cfg.make_task()
    if hasattr(task, "train_set"):
        DatasetStore.save(run_dir / "dataset.csv", task.train_set.data, {
            "task": task.describe(),
            "standardizer": task.scaler.state(),
            "event_rate": task.train_set.event_rate,
        })

    result = train_run(
        task,
        cfg.model_kind,
        cfg.train,
        cfg.loss,
        interp_cfg=cfg.interpolant,
        time_cfg=cfg.time_sampler,
        net_cfg=cfg.net,
        metrics_path=run_dir / METRICS_FILE,
        failure_path=run_dir / FAILURE_FILE,
        show_progress=show_progress,
    )
    CheckpointStore.save(run_dir / CHECKPOINT_FILE, result.checkpoint)
    return result


def cmd_train(config_path: Path, seed: Optional[int] = None, out: Optional[str] = None) -> Path:
    """
    Train from a JSON config

    Writes checkpoint.json, metrics.csv and config-echo.json into the run directory.

    Returns:
        Run directory
    """
    cfg = _with_overrides(load_run_config(config_path), seed, out)
    run_dir = cfg.run_dir()
    logger.info(f"🏋️ train: task={cfg.task} model={cfg.model_kind} seed={cfg.seed} → {run_dir}")
    run_training(cfg, run_dir)
    logger.success(f"✅ Run written to {run_dir}")
    return run_dir


def _task_from_checkpoint(checkpoint):
    return make_task(checkpoint.config["task"], TaskOptions(**checkpoint.config["task_options"]))


def cmd_sample(
    checkpoint_path: Path,
    n: int,
    nfe: int = 1,
    mode: Optional[str] = None,
    out: Optional[str] = None,
    seed: int = 0,
) -> Path:
    """
    Draw n samples from a checkpoint's EMA weights into a CSV with a provenance header

    Returns:
        Path of the samples CSV
    """
    if n <= 0:
        raise ConfigurationError(f"sample count must be positive, got {n}")
    checkpoint = CheckpointStore.load(checkpoint_path)
    mode = mode or checkpoint.model_kind
    cfg = _sampler_config(nfe, mode, seed)
    task = _task_from_checkpoint(checkpoint)
    net, enc = load_models(checkpoint, task, use_ema=True)
    interp_cfg = InterpolantConfig(**checkpoint.config["interpolant"])

    contexts = None
    if task.guided:
        contexts = task.reference(Rng(seed, spawn_key=(REFERENCE_STREAM,)), n).c
    samples = generate(net, enc, task, n, cfg, interp_cfg, c=contexts)

    out_path = Path(out) if out else Path(checkpoint_path).parent / f"samples_{mode}_nfe{nfe}_seed{seed}.csv"
    provenance = {
        "checkpoint_sha256": file_digest(checkpoint_path),
        "task": task.name,
        "step": checkpoint.step,
        "mode": mode,
        "nfe": nfe,
        "seed": seed,
    }
    return SampleStore.save(out_path, samples, provenance, contexts)


def cmd_eval(
    checkpoint_path: Path,
    n: int,
    nfe: int = 1,
    mode: Optional[str] = None,
    out: Optional[str] = None,
    seed: int = 0,
    nfe_sweep: Sequence[int] = (),
) -> dict:
    """
    Evaluate a checkpoint; the report goes to stdout and to report.json

    The (p, q) histogram dump of the primary configuration lands next to the report.
    """
    if n <= 0:
        raise ConfigurationError(f"sample count must be positive, got {n}")
    checkpoint = CheckpointStore.load(checkpoint_path)
    mode = mode or checkpoint.model_kind
    cfg = _sampler_config(nfe, mode, seed)
    task = _task_from_checkpoint(checkpoint)

    out_dir = Path(out) if out else Path(checkpoint_path).parent
    report = evaluate_run(checkpoint, task, cfg, n, nfe_sweep=nfe_sweep, histogram_dir=out_dir)
    report["checkpoint_sha256"] = file_digest(checkpoint_path)
    ReportStore.save_report(out_dir / f"report_{mode}_nfe{nfe}.json", report)
    print(json.dumps(report, indent=2))
    return report


def cmd_ablate(
    config_path: Path,
    lambda1_grid: Optional[List[float]] = None,
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> Path:
    """
    Train and evaluate one RMFlow model per λ₁ with a shared seed

    Returns:
        Path of ablation.csv with columns lambda1,tv,kl,noise_floor_tv,noise_floor_kl
    """
    base = _with_overrides(load_run_config(config_path), seed, out)
    grid = list(lambda1_grid) if lambda1_grid else base.lambda1_grid
    if not grid:
        raise ConfigurationError("lambda1 grid is empty")
    root = base.run_dir()
    rows = []
    for lambda1 in grid:
        data = base.echo()
        data["model_kind"] = "rmflow"
        data["sampler"] = {**data["sampler"], "mode": "rmflow", "nfe": 1, "grid": None}
        data["loss"] = {**data["loss"], "lambda1": lambda1}
        cfg = parse_run_config(data)
        logger.info(f"🧪 ablation λ₁={lambda1}")
        result = run_training(cfg, root / f"lambda1_{lambda1:g}", show_progress=False)
        report = evaluate_run(result.checkpoint, cfg.make_task(), cfg.sampler, cfg.n_eval_samples, grid=cfg.eval)
        rows.append({"lambda1": lambda1, **{k: report[k] for k in ABLATION_COLUMNS[1:]}})

    path = ReportStore.save_table(root / "ablation.csv", ABLATION_COLUMNS, rows)
    logger.success(f"✅ Ablation table ({len(rows)} rows) written to {path}")
    return path


def cmd_print_default_config(task: str) -> dict:
    """Emit the fully populated default config of a task"""
    cfg = default_config(task).echo()
    print(json.dumps(cfg, indent=2))
    return cfg
