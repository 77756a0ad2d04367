"""
Run Evaluation
Generates samples from a checkpoint, compares them with fresh reference draws on the
task's histogram grid and assembles the report document.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from loguru import logger

from src.core.tensor import DTYPE, Rng
from src.evaluation.metrics import EvalGrid, HistDensity, histogram_on_grid, kl_divergence, tv_distance
from src.flow.paths import InterpolantConfig
from src.sampling.sampler import SamplerConfig, generate
from src.storage.artifacts import ReportStore
from src.tasks.registry import Task
from src.training.checkpoint import Checkpoint
from src.training.trainer import load_models

# spawn key of the reference-draw streams; generation uses the low keys of the same seed
REFERENCE_STREAM = 1 << 16

HistPair = Tuple[HistDensity, HistDensity]


def _compare(
    generated: torch.Tensor,
    reference: torch.Tensor,
    reference_b: torch.Tensor,
    grid: EvalGrid,
) -> Tuple[Dict[str, float], HistPair]:
    p_gen = histogram_on_grid(generated, grid)
    p_ref = histogram_on_grid(reference, grid)
    p_ref_b = histogram_on_grid(reference_b, grid)
    metrics = {
        "tv": tv_distance(p_gen, p_ref),
        "kl": kl_divergence(p_ref, p_gen),
        "noise_floor_tv": tv_distance(p_ref_b, p_ref),
        "noise_floor_kl": kl_divergence(p_ref, p_ref_b),
    }
    return metrics, (p_gen, p_ref)


def compare_samples(
    generated: torch.Tensor,
    reference: torch.Tensor,
    reference_b: torch.Tensor,
    grid: EvalGrid,
) -> Dict[str, float]:
    """
    TV and KL(reference ‖ generated) plus the noise floor between two reference draws

    Returns:
        {"tv", "kl", "noise_floor_tv", "noise_floor_kl"}
    """
    return _compare(generated, reference, reference_b, grid)[0]


def _event_rate(task: Task, samples: torch.Tensor) -> float:
    return float(task.event_indicator(samples).to(DTYPE).mean())


def _condition_metrics(
    net,
    enc,
    task: Task,
    cfg: SamplerConfig,
    interp_cfg: InterpolantConfig,
    n_samples: int,
    grid: EvalGrid,
    rng: Rng,
    histograms: Optional[Dict[str, HistPair]] = None,
) -> dict:
    """Per-condition metrics and event frequencies of a guided trajectory task"""
    conditions = {}
    for label, event in (("without_event", None), ("with_event", 1)):
        ref_rng, ref_b_rng = rng.split(2)
        reference = task.reference(ref_rng, n_samples, event=event)
        reference_b = task.reference(ref_b_rng, n_samples, event=event)
        generated = generate(net, enc, task, n_samples, cfg, interp_cfg, c=reference.c)
        metrics, pair = _compare(generated, reference.x_data, reference_b.x_data, grid)
        if histograms is not None:
            histograms[label] = pair
        conditions[label] = {
            **metrics,
            "event_rate_generated": _event_rate(task, generated),
            "event_rate_reference": _event_rate(task, reference.x_data),
        }

    # same contexts as the unconditioned request, with the event flag switched on
    forced = task.reference(rng.split(1)[0], n_samples).c.clone()
    forced[:, 0] = 1.0
    guided = generate(net, enc, task, n_samples, cfg, interp_cfg, c=forced)
    conditions["event_guided_rate"] = _event_rate(task, guided)
    conditions["unconditional_rate"] = task.test_set.event_rate
    return conditions


def evaluate_models(
    net,
    enc,
    task: Task,
    cfg: SamplerConfig,
    interp_cfg: InterpolantConfig,
    n_samples: int,
    grid: Optional[EvalGrid] = None,
    histograms: Optional[Dict[str, HistPair]] = None,
) -> dict:
    """
    Metrics of one sampler configuration

    When a histograms dict is given it receives the (generated, reference) histogram
    pair per condition: "all" for unguided tasks, one entry per event condition otherwise.

    Returns:
        {"mode", "nfe", "tv", "kl", "noise_floor_tv", "noise_floor_kl"} (+ "conditions" when guided)
    """
    grid = grid or task.eval_grid()
    rng = Rng(cfg.seed, spawn_key=(REFERENCE_STREAM,))
    if task.guided:
        conditions = _condition_metrics(net, enc, task, cfg, interp_cfg, n_samples, grid, rng, histograms)
        row = {k: conditions["without_event"][k] for k in ("tv", "kl", "noise_floor_tv", "noise_floor_kl")}
        return {"mode": cfg.mode, "nfe": cfg.nfe, **row, "conditions": conditions}

    ref_rng, ref_b_rng = rng.split(2)
    reference = task.reference(ref_rng, n_samples).x_data
    reference_b = task.reference(ref_b_rng, n_samples).x_data
    generated = generate(net, enc, task, n_samples, cfg, interp_cfg)
    metrics, pair = _compare(generated, reference, reference_b, grid)
    if histograms is not None:
        histograms["all"] = pair
    row = {"mode": cfg.mode, "nfe": cfg.nfe, **metrics}
    if hasattr(task, "event_indicator"):
        row["event_rate_generated"] = _event_rate(task, generated)
        row["event_rate_reference"] = _event_rate(task, reference)
    return row


def evaluate_run(
    checkpoint: Checkpoint,
    task: Task,
    sampler_cfg: SamplerConfig,
    n_samples: int,
    grid: Optional[EvalGrid] = None,
    nfe_sweep: Sequence[int] = (),
    histogram_dir: Optional[Path] = None,
) -> dict:
    """
    Evaluate a checkpoint's EMA weights

    Args:
        checkpoint: Trained state
        task: Task the checkpoint was trained on
        sampler_cfg: Primary sampler configuration
        n_samples: Generated and reference sample count
        grid: Histogram grid (task default when None)
        nfe_sweep: Extra MeanFlow NFE values reported as additional rows
        histogram_dir: When set, the primary configuration's (p, q) histograms are written here
            as hist_{mode}_nfe{nfe}.csv, one file per condition for guided tasks

    Returns:
        Report dict {task, model, nfe, mode, tv, kl, noise_floor_tv, noise_floor_kl,
        n_samples, bins, bounds, seed, rows[, conditions]}
    """
    grid = grid or task.eval_grid()
    net, enc = load_models(checkpoint, task, use_ema=True)
    interp_cfg = InterpolantConfig(**checkpoint.config["interpolant"])
    logger.info(
        f"🔎 Evaluating {checkpoint.model_kind} on {task.name}: {n_samples} samples, "
        f"grid bounds={grid.bounds} bins={grid.bins} pooled={grid.pooled}"
    )

    histograms: Dict[str, HistPair] = {}
    primary = evaluate_models(net, enc, task, sampler_cfg, interp_cfg, n_samples, grid, histograms)
    if histogram_dir is not None:
        stem = f"hist_{sampler_cfg.mode}_nfe{sampler_cfg.nfe}"
        for label, (p, q) in histograms.items():
            name = f"{stem}.csv" if label == "all" else f"{stem}_{label}.csv"
            ReportStore.save_histogram(Path(histogram_dir) / name, p, q)
    rows: List[dict] = [{k: v for k, v in primary.items() if k != "conditions"}]
    for nfe in nfe_sweep:
        sweep_cfg = SamplerConfig(nfe=nfe, mode="meanflow", seed=sampler_cfg.seed)
        if sweep_cfg.mode == sampler_cfg.mode and nfe == sampler_cfg.nfe:
            continue
        row = evaluate_models(net, enc, task, sweep_cfg, interp_cfg, n_samples, grid)
        rows.append({k: v for k, v in row.items() if k != "conditions"})

    report = {
        "task": task.name,
        "model": checkpoint.model_kind,
        "step": checkpoint.step,
        "nfe": sampler_cfg.nfe,
        "mode": sampler_cfg.mode,
        "tv": primary["tv"],
        "kl": primary["kl"],
        "noise_floor_tv": primary["noise_floor_tv"],
        "noise_floor_kl": primary["noise_floor_kl"],
        "n_samples": n_samples,
        "bins": list(grid.bins),
        "bounds": [list(b) for b in grid.bounds],
        "seed": sampler_cfg.seed,
        "rows": rows,
    }
    if "conditions" in primary:
        report["conditions"] = primary["conditions"]
    for row in rows:
        logger.info(
            f"📏 {row['mode']} nfe={row['nfe']}: TV={row['tv']:.4f} KL={row['kl']:.4f} "
            f"(noise floor TV={row['noise_floor_tv']:.4f})"
        )
    return report
