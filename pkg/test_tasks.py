#!/usr/bin/env python3
"""
Task Tests: Gaussian mixture, checkerboard, shift, RK4 trajectories, events, registry
"""

import math
import os
import sys

import numpy as np
import pytest
import torch
from pydantic import ValidationError
from scipy.integrate import simpson

# Add src directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.tensor import DTYPE, Rng, as_tensor, randn
from src.errors import ConfigurationError
from src.evaluation.metrics import histogram, tv_distance, HistDensity
from src.tasks.dynamics import (
    Standardizer,
    TrajectorySpec,
    build_context,
    context_dim,
    event_indicator,
    generate_trajectories,
    integrate,
    integrate_trajectory,
    vector_field,
)
from src.tasks.registry import FhnTask, LorenzEventTask, ShiftTask, TASKS, TaskOptions, make_task
from src.tasks.synthetic import (
    CheckerboardSpec,
    GmmSpec,
    checkerboard_support,
    gmm_density,
    sample_checkerboard,
    sample_gmm,
    sample_gmm_with_components,
)


# ========== Gaussian mixture ==========

def test_gmm_component_fractions_and_mean():
    spec = GmmSpec()
    samples, components = sample_gmm_with_components(Rng(0), spec, 100_000)
    assert samples.shape == (100_000, 1)
    fractions = torch.bincount(components, minlength=3).to(DTYPE) / 100_000
    assert torch.allclose(fractions, as_tensor(spec.weights), atol=0.01)
    assert abs(float(samples.mean()) - spec.mean) < 0.02
    assert spec.mean == pytest.approx(0.05)


def test_gmm_single_component():
    spec = GmmSpec(weights=[1.0, 0.0, 0.0])
    samples = sample_gmm(Rng(1), spec, 10_000)
    assert float((samples - 1.5).abs().max()) < 1.2


def test_gmm_density_integrates_to_one():
    xs = np.linspace(-4.0, 4.0, 4001)
    assert simpson(gmm_density(GmmSpec(), xs), x=xs) == pytest.approx(1.0, abs=1e-6)


def test_gmm_spec_validation():
    with pytest.raises(ValidationError):
        GmmSpec(weights=[0.5, 0.2, 0.2])
    with pytest.raises(ValidationError):
        GmmSpec(weights=[0.5, 0.5], means=[0.0, 1.0], variances=[1.0, 0.0])
    with pytest.raises(ValidationError):
        GmmSpec(weights=[1.0], means=[0.0, 1.0], variances=[1.0])


# ========== Checkerboard ==========

def test_checkerboard_support_and_cell_masses():
    spec = CheckerboardSpec()
    samples = sample_checkerboard(Rng(2), spec, 200_000)
    assert bool(checkerboard_support(spec, samples).all())

    counts = histogram(samples, [(-2.0, 2.0), (-2.0, 2.0)], [4, 4])
    exact = HistDensity(bounds=counts.bounds, bins=counts.bins, masses=spec.cell_masses(), clipped=0)
    assert tv_distance(counts, exact) < 0.01
    assert np.count_nonzero(spec.cell_masses()) == 8


def test_two_by_two_board_fills_diagonal_quadrants():
    spec = CheckerboardSpec(cells=2)
    samples = sample_checkerboard(Rng(3), spec, 5_000)
    assert bool((samples[:, 0] * samples[:, 1] > 0).all())


def test_checkerboard_support_points():
    spec = CheckerboardSpec()
    points = as_tensor([[-1.5, -1.5], [-0.5, -1.5], [0.5, 0.5], [3.0, 0.0]])
    assert checkerboard_support(spec, points).tolist() == [True, False, True, False]


def test_checkerboard_needs_even_cells():
    with pytest.raises(ValidationError):
        CheckerboardSpec(cells=3)


# ========== Shift ==========

def test_shift_task_couples_prior():
    task = ShiftTask(TaskOptions(mu=2.0))
    x0 = randn(Rng(4), (8, 1))
    assert torch.equal(task.couple(x0), x0 + 2.0)
    assert task.coupled and not task.guided
    assert task.eval_grid().bounds == [(-3.0, 7.0)]


# ========== Integrator ==========

def test_rk4_zero_field_is_constant():
    x = as_tensor([[1.0, -2.0, 3.0]])
    path = integrate(lambda s: torch.zeros_like(s), x, 0.1, 10)
    assert path.shape == (11, 1, 3)
    assert torch.equal(path[-1], x)


def test_rk4_fourth_order_convergence():
    decay = lambda s: -s
    x = as_tensor([1.0])
    exact = math.exp(-1.0)
    coarse = abs(float(integrate(decay, x, 0.1, 10)[-1]) - exact)
    fine = abs(float(integrate(decay, x, 0.05, 20)[-1]) - exact)
    assert 14.0 < coarse / fine < 18.0


def test_lorenz_trajectory_stays_bounded():
    spec = TrajectorySpec.lorenz()
    traj = integrate_trajectory(Rng(5), spec)
    assert traj.shape == (64, 3)
    assert float(traj.abs().max()) < 100.0


def test_generated_trajectories_are_reproducible():
    spec = TrajectorySpec.fhn(burn_in=50)
    a = generate_trajectories(Rng(6), spec, 20)
    b = generate_trajectories(Rng(6), spec, 20)
    assert a.shape == (20, 64, 2)
    assert torch.equal(a, b)


def test_fhn_field_vanishes_on_w_nullcline():
    spec = TrajectorySpec.fhn()
    field = vector_field(spec)
    # ẇ vanishes on the w-nullcline
    v = as_tensor([-1.0])
    w = (v + 0.7) / 0.8
    dw = float(field(torch.stack([v, w], dim=-1))[0, 1])
    assert abs(dw) < 1e-12


# ========== Events ==========

def test_event_thresholds_at_infinity():
    traj = generate_trajectories(Rng(7), TrajectorySpec.lorenz(burn_in=100), 16).reshape(16, -1)
    never = TrajectorySpec.lorenz(event_threshold=float("inf"))
    always = TrajectorySpec.lorenz(event_threshold=float("-inf"))
    assert int(event_indicator(never, traj).sum()) == 0
    assert int(event_indicator(always, traj).sum()) == 16


def test_hand_built_events():
    lorenz = TrajectorySpec.lorenz(steps=3)
    quiet = as_tensor([1.0, 0.0, 0.0, 5.0, 0.0, 0.0, 11.0, 0.0, 0.0])
    loud = as_tensor([1.0, 0.0, 0.0, 13.0, 0.0, 0.0, 11.0, 0.0, 0.0])
    assert event_indicator(lorenz, quiet) == 0
    assert event_indicator(lorenz, loud) == 1

    fhn = TrajectorySpec.fhn(steps=5)
    spike = as_tensor([[0.0, 0.0], [0.5, 0.0], [1.2, 0.0], [0.3, 0.0], [0.2, 0.0]])
    flat = as_tensor([[0.0, 0.0], [0.5, 0.0], [0.9, 0.0], [0.3, 0.0], [0.2, 0.0]])
    assert event_indicator(fhn, spike.reshape(-1)) == 1
    assert event_indicator(fhn, flat.reshape(-1)) == 0
    assert event_indicator(fhn, torch.stack([spike, flat])).tolist() == [1, 0]


# ========== Standardization and contexts ==========

def test_standardizer_round_trip():
    raw = 3.0 + 2.0 * randn(Rng(8), (50, 10, 3))
    scaler = Standardizer.fit(raw)
    z = scaler.standardize(raw).reshape(-1, 3)
    assert torch.allclose(z.mean(dim=0), torch.zeros(3, dtype=DTYPE), atol=1e-12)
    assert torch.allclose(z.std(dim=0), torch.ones(3, dtype=DTYPE), atol=1e-12)
    torch.testing.assert_close(scaler.unstandardize(scaler.standardize(raw)), raw)

    restored = Standardizer.from_state(scaler.state())
    assert torch.equal(restored.mean, scaler.mean) and torch.equal(restored.std, scaler.std)


def test_context_layout():
    standardized = randn(Rng(9), (4, 64, 3))
    events = torch.tensor([1, 0, 1, 0])
    c = build_context(standardized, events)
    assert c.shape == (4, context_dim(TrajectorySpec.lorenz())) == (4, 10)
    assert c[:, 0].tolist() == [1.0, 0.0, 1.0, 0.0]
    assert torch.equal(c[:, 1:4], standardized[:, 0, :])


# ========== Registry ==========

def test_registry_and_defaults():
    assert set(TASKS) == {"gmm", "checkerboard", "shift", "lorenz", "fhn", "lorenz_event", "fhn_event"}
    with pytest.raises(ConfigurationError):
        make_task("swiss_roll")
    assert make_task("gmm").loss_defaults() == {"lambda1": 0.1, "lambda2": 0.0}
    guided = make_task("lorenz_event")
    assert guided.guided and guided.context_dim == 10
    assert guided.loss_defaults()["lambda2"] == 1e-4
    assert make_task("checkerboard").data_dim == 2


def test_trajectory_task_draws_and_inverts():
    task = FhnTask(TaskOptions(n_train=40, n_test=16))
    batch = task.draw(Rng(10), 12)
    assert batch.x_data.shape == (12, 128)
    assert batch.c is None
    assert task.eval_grid().pooled

    train = task.train_set
    torch.testing.assert_close(task.to_raw(train.data), train.raw.reshape(40, -1))


def test_trajectory_task_state_round_trip():
    options = TaskOptions(n_train=32, n_test=8)
    source = FhnTask(options)
    state = source.state()
    target = FhnTask(options)
    target.load_state(state)
    assert torch.equal(target.train_set.data, source.train_set.data)


def test_reference_for_missing_event_raises():
    task = LorenzEventTask(TaskOptions(n_train=16, n_test=16, event_threshold=1e9))
    assert task.train_set.event_rate == 0.0
    with pytest.raises(ConfigurationError):
        task.reference(Rng(0), 4, event=1)
    batch = task.reference(Rng(0), 4, event=0)
    assert batch.c.shape == (4, 10)
    assert bool((batch.c[:, 0] == 0).all())
