#!/usr/bin/env python3
"""
Loss Tests: CMFM, CFM, NLL, guidance regularizer, policy-gradient term, joint objective
"""

import math
import os
import sys

import numpy as np
import pytest
import torch
import torch.nn as nn

# Add src directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core import autodiff
from src.core.tensor import DTYPE, Rng, as_tensor, randn, squared_norm
from src.errors import ConfigurationError, ShapeError
from src.flow.paths import InterpolantConfig, TimeSamplerConfig, make_flow_batch
from src.models.nets import GuidanceEncoder, NetConfig, VelocityNet
from src.training.losses import (
    LossConfig,
    adaptive_weight,
    cfm_loss,
    cmfm_loss,
    cmfm_target,
    guidance_reg,
    log_likelihood,
    minibatch_ot_pairing,
    nll_loss,
    rl_loss,
    rmflow_loss,
)


class ConstantField(nn.Module):
    """û ≡ value everywhere"""

    def __init__(self, value):
        super().__init__()
        self.value = torch.as_tensor(value, dtype=DTYPE)

    def forward(self, x, t, r):
        return self.value + 0.0 * x


def _small_net(seed: int = 0, width: int = 8, depth: int = 2, data_dim: int = 2) -> VelocityNet:
    torch.manual_seed(seed)
    net = VelocityNet(data_dim, NetConfig(width=width, depth=depth, embed_dim=4, embed_max_log2=2.0))
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return net


def _batch(seed: int, n: int = 8, d: int = 2, eta: float = 0.05, q: float = 0.75):
    rng = Rng(seed)
    x0, x1 = randn(rng, (n, d)), randn(rng, (n, d))
    cfg = InterpolantConfig(eta=eta)
    return make_flow_batch(rng, cfg, TimeSamplerConfig(q=q), x0, x1), cfg


def _finite_difference_check(loss_fn, params, rtol, h=1e-6, per_param=3):
    grads = autodiff.grad(loss_fn(), params)
    gen = np.random.default_rng(1)
    fd_all, exact_all = [], []
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for idx in gen.choice(flat.numel(), size=min(per_param, flat.numel()), replace=False):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                plus = float(loss_fn())
                flat[idx] = orig - h
                minus = float(loss_fn())
                flat[idx] = orig
            fd_all.append((plus - minus) / (2 * h))
            exact_all.append(float(g.view(-1)[idx]))
    fd_all, exact_all = np.array(fd_all), np.array(exact_all)
    rel = np.linalg.norm(fd_all - exact_all) / np.linalg.norm(exact_all)
    assert rel < rtol


def test_cmfm_zero_on_shift_task_with_exact_field():
    mu = as_tensor([1.5, -0.5])
    rng = Rng(0)
    x0 = randn(rng, (64, 2))
    cfg = InterpolantConfig(eta=0.0, sigma=0.0)
    batch = make_flow_batch(rng, cfg, TimeSamplerConfig(q=0.5), x0, x0 + mu)
    # x1 − x0 recovers μ up to rounding
    assert float(cmfm_loss(ConstantField(mu), batch, LossConfig())) < 1e-28


def test_cmfm_reduces_to_cfm_when_r_equals_t():
    net = _small_net(1)
    batch, _ = _batch(3, q=0.0)
    assert torch.equal(batch.r, batch.t)
    cfg = LossConfig()
    torch.testing.assert_close(cmfm_loss(net, batch, cfg), cfm_loss(net, batch, cfg), rtol=1e-13, atol=0.0)


def test_cmfm_gradient_equals_frozen_target_gradient():
    net = _small_net(2)
    batch, _ = _batch(4)
    cfg = LossConfig()
    params = list(net.parameters())

    pred, target = cmfm_target(net, batch)
    weight = adaptive_weight(squared_norm(pred - target), cfg).detach()
    frozen = target.detach()
    reference = (weight * squared_norm(net(batch.xt, batch.t, batch.r) - frozen)).mean()

    for g_tape, g_ref in zip(autodiff.grad(cmfm_loss(net, batch, cfg), params), autodiff.grad(reference, params)):
        torch.testing.assert_close(g_tape, g_ref, rtol=1e-10, atol=1e-14)


def test_cmfm_gradient_finite_differences_two_unit_net():
    net = _small_net(5, width=2, depth=1)
    batch, _ = _batch(6, n=2)
    cfg = LossConfig()
    pred, target = cmfm_target(net, batch)
    weight = adaptive_weight(squared_norm(pred - target), cfg).detach()
    frozen = target.detach()

    surrogate = lambda: (weight * squared_norm(net(batch.xt, batch.t, batch.r) - frozen)).mean()
    # the tape gradient of the stop-gradient loss is the gradient of the frozen surrogate
    for g_tape, g_ref in zip(
        autodiff.grad(cmfm_loss(net, batch, cfg), list(net.parameters())),
        autodiff.grad(surrogate(), list(net.parameters())),
    ):
        torch.testing.assert_close(g_tape, g_ref, rtol=1e-10, atol=1e-14)
    _finite_difference_check(surrogate, list(net.parameters()), rtol=1e-5)


def test_adaptive_weight_m_zero_is_unit():
    delta_sq = as_tensor([0.0, 1.0, 100.0])
    assert torch.equal(adaptive_weight(delta_sq, LossConfig(m=0.0)), torch.ones(3, dtype=DTYPE))


def test_nll_perfect_generator_expectation():
    shift = as_tensor([0.7, -1.2])
    n = 100_000
    rng = Rng(8)
    x0 = randn(rng, (n, 2))
    cfg = InterpolantConfig(eta=0.0, sigma_min=1e-3, sigma=5e-4)
    loss = float(nll_loss(ConstantField(shift), x0, x0 + shift, Rng(9), cfg))
    expected = 2 * cfg.sigma_min ** 2
    stderr = cfg.sigma_min ** 2 * 2.0 / math.sqrt(n)
    assert abs(loss - expected) < 3 * stderr


def test_nll_zero_without_target_noise():
    shift = as_tensor([0.7])
    x0 = randn(Rng(1), (32, 1))
    cfg = InterpolantConfig(eta=0.0, sigma_min=0.0, sigma=0.0)
    assert float(nll_loss(ConstantField(shift), x0, x0 + shift, Rng(2), cfg)) == 0.0


def test_nll_gradient_finite_differences():
    net = _small_net(11)
    rng = Rng(12)
    x0, x_data = randn(rng, (6, 2)), randn(rng, (6, 2))
    cfg = InterpolantConfig()
    _finite_difference_check(lambda: nll_loss(net, x0, x_data, Rng(13), cfg), list(net.parameters()), rtol=1e-5)


def test_ot_pairing_in_one_dimension_is_monotone():
    rng = Rng(21)
    x0, x_data = randn(rng, (64, 1)), 3.0 * randn(rng, (64, 1)) + 1.0
    paired = minibatch_ot_pairing(x0, x_data)
    expected = torch.empty_like(x_data)
    expected[x0[:, 0].argsort()] = x_data[x_data[:, 0].argsort()]
    assert torch.equal(paired, expected)


def test_ot_pairing_is_a_cheaper_permutation():
    rng = Rng(22)
    x0, x_data = randn(rng, (32, 2)), randn(rng, (32, 2)) + as_tensor([2.0, -1.0])
    paired = minibatch_ot_pairing(x0, x_data)
    assert sorted(map(tuple, paired.tolist())) == sorted(map(tuple, x_data.tolist()))
    assert float(squared_norm(paired - x0).sum()) <= float(squared_norm(x_data - x0).sum())
    with pytest.raises(ShapeError):
        minibatch_ot_pairing(x0, x_data[:5])


def test_ot_pairing_recovers_a_shuffled_translation():
    x0 = randn(Rng(23), (16, 3))
    shuffled = (x0 + 0.01)[torch.randperm(16, generator=torch.Generator().manual_seed(0))]
    assert torch.equal(minibatch_ot_pairing(x0, shuffled), x0 + 0.01)


def test_guidance_reg_cases():
    enc = GuidanceEncoder(1, 2, hidden=0, bias=False)
    with torch.no_grad():
        enc.mlp.weight.copy_(as_tensor([[3.0], [4.0]]))
    assert float(guidance_reg(enc, as_tensor([[1.0]]))) == 25.0

    with torch.no_grad():
        enc.mlp.weight.zero_()
    assert float(guidance_reg(enc, randn(Rng(0), (5, 1)))) == 0.0
    assert float(guidance_reg(None, None)) == 0.0


def test_log_likelihood_mode_and_constant():
    net = _small_net(3)
    x0 = randn(Rng(0), (4, 2))
    cfg = InterpolantConfig(sigma_min=1e-2, sigma=5e-3)
    with torch.no_grad():
        mode = x0 + net(x0, torch.ones(4), torch.zeros(4))
    const = -0.5 * 2 * math.log(2 * math.pi * cfg.injection_variance)
    assert torch.equal(log_likelihood(net, mode, x0, cfg), torch.full((4,), const, dtype=DTYPE))

    unit = InterpolantConfig(sigma_min=math.sqrt(1.0 / (2.0 * math.pi)), sigma=0.0)
    zero_net = VelocityNet(1, NetConfig(width=4, depth=1, embed_dim=4))
    x = torch.zeros(1, 1, dtype=DTYPE)
    assert abs(float(log_likelihood(zero_net, x, x, unit))) < 1e-12


def test_log_likelihood_integrates_to_one():
    zero_net = VelocityNet(1, NetConfig(width=4, depth=1, embed_dim=4))
    cfg = InterpolantConfig(sigma_min=0.5, sigma=0.1)
    grid = torch.linspace(-5.0, 5.0, 20_001, dtype=DTYPE)[:, None]
    x0 = torch.zeros_like(grid)
    with torch.no_grad():
        density = torch.exp(log_likelihood(zero_net, grid, x0, cfg))
    mass = float(torch.trapezoid(density, grid[:, 0]))
    assert abs(mass - 1.0) < 0.01


def test_log_likelihood_requires_strict_noise_gap():
    net = VelocityNet(1, NetConfig(width=4, depth=1, embed_dim=4))
    cfg = InterpolantConfig(sigma_min=1e-3, sigma=1e-3)
    with pytest.raises(ConfigurationError):
        log_likelihood(net, torch.zeros(2, 1), torch.zeros(2, 1), cfg)


def test_rl_loss_constant_rewards():
    net = _small_net(4)
    rng = Rng(5)
    x0, x_hat = randn(rng, (6, 2)), randn(rng, (6, 2))
    cfg = InterpolantConfig(sigma_min=0.5, sigma=0.1)
    params = list(net.parameters())

    zero = rl_loss(net, x0, x_hat, lambda x: torch.zeros(x.shape[0]), cfg)
    assert float(zero) == 0.0
    assert all(torch.equal(g, torch.zeros_like(g)) for g in autodiff.grad(zero, params))

    one = rl_loss(net, x0, x_hat, lambda x: torch.ones(x.shape[0]), cfg)
    torch.testing.assert_close(one, -log_likelihood(net, x_hat, x0, cfg).mean(), rtol=1e-14, atol=0.0)


def test_rl_loss_gradient_finite_differences():
    net = _small_net(6)
    rng = Rng(7)
    x0, x_hat = randn(rng, (6, 2)), randn(rng, (6, 2))
    cfg = InterpolantConfig(sigma_min=0.5, sigma=0.1)
    reward = lambda x: torch.tanh(x.sum(dim=1))
    _finite_difference_check(lambda: rl_loss(net, x0, x_hat, reward, cfg), list(net.parameters()), rtol=1e-5)


def test_rmflow_loss_degenerates_to_cmfm():
    net = _small_net(9)
    batch, interp = _batch(10)
    cfg = LossConfig(lambda1=0.0, lambda2=0.0)
    report = rmflow_loss(net, None, batch, batch.x0, batch.x1, None, cfg, interp, Rng(1))
    assert torch.equal(report.total, cmfm_loss(net, batch, cfg))


def test_rmflow_report_identity_guided():
    net = _small_net(12)
    enc = GuidanceEncoder(3, 2, hidden=8)
    rng = Rng(14)
    c = randn(rng, (8, 3))
    interp = InterpolantConfig()
    x0 = enc(c) + interp.sigma_c * randn(rng, (8, 2))
    x_data = randn(rng, (8, 2))
    batch = make_flow_batch(rng, interp, TimeSamplerConfig(), x0, x_data)
    cfg = LossConfig(lambda1=0.1, lambda2=1e-4)

    report = rmflow_loss(net, enc, batch, x0, x_data, c, cfg, interp, Rng(15))
    combined = report.cmfm + cfg.lambda1 * report.nll + cfg.lambda2 * report.guidance_reg
    assert abs(float(report.total - combined)) < 1e-12
    assert float(report.guidance_reg) > 0.0

    # one backward pass reaches the encoder through the prior
    grads = autodiff.grad(report.total, list(enc.parameters()))
    assert any(float(g.abs().sum()) > 0 for g in grads)


def test_rmflow_loss_gradient_finite_differences():
    net = _small_net(16)
    batch, interp = _batch(17)
    cfg = LossConfig(lambda1=0.1)
    pred, target = cmfm_target(net, batch)
    weight = adaptive_weight(squared_norm(pred - target), cfg).detach()
    frozen = target.detach()
    x_data = batch.x1

    def surrogate():
        regression = (weight * squared_norm(net(batch.xt, batch.t, batch.r) - frozen)).mean()
        return regression + cfg.lambda1 * nll_loss(net, batch.x0, x_data, Rng(18), interp)

    tape = rmflow_loss(net, None, batch, batch.x0, x_data, None, cfg, interp, Rng(18)).total
    params = list(net.parameters())
    for g_tape, g_ref in zip(autodiff.grad(tape, params), autodiff.grad(surrogate(), params)):
        torch.testing.assert_close(g_tape, g_ref, rtol=1e-10, atol=1e-14)
    _finite_difference_check(surrogate, params, rtol=1e-5)


def test_rl_weight_needs_reward():
    net = _small_net(19)
    batch, interp = _batch(20)
    with pytest.raises(ConfigurationError):
        rmflow_loss(net, None, batch, batch.x0, batch.x1, None, LossConfig(rl_weight=0.5), interp, Rng(0))


def test_rl_term_enters_total():
    net = _small_net(21)
    batch, _ = _batch(22)
    interp = InterpolantConfig(sigma_min=0.5, sigma=0.1)
    cfg = LossConfig(lambda1=0.0, rl_weight=0.5)
    report = rmflow_loss(net, None, batch, batch.x0, batch.x1, None, cfg, interp, Rng(1),
                         reward_fn=lambda x: -squared_norm(x))
    assert abs(float(report.total - (report.cmfm + 0.5 * report.rl))) < 1e-12
