import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posefield.diffusion import (
    GuidanceConfig, NoiseSchedule, biased_timestep, combine_guidance, denoise_once, forward_noise,
    guided_epsilon, masked_loss, sample, timestep_grid,
)
from oracles import masked_mse_scalar

SCHED = NoiseSchedule.cosine()


def test_schedule_invariants():
    ab = SCHED.alpha_bar
    assert SCHED.T == 200 and ab[0] == 1.0
    assert np.all(np.diff(ab) < 0) and ab[-1] < 0.01
    with pytest.raises(ValueError):
        NoiseSchedule(3, np.array([1.0, 0.5, 0.6, 0.001]), np.ones(4))


def test_forward_noise_endpoints_and_range():
    x0, eps = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert torch.equal(forward_noise(x0, 0, eps, SCHED), x0)
    assert (forward_noise(x0, SCHED.T, eps, SCHED) - eps).abs().max() < 0.05
    with pytest.raises(ValueError):
        forward_noise(x0, SCHED.T + 1, eps, SCHED)
    with pytest.raises(ValueError):
        forward_noise(x0, -1, eps, SCHED)


@pytest.mark.parametrize("t", [10, 100, 190])
def test_forward_noise_moments(t):
    x0 = torch.full((10_000,), 0.7, dtype=torch.float64)
    eps = torch.from_numpy(np.random.default_rng(t).normal(size=10_000))
    xt = forward_noise(x0, t, eps, SCHED)
    ab = SCHED.alpha_bar[t]
    assert float(xt.var()) == pytest.approx(1 - ab, rel=0.05)
    # 5% of the larger of the mean and the noise scale
    assert float(xt.mean()) == pytest.approx(math.sqrt(ab) * 0.7, abs=0.05 * max(math.sqrt(ab) * 0.7, math.sqrt(1 - ab)))


def test_masked_loss_contracts():
    g = torch.Generator().manual_seed(0)
    e, p = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
    ones, zeros = torch.ones(2, 4, 4), torch.zeros(2, 4, 4)
    assert float(masked_loss(e, p, ones)) == pytest.approx(float(((e - p) ** 2).mean()), abs=1e-6)
    assert float(masked_loss(e, p, zeros)) == 0.0
    half = torch.zeros(2, 4, 4)
    half[:, :, :2] = 1
    expect = float(((e - p)[..., :2] ** 2).mean())
    assert float(masked_loss(e, p, half)) == pytest.approx(expect, abs=1e-6)
    assert float(masked_loss(e, p, half)) == pytest.approx(masked_mse_scalar(e[0].tolist(), p[0].tolist(), half[0].tolist()) / 2
                                                          + masked_mse_scalar(e[1].tolist(), p[1].tolist(), half[1].tolist()) / 2, abs=1e-6)
    with pytest.raises(ValueError):
        masked_loss(e, p[:, :2], ones)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_masked_loss_ignores_values_outside_mask(seed):
    g = torch.Generator().manual_seed(seed)
    e, p = torch.randn(1, 3, 5, 5, generator=g), torch.randn(1, 3, 5, 5, generator=g)
    m = (torch.rand(1, 5, 5, generator=g) > 0.5).float()
    p2 = torch.where(m.bool().unsqueeze(1), p, torch.randn(1, 3, 5, 5, generator=g) * 100)
    assert float(masked_loss(e, p, m)) == pytest.approx(float(masked_loss(e, p2, m)), abs=1e-9)


def test_biased_timestep_distribution():
    t = biased_timestep(np.random.default_rng(0), SCHED, 100_000)
    assert t.min() >= 1 and t.max() <= SCHED.T
    assert t.mean() == pytest.approx(2 * SCHED.T / 3, rel=0.02)
    assert np.median(t) == pytest.approx(SCHED.T / math.sqrt(2), rel=0.02)


def test_guidance_algebra():
    g = torch.Generator().manual_seed(0)
    a, b, c = (torch.randn(2, 3, generator=g) for _ in range(3))
    assert torch.allclose(combine_guidance(a, b, c, GuidanceConfig(1.0, 1.0)), c, atol=1e-6)
    same = torch.randn(2, 3, generator=g)
    assert torch.allclose(combine_guidance(same, same, same, GuidanceConfig()), same)
    d = torch.randn(2, 3, generator=g)
    cfg = GuidanceConfig()
    base = combine_guidance(a, b, c, cfg)
    assert torch.allclose(combine_guidance(a, b, c + d, cfg) - base, cfg.text * d, atol=1e-5)
    assert torch.allclose(combine_guidance(a, b + d, c, cfg) - base, (cfg.image - cfg.text) * d, atol=1e-5)
    assert torch.allclose(combine_guidance(a + d, b, c, cfg) - base, (1 - cfg.image) * d, atol=1e-5)
    assert torch.equal(guided_epsilon(None, 0, lambda x, t: (a, b, c), cfg), base)
    assert (cfg.image, cfg.text) == (3.5, 7.5)
    with pytest.raises(ValueError):
        GuidanceConfig(float("nan"), 1.0)


def test_timestep_grid():
    grid = timestep_grid(200, 50)
    assert grid[0] == 200 and grid[-1] == 0 and len(grid) == 51
    assert all(a > b for a, b in zip(grid, grid[1:]))
    with pytest.raises(ValueError):
        timestep_grid(10, 11)


def oracle_eps(target):
    """Exact noise prediction for a point-mass data distribution at ``target``."""
    def fn(x, t):
        ab = SCHED.alpha_bar[t]
        return (x - math.sqrt(ab) * target) / math.sqrt(1 - ab)
    return fn


@pytest.mark.parametrize("mode", ["ancestral", "deterministic"])
def test_sampler_recovers_point_mass_and_is_reproducible(mode):
    target = torch.full((1, 3, 4, 4), 0.4)
    out = sample(oracle_eps(target), (2, 3, 4, 4), SCHED, 50, seed=[3, 4], mode=mode)
    assert torch.allclose(out, (target + 1) / 2, atol=1e-4)
    again = sample(oracle_eps(target), (2, 3, 4, 4), SCHED, 50, seed=[3, 4], mode=mode)
    assert torch.equal(out, again)


def test_per_sample_seeds_do_not_depend_on_batch():
    noisy = lambda x, t: torch.zeros_like(x)  # noqa: E731
    both = sample(noisy, (2, 3, 4, 4), SCHED, 10, seed=[5, 6])
    one = sample(noisy, (1, 3, 4, 4), SCHED, 10, seed=[6])
    assert torch.equal(both[1:], one)


def test_sampler_rejects_bad_mode_and_seed_count():
    with pytest.raises(ValueError):
        sample(lambda x, t: x, (1, 3, 2, 2), SCHED, 5, mode="ddpm")
    with pytest.raises(ValueError):
        sample(lambda x, t: x, (3, 3, 2, 2), SCHED, 5, seed=[1, 2])


def test_denoise_once_with_exact_eps_returns_input():
    x0 = torch.rand(1, 3, 4, 4) * 2 - 1
    eps = torch.randn(1, 3, 4, 4)
    xt = forward_noise(x0, 1, eps, SCHED)
    assert torch.allclose(denoise_once(lambda x, t: eps, xt, 1, SCHED), (x0 + 1) / 2, atol=1e-5)
