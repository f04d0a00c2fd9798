"""Noise schedule, corruption, masked loss, dual guidance and the reverse sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine cumulative schedule; ``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] = 1``."""

    T: int
    alpha_bar: np.ndarray
    w: np.ndarray

    @classmethod
    def cosine(cls, T: int = 200, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f(t) / f(t - 1), max_beta) for t in range(1, T + 1)])
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(T, ab, np.ones(T + 1))

    def __post_init__(self):
        ab = self.alpha_bar
        if len(ab) != self.T + 1 or ab[0] != 1.0:
            raise ValueError("alpha_bar must have T+1 entries starting at 1")
        if not np.all(np.diff(ab) < 0) or ab[-1] >= 0.01:
            raise ValueError("alpha_bar must decrease strictly to below 0.01")

    def ab(self, t) -> torch.Tensor:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        return torch.as_tensor(self.alpha_bar[t], dtype=torch.get_default_dtype())


@dataclass(frozen=True)
class GuidanceConfig:
    image: float = 3.5
    text: float = 7.5

    def __post_init__(self):
        if not (math.isfinite(self.image) and math.isfinite(self.text)):
            raise ValueError("guidance scales must be finite")


def _per_sample(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return v.reshape(-1, *([1] * (x.dim() - 1))) if v.dim() else v


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = _per_sample(sched.ab(t), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def masked_loss(eps: torch.Tensor, eps_pred: torch.Tensor, mask: torch.Tensor, w_t=1.0) -> torch.Tensor:
    """Weighted mean squared error over the masked positions.

    ``mask`` is (B, 1, H, W) or (B, H, W) and broadcasts over channels; the
    mean is per element so an all-ones mask reproduces the plain MSE.
    """
    if eps.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    if mask.dim() == eps.dim() - 1:
        mask = mask.unsqueeze(1)
    m = mask.to(eps.dtype).expand_as(eps)
    denom = m.sum()
    if denom == 0:
        return eps.new_zeros(())
    w = torch.as_tensor(w_t, dtype=eps.dtype)
    if w.dim():
        w = _per_sample(w, eps)
    sq = torch.where(m > 0, (eps - eps_pred) ** 2, torch.zeros_like(eps))
    return (w * m * sq).sum() / denom


def biased_timestep(rng: np.random.Generator, sched: NoiseSchedule, size=None):
    """t = ceil(T sqrt(u)), u ~ U(0, 1]: p(t) grows linearly with t."""
    u = 1.0 - rng.random(size)
    return np.clip(np.ceil(sched.T * np.sqrt(u)), 1, sched.T).astype(np.int64)


def combine_guidance(e_none, e_image, e_full, g: GuidanceConfig):
    """e(0,0) + lI (e(I,0) - e(0,0)) + lc (e(I,c) - e(I,0))."""
    return e_none + g.image * (e_image - e_none) + g.text * (e_full - e_image)


def guided_epsilon(x_t, t, model: Callable, g: GuidanceConfig):
    """``model(x_t, t)`` returns the three branch predictions (none, image, image+text)."""
    e_none, e_image, e_full = model(x_t, t)
    return combine_guidance(e_none, e_image, e_full, g)


def timestep_grid(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ValueError(f"need 1 <= steps <= T={T}, got {steps}")
    return [int(round(v)) for v in np.linspace(T, 0, steps + 1)]


@torch.no_grad()
def sample(eps_fn: EpsFn, shape, sched: NoiseSchedule, steps: int = 50, seed: int | list[int] = 0,
           mode: str = "ancestral", x_T: torch.Tensor | None = None) -> torch.Tensor:
    """Reverse process from pure noise; returns images in [0, 1].

    ``ancestral`` re-injects noise at every step (eta = 1); ``deterministic``
    drops it (eta = 0). The clean estimate is clipped to [-1, 1] each step.
    A list of seeds gives each batch element its own noise stream, so a
    sample does not depend on what else is in the batch.
    """
    if mode not in ("ancestral", "deterministic"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    eta = 1.0 if mode == "ancestral" else 0.0
    seeds = [seed] if isinstance(seed, int) else list(seed)
    if len(seeds) not in (1, shape[0]):
        raise ValueError(f"{len(seeds)} seeds for a batch of {shape[0]}")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]

    def noise():
        if len(gens) == 1:
            return torch.randn(shape, generator=gens[0])
        return torch.cat([torch.randn((1, *shape[1:]), generator=g) for g in gens])

    x = noise() if x_T is None else x_T.clone()
    grid = timestep_grid(sched.T, steps)
    for t, s in zip(grid[:-1], grid[1:]):
        ab_t, ab_s = float(sched.alpha_bar[t]), float(sched.alpha_bar[s])
        eps = eps_fn(x, t)
        x0 = ((x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)).clamp(-1, 1)
        if s == 0:
            x = x0
            break
        eps = (x - math.sqrt(ab_t) * x0) / math.sqrt(1 - ab_t)
        sigma = eta * math.sqrt((1 - ab_s) / (1 - ab_t) * (1 - ab_t / ab_s))
        x = math.sqrt(ab_s) * x0 + math.sqrt(max(1 - ab_s - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * noise()
    return ((x + 1) / 2).clamp(0, 1)


def denoise_once(eps_fn: EpsFn, x_t: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Single clean-image estimate in [0, 1] from ``x_t``."""
    ab = float(sched.alpha_bar[t])
    x0 = (x_t - math.sqrt(1 - ab) * eps_fn(x_t, t)) / math.sqrt(ab)
    return ((x0.clamp(-1, 1) + 1) / 2)
