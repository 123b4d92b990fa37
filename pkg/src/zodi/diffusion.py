"""Variance-preserving noise schedules, closed-form noising and deterministic sampling.

Diffusion runs directly in pixel space. Latents are torch tensors of shape
``(c, h, w)`` or batches ``(n, c, h, w)``; the arithmetic helpers also accept
numpy arrays.

A noise predictor is any callable ``eps_fn(z, t, cond) -> eps`` where ``t``
is an integer timestep in ``1..T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

NoisePredictor = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alphas: np.ndarray
    sigmas: np.ndarray
    kind: str = "cosine"

    def check_t(self, t: int, name: str = "t") -> int:
        if not 0 <= int(t) <= self.T:
            raise ValueError(f"{name}={t} outside [0, {self.T}]")
        return int(t)


def build_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a VP schedule with ``alphas[t]**2 + sigmas[t]**2 == 1``.

    ``cosine`` follows the squared-cosine cumulative profile with offset
    0.008; ``linear`` uses linearly spaced per-step variances rescaled to the
    step count. Per-step variances are clipped at 0.999 so ``alphas[T] > 0``.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = 1.0 - f[1:] / f[:-1]
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, scale * 0.02, T, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.clip(betas, 1e-8, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alphas = np.sqrt(alpha_bar)
    sigmas = np.sqrt(1.0 - alpha_bar)
    sigmas[0] = 0.0
    return NoiseSchedule(T=T, alphas=alphas, sigmas=sigmas, kind=kind)


def forward_noising(z0, t: int, eps, sched: NoiseSchedule):
    """Return ``alpha_t * z0 + sigma_t * eps``."""
    t = sched.check_t(t)
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    return sched.alphas[t] * z0 + sched.sigmas[t] * eps


def reverse_step(z_t, eps_pred, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic DDIM update from ``t`` to ``t_prev`` given a noise estimate."""
    t = sched.check_t(t)
    t_prev = sched.check_t(t_prev, "t_prev")
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    z0_hat = (z_t - sched.sigmas[t] * eps_pred) / sched.alphas[t]
    return sched.alphas[t_prev] * z0_hat + sched.sigmas[t_prev] * eps_pred


def timestep_path(k: int, steps: int) -> list[int]:
    """Uniformly spaced, strictly decreasing timesteps from ``k`` down to 0."""
    if k <= 0:
        return [0]
    n = max(1, min(int(steps), k))
    path = np.unique(np.round(np.linspace(0, k, n + 1)).astype(int))[::-1]
    return [int(x) for x in path]


@torch.no_grad()
def denoise_from(z_k, k: int, denoiser: NoisePredictor, cond, sched: NoiseSchedule, steps: int | None = None):
    """Run the deterministic reverse chain from timestep ``k`` to 0."""
    k = sched.check_t(k, "k")
    if steps is not None and steps < 1:
        raise ValueError("steps must be >= 1")
    if k == 0:
        return z_k
    if steps is None:
        steps = k
    path = timestep_path(k, steps)
    z = z_k
    for t, t_prev in zip(path[:-1], path[1:]):
        z = reverse_step(z, denoiser(z, t, cond), t, t_prev, sched)
    return z


def sample_timesteps(n: int, sched: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(1, sched.T + 1, (n,), generator=generator)


def denoiser_loss(denoiser: NoisePredictor, z0: torch.Tensor, cond, sched: NoiseSchedule,
                  generator: torch.Generator) -> torch.Tensor:
    """Mean squared error between drawn noise and its prediction.

    ``z0`` may be a single latent or a batch; for a batch every element gets
    its own timestep drawn uniformly from ``1..T``. Returns a scalar tensor
    that carries gradients to the predictor's parameters.
    """
    batched = z0.dim() == 4
    zb = z0 if batched else z0.unsqueeze(0)
    t = sample_timesteps(zb.shape[0], sched, generator)
    eps = torch.randn(zb.shape, generator=generator, dtype=zb.dtype)
    alphas = torch.as_tensor(sched.alphas, dtype=zb.dtype)[t].view(-1, 1, 1, 1)
    sigmas = torch.as_tensor(sched.sigmas, dtype=zb.dtype)[t].view(-1, 1, 1, 1)
    z_t = alphas * zb + sigmas * eps
    if batched:
        pred = denoiser(z_t, t, cond)
    else:
        pred = denoiser(z_t[0], int(t[0]), cond).unsqueeze(0)
    return ((eps - pred) ** 2).mean()
