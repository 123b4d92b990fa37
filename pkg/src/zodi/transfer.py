"""Zero-shot image transfer: stochastic inversion followed by layout-guided denoising.

Variants (the ablations):

``zodi``
    stochastic inversion, layout conditioning on.
``no_si``
    fresh Gaussian noise, layout conditioning on.
``inst``
    stochastic inversion, layout conditioning off.
``sdedit``
    fresh Gaussian noise, layout conditioning off.

All variants denoise toward the target domain id.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import partial

import numpy as np
import torch

from .denoiser import Conditioning, LayoutDenoiser, UnusableModelError, predict_noise
from .diffusion import NoiseSchedule, denoise_from, forward_noising
from .world import SceneSample, domain_index

logger = logging.getLogger(__name__)

VARIANTS = ("zodi", "no_si", "inst", "sdedit")
DEFAULT_STRENGTH = {"night": 0.9, "snow": 0.65, "rain": 0.65, "fog": 0.6, "game": 0.6}


def strength_to_k(T: int, S: float) -> int:
    """Number of noising steps ``floor(T * S)``.

    ``S`` is read through its shortest decimal form so that e.g. ``S=0.29``
    with ``T=100`` gives 29 rather than the 28 binary rounding would yield.
    """
    if not 0.0 <= S <= 1.0 or math.isnan(S):
        raise ValueError(f"strength must lie in [0, 1], got {S}")
    return math.floor(Fraction(repr(float(S))) * int(T))


@dataclass(frozen=True)
class TransferConfig:
    target_domain: str
    strength: float | None = None
    variant: str = "zodi"
    steps: int | None = None  # reverse steps; None means one per noising step
    inversion_domain: str = "target"  # "target" or "source": prompt used for the inversion query
    batch_size: int = 64

    def __post_init__(self):
        domain_index(self.target_domain)
        if self.strength is None:
            object.__setattr__(self, "strength", DEFAULT_STRENGTH.get(self.target_domain, 0.6))
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.inversion_domain not in ("target", "source"):
            raise ValueError("inversion_domain must be 'target' or 'source'")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")

    def k(self, T: int) -> int:
        return strength_to_k(T, self.strength)

    @property
    def uses_layout(self) -> bool:
        return self.variant in ("zodi", "no_si")

    @property
    def uses_inversion(self) -> bool:
        return self.variant in ("zodi", "inst")

    def as_dict(self) -> dict:
        return {
            "target_domain": self.target_domain,
            "strength": self.strength,
            "variant": self.variant,
            "steps": self.steps,
            "inversion_domain": self.inversion_domain,
        }


@dataclass
class TransferredPair:
    source: SceneSample
    generated: np.ndarray
    layout: np.ndarray
    config: TransferConfig


def _noise_fn(den):
    if isinstance(den, LayoutDenoiser):
        if int(den.trained_steps) == 0:
            raise UnusableModelError("denoiser has never been trained; refusing to transfer with it")
        return partial(predict_noise, den)
    return den


def stochastic_inversion(z0: torch.Tensor, k: int, den, cond: Conditioning, sched: NoiseSchedule,
                         generator: torch.Generator | None = None, eps: torch.Tensor | None = None):
    """Replace the injected noise by the model's own estimate of it.

    Draws ``eps`` (unless given), forms ``z_k = a_k z0 + s_k eps``, asks the
    model for ``eps_k`` at ``(z_k, k)`` and returns ``a_k z0 + s_k eps_k``.
    """
    k = sched.check_t(k, "k")
    if k == 0:
        raise ValueError("stochastic inversion needs k >= 1; k = 0 is the identity transfer")
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_k = forward_noising(z0, k, eps, sched)
    eps_k = _noise_fn(den)(z_k, k, cond)
    return forward_noising(z0, k, eps_k, sched)


def _item_generator(master_seed: int, item_seed: int) -> torch.Generator:
    state = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, int(item_seed) & 0xFFFFFFFF]).generate_state(2)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _transfer_batch(samples, cfg: TransferConfig, den, sched: NoiseSchedule, generators) -> list[np.ndarray]:
    k = cfg.k(sched.T)
    if k == 0:
        return [s.image.copy() for s in samples]
    eps_fn = _noise_fn(den)
    z0 = torch.from_numpy(np.stack([s.image for s in samples]))
    eps = torch.stack([torch.randn(z0.shape[1:], generator=g, dtype=z0.dtype) for g in generators])
    layouts = np.stack([s.layout for s in samples])
    target = domain_index(cfg.target_domain)
    cond = Conditioning(domain_id=target, layout=layouts, use_layout=cfg.uses_layout)
    if cfg.uses_inversion:
        inv_dom = target if cfg.inversion_domain == "target" else [domain_index(s.domain) for s in samples]
        inv_cond = replace(cond, domain_id=inv_dom)
        z_k = stochastic_inversion(z0, k, eps_fn, inv_cond, sched, eps=eps)
    else:
        z_k = forward_noising(z0, k, eps, sched)
    out = denoise_from(z_k, k, eps_fn, cond, sched, steps=cfg.steps or k)
    return list(out.clamp(-1.0, 1.0).numpy())


def transfer_image(sample: SceneSample, cfg: TransferConfig, den, sched: NoiseSchedule,
                   generator: torch.Generator) -> TransferredPair:
    """Transfer one scene to ``cfg.target_domain`` keeping its class map as annotation."""
    (generated,) = _transfer_batch([sample], cfg, den, sched, [generator])
    return TransferredPair(sample, generated, sample.layout.copy(), cfg)


def transfer_dataset(samples, cfg: TransferConfig, den, sched: NoiseSchedule, master_seed: int) -> list[TransferredPair]:
    """One-to-one transfer of ``samples``, order preserving.

    Item ``i`` draws its noise from a generator seeded by
    ``(master_seed, samples[i].seed)``. Items are batched in ascending seed
    order regardless of input order, so every generated image is
    byte-identical under any permutation of the input.
    """
    samples = list(samples)
    if not samples:
        return []
    shape = samples[0].image.shape
    if any(s.image.shape != shape for s in samples):
        raise ValueError("all samples must share one image shape")
    _noise_fn(den)
    order = sorted(range(len(samples)), key=lambda i: (samples[i].seed, i))
    generated: dict[int, np.ndarray] = {}
    for start in range(0, len(order), cfg.batch_size):
        chunk = order[start : start + cfg.batch_size]
        try:
            gens = [_item_generator(master_seed, samples[i].seed) for i in chunk]
            outs = _transfer_batch([samples[i] for i in chunk], cfg, den, sched, gens)
        except Exception as exc:
            # rerun the batch item by item to name the culprit
            for i in chunk:
                try:
                    _transfer_batch([samples[i]], cfg, den, sched, [_item_generator(master_seed, samples[i].seed)])
                except Exception as item_exc:
                    raise RuntimeError(f"transfer failed on item {i} (seed {samples[i].seed}): {item_exc}") from item_exc
            raise RuntimeError(f"transfer failed in batch starting at item {chunk[0]}: {exc}") from exc
        generated.update(zip(chunk, outs))
        logger.debug("transferred %d/%d", len(generated), len(samples))
    return [TransferredPair(s, generated[i], s.layout.copy(), cfg) for i, s in enumerate(samples)]
