"""Layout-conditioned noise predictor.

A small U-Net that predicts the noise in ``z_t`` given the timestep, a
domain id (a learned ``d``-dimensional embedding standing in for the text
prompt "driving <domain>") and a segmentation layout injected as one-hot
channels concatenated to the input.

Internally the network outputs the velocity ``v = alpha_t eps - sigma_t z0``
and converts it to a noise estimate with ``eps = sigma_t z_t + alpha_t v``.
The conversion is exact for variance-preserving schedules and keeps the
implied clean-image estimate bounded when ``alpha_t`` is close to zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule, build_schedule, denoiser_loss

logger = logging.getLogger(__name__)


class UnusableModelError(RuntimeError):
    """The model cannot be used for generation (e.g. it was never trained)."""


@dataclass(frozen=True)
class DenoiserConfig:
    channels: tuple[int, ...] = (32, 64)
    patch: int = 2
    embed_dim: int = 16
    num_domains: int = 6
    num_classes: int = 5
    image_channels: int = 3
    T: int = 50
    schedule: str = "cosine"
    groups: int = 8

    def validate(self) -> None:
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError(f"channels must be positive, got {self.channels}")
        if any(c % self.groups for c in self.channels):
            raise ValueError(f"every channel width must be divisible by groups={self.groups}")
        for name in ("embed_dim", "num_domains", "num_classes", "image_channels", "T", "patch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class Conditioning:
    """Domain id and layout that steer a noise prediction.

    ``domain_id`` is an int or a per-batch sequence of ints; ``layout`` is an
    ``(h, w)`` or ``(n, h, w)`` integer class map. With ``use_layout=False``
    the layout channels are zeroed.
    """

    domain_id: int | Sequence[int]
    layout: np.ndarray | torch.Tensor
    use_layout: bool = True


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, c_out)
        self.emb = nn.Linear(emb, 2 * c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, e):
        scale, shift = self.emb(e)[:, :, None, None].chunk(2, dim=1)
        h = F.silu(self.norm1(self.conv1(x)) * (1 + scale) + shift)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class LayoutDenoiser(nn.Module):
    """U-Net noise predictor ``eps(z_t, t, domain, layout)``.

    Calling the module with ``(z, t, cond)`` follows the noise-predictor
    protocol of :mod:`zodi.diffusion`; use :func:`predict_noise` for
    validated, gradient-free inference.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        c, e = config.channels, config.embed_dim
        self.register_buffer("time_table", _sinusoidal_table(config.T, e))
        self.domain_embed = nn.Embedding(config.num_domains, e)
        sched = build_schedule(config.T, config.schedule)
        self.register_buffer("alphas", torch.as_tensor(sched.alphas, dtype=torch.float32))
        self.register_buffer("sigmas", torch.as_tensor(sched.sigmas, dtype=torch.float32))
        emb = 2 * e
        self.emb_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))

        p2 = config.patch**2
        self.stem = nn.Conv2d((config.image_channels + config.num_classes) * p2, c[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.pool = nn.ModuleList()
        prev = c[0]
        for i, ch in enumerate(c):
            if i > 0:
                self.pool.append(nn.Conv2d(prev, prev, 3, stride=2, padding=1))
            self.down.append(_Block(prev, ch, emb, config.groups))
            prev = ch
        self.up = nn.ModuleList()
        for ch in reversed(c[:-1]):
            self.up.append(_Block(prev + ch, ch, emb, config.groups))
            prev = ch
        self.head = nn.Conv2d(c[0], config.image_channels * p2, 3, padding=1)
        # count of optimizer steps taken; 0 marks an untrained model
        self.register_buffer("trained_steps", torch.zeros((), dtype=torch.int64))

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _inputs(self, z: torch.Tensor, t, cond: Conditioning):
        n = z.shape[0]
        layout = torch.as_tensor(np.asarray(cond.layout), dtype=torch.long)
        if layout.dim() == 2:
            layout = layout.expand(n, *layout.shape)
        if tuple(layout.shape[1:]) != tuple(z.shape[2:]):
            raise ValueError(f"layout shape {tuple(layout.shape[1:])} != image shape {tuple(z.shape[2:])}")
        if cond.use_layout:
            onehot = F.one_hot(layout, self.config.num_classes).permute(0, 3, 1, 2).to(z.dtype)
        else:
            onehot = z.new_zeros(n, self.config.num_classes, *z.shape[2:])
        dom = torch.as_tensor(np.asarray(cond.domain_id), dtype=torch.long).reshape(-1).expand(n)
        if (dom < 0).any() or (dom >= self.config.num_domains).any():
            raise ValueError(f"unknown domain id in {dom.tolist()}")
        tt = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(n)
        return torch.cat([z, onehot], dim=1), tt, dom

    def forward(self, z: torch.Tensor, t, cond: Conditioning) -> torch.Tensor:
        single = z.dim() == 3
        if single:
            z = z.unsqueeze(0)
        x, tt, dom = self._inputs(z, t, cond)
        e = self.emb_mlp(torch.cat([self.time_table[tt], self.domain_embed(dom)], dim=1).to(z.dtype))

        # 2x2 pixel blocks are folded into channels; the net runs at reduced resolution
        h = self.stem(F.pixel_unshuffle(x, self.config.patch))
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                skips.append(h)
                h = self.pool[i - 1](h)
            h = block(h, e)
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), e)
        v = F.pixel_shuffle(self.head(h), self.config.patch)
        a = self.alphas[tt].to(z.dtype).view(-1, 1, 1, 1)
        sg = self.sigmas[tt].to(z.dtype).view(-1, 1, 1, 1)
        eps = sg * z + a * v
        return eps[0] if single else eps


def _sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    t = torch.arange(T + 1, dtype=torch.float64)[:, None] / T
    freqs = torch.exp(torch.linspace(0.0, math.log(200.0), dim // 2, dtype=torch.float64))
    table = torch.cat([torch.sin(t * freqs), torch.cos(t * freqs)], dim=1)
    return F.pad(table, (0, dim - table.shape[1])).float()


def init_denoiser(config: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> LayoutDenoiser:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = LayoutDenoiser(config)
    return model


@torch.no_grad()
def predict_noise(den: LayoutDenoiser, z: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
    if not 1 <= int(t) <= den.config.T:
        raise ValueError(f"t={t} outside [1, {den.config.T}]")
    was_training = den.training
    den.eval()
    try:
        return den(z, int(t), cond)
    finally:
        den.train(was_training)


def as_batch(samples) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """Stack scene samples into ``(images, layouts, domain_ids)``."""
    from .world import domain_index

    images = torch.from_numpy(np.stack([s.image for s in samples]))
    layouts = np.stack([s.layout for s in samples])
    domains = np.array([domain_index(s.domain) for s in samples])
    return images, layouts, domains


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**d)


def pretrain(den: LayoutDenoiser, corpus, sched: NoiseSchedule, cfg: PretrainConfig = PretrainConfig()):
    """Fit ``den`` to the corpus with the layout-conditioned denoising objective.

    One epoch is a pass over a seeded permutation of the corpus in batches of
    ``cfg.batch_size``; AdamW with cosine learning-rate decay. Returns the
    model and the mean loss of every epoch.
    """
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if sched.T != den.config.T or sched.kind != den.config.schedule:
        raise ValueError(
            f"schedule ({sched.kind}, T={sched.T}) does not match the denoiser's "
            f"({den.config.schedule}, T={den.config.T})"
        )
    images, layouts, domains = as_batch(corpus)
    n = len(corpus)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(den.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total, 1), eta_min=cfg.lr * 0.05)

    losses: list[float] = []
    den.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen).numpy()
        running = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            cond = Conditioning(domain_id=domains[idx], layout=layouts[idx])
            loss = denoiser_loss(den, images[idx], cond, sched, gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            lr_sched.step()
            den.trained_steps += 1
            running += loss.item() * len(idx)
        losses.append(running / n)
        logger.info("pretrain epoch %d loss %.4f", epoch, losses[-1])
    den.eval()
    return den, losses
