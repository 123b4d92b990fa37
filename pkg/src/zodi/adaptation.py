"""Segmentation training on source images paired with their transferred versions.

The objective is ``lam * L_sim + L_task`` where ``L_sim`` is one minus the
cosine similarity of pooled encoder features of an image and its transfer,
and ``L_task`` is the sum of the cross-entropies of both images against the
original class map.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .segmentation import SegModel

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.1


class DegenerateInputError(ValueError):
    """Cosine similarity is undefined for a zero feature vector."""


@dataclass
class LossBreakdown:
    task: float | torch.Tensor
    sim: float | torch.Tensor
    total: float | torch.Tensor
    lam: float

    def as_floats(self) -> "LossBreakdown":
        f = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)  # noqa: E731
        return LossBreakdown(f(self.task), f(self.sim), f(self.total), float(self.lam))

    def as_dict(self) -> dict:
        return asdict(self.as_floats())


def sim_loss(f1, f2) -> torch.Tensor:
    """``1 - cos(f1, f2)``; batched inputs ``(n, D)`` give the mean over rows."""
    f1, f2 = torch.as_tensor(f1), torch.as_tensor(f2)
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    n1, n2 = f1.norm(dim=-1), f2.norm(dim=-1)
    if (n1 == 0).any() or (n2 == 0).any():
        raise DegenerateInputError("zero feature vector: cosine similarity undefined")
    cos = (f1 * f2).sum(dim=-1) / (n1 * n2)
    return (1.0 - cos).mean()


def _ce(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, y)


def _check_labels(y, num_classes: int) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    if y.numel() and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"class index out of range [0, {num_classes})")
    return y


def _batch(x, like: SegModel) -> torch.Tensor:
    x = torch.as_tensor(x).to(next(like.parameters()).dtype)
    return x.unsqueeze(0) if x.dim() == 3 else x


def _terms(m: SegModel, image, image_gen, y):
    x, xg = _batch(image, m), _batch(image_gen, m)
    if x.shape != xg.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(xg.shape)}")
    y = _check_labels(y, m.config.num_classes)
    if y.dim() == 2:
        y = y.unsqueeze(0)
    feats, feats_g = m.encode(x), m.encode(xg)
    size = x.shape[-2:]
    task = _ce(m.decode(feats, size), y) + _ce(m.decode(feats_g, size), y)
    sim = sim_loss(feats[-1].mean(dim=(2, 3)), feats_g[-1].mean(dim=(2, 3)))
    return task, sim


def task_loss(m: SegModel, image, image_gen, y) -> torch.Tensor:
    """Pixel-averaged cross-entropy of both images against the original map ``y``."""
    x, xg = _batch(image, m), _batch(image_gen, m)
    if x.shape != xg.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(xg.shape)}")
    y = _check_labels(y, m.config.num_classes)
    if y.dim() == 2:
        y = y.unsqueeze(0)
    return _ce(m(x), y) + _ce(m(xg), y)


def zodi_loss(m: SegModel, image, image_gen, y, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    task, sim = _terms(m, image, image_gen, y)
    return LossBreakdown(task=task, sim=sim, total=lam * sim + task, lam=lam)


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    lr: float = 1e-2
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = DEFAULT_LAMBDA
    hflip: bool = True
    crop: tuple[int, int] | None = (24, 48)
    jitter: tuple[float, float, float] = (0.3, 0.3, 0.3)  # brightness, contrast, saturation
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("crop", "jitter"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SpatialAug:
    flip: bool
    top: int
    left: int
    height: int
    width: int

    def apply(self, a: torch.Tensor) -> torch.Tensor:
        """Crop then flip the trailing ``(h, w)`` axes of ``a``."""
        out = a[..., self.top : self.top + self.height, self.left : self.left + self.width]
        return out.flip(-1) if self.flip else out


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)

    def column(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


AugHook = Callable[[int, list[dict]], None]


def _draw_spatial(rng: np.random.Generator, h: int, w: int, cfg: TrainConfig) -> SpatialAug:
    ch, cw = cfg.crop if cfg.crop else (h, w)
    ch, cw = min(ch, h), min(cw, w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < 0.5) if cfg.hflip else False
    return SpatialAug(flip, top, left, ch, cw)


def color_jitter(x: torch.Tensor, factors: np.ndarray) -> torch.Tensor:
    """Brightness, contrast and saturation jitter of a ``[-1, 1]`` image."""
    b, c, s = (float(v) for v in factors)
    u = (x + 1.0) / 2.0 * b
    gray = u.mean(dim=0, keepdim=True)
    u = (u - gray.mean()) * c + gray.mean()
    gray = u.mean(dim=0, keepdim=True)
    u = gray + (u - gray) * s
    return u.clamp(0.0, 1.0) * 2.0 - 1.0


def _jitter_factors(rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    j = np.asarray(cfg.jitter, dtype=float)
    return 1.0 + rng.uniform(-j, j)


def poly_lr(base: float, it: int, max_it: int, power: float) -> float:
    return base * (1.0 - it / max_it) ** power


def train_zodi(m: SegModel, pairs, cfg: TrainConfig = TrainConfig(), hook: AugHook | None = None):
    """Train on ``(I, I_gen, y)`` triples with the combined objective.

    ``pairs`` is a sequence of transferred pairs (objects with ``source``,
    ``generated`` and ``layout``) or plain ``(I, I_gen, y)`` tuples. Each
    pair shares one crop/flip across ``I``, ``I_gen`` and ``y``; colour
    jitter is drawn separately for the two images. ``hook(step, records)``
    receives the augmentation actually applied to each array.
    """
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    images, gens, maps = _unpack(pairs)
    return _fit(m, images, gens, maps, cfg, hook)


def train_source_only(m: SegModel, samples, cfg: TrainConfig = TrainConfig(), hook: AugHook | None = None):
    """Baseline: the same loop where each image is paired with itself and ``lam = 0``.

    Every step therefore sees two independently jittered views of each
    source image and no similarity term, matching the adapted run's compute
    and augmentation.
    """
    if len(samples) == 0:
        raise ValueError("no training samples")
    images = np.stack([s.image for s in samples])
    maps = np.stack([s.layout for s in samples])
    cfg = TrainConfig(**{**asdict(cfg), "lam": 0.0})
    return _fit(m, images, images, maps, cfg, hook)


def _unpack(pairs):
    images, gens, maps = [], [], []
    for p in pairs:
        if isinstance(p, tuple):
            i, g, y = p
        else:
            i, g, y = p.source.image, p.generated, p.layout
        images.append(i)
        gens.append(g)
        maps.append(y)
    return np.stack(images), np.stack(gens), np.stack(maps)


def _fit(m: SegModel, images, gens, maps, cfg: TrainConfig, hook):
    n, _, h, w = images.shape
    images = torch.as_tensor(images, dtype=torch.float32)
    gens = torch.as_tensor(gens, dtype=torch.float32)
    maps = torch.as_tensor(maps, dtype=torch.long)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.SGD(m.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = -(-n // cfg.batch_size)
    max_it = cfg.epochs * steps_per_epoch
    history = TrainHistory()
    it = 0
    m.train()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xs, gs, ys, records = [], [], [], []
            for i in idx:
                aug = _draw_spatial(rng, h, w, cfg)
                jit_i, jit_g = _jitter_factors(rng, cfg), _jitter_factors(rng, cfg)
                xs.append(color_jitter(aug.apply(images[i]), jit_i))
                gs.append(color_jitter(aug.apply(gens[i]), jit_g))
                ys.append(aug.apply(maps[i]))
                if hook is not None:
                    records.append({"index": int(i), "image": aug, "generated": aug, "layout": aug,
                                    "jitter_image": jit_i, "jitter_generated": jit_g})
            if hook is not None:
                hook(it, records)
            for group in opt.param_groups:
                group["lr"] = poly_lr(cfg.lr, it, max_it, cfg.lr_power)
            loss = zodi_loss(m, torch.stack(xs), torch.stack(gs), torch.stack(ys), cfg.lam)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            it += 1
            sums += [loss.task.item() * len(idx), loss.sim.item() * len(idx), loss.total.item() * len(idx)]
        mean = sums / n
        history.epochs.append({"epoch": epoch, "task": mean[0], "sim": mean[1], "total": mean[2], "lam": cfg.lam})
        logger.debug("epoch %d task %.4f sim %.4f", epoch, mean[0], mean[1])
    m.eval()
    return m, history
