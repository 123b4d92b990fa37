"""Toy segmentation network (encoder ``F`` + decoder ``H``) and the mIoU metric."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class SegConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 5
    in_channels: int = 3
    kernel_size: int = 3
    decoder_width: int = 32
    skip: bool = True
    bias: bool = True

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def validate(self) -> None:
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.skip and len(self.widths) < 2:
            raise ValueError("skip connection needs at least two encoder stages")

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


class SegModel(nn.Module):
    """Strided convolutional encoder with a bilinear-upsampling decoder.

    ``encode`` is the feature extractor F and returns every stage's output;
    ``decode`` is H and maps those features to per-class logits at the input
    resolution. The decoder reads the first-stage map through a skip
    connection when ``config.skip`` is set.
    """

    def __init__(self, config: SegConfig):
        super().__init__()
        config.validate()
        self.config = config
        k, b = config.kernel_size, config.bias
        stages = []
        prev = config.in_channels
        for w in config.widths:
            stages.append(nn.Conv2d(prev, w, k, stride=2, padding=k // 2, bias=b))
            prev = w
        self.encoder = nn.ModuleList(stages)

        c = config.widths[-1]
        if config.decoder_width:
            self.dec_reduce = nn.Conv2d(c, config.decoder_width, 1, bias=b)
            fuse_in = config.decoder_width + (config.widths[0] if config.skip else 0)
            self.dec_fuse = nn.Conv2d(fuse_in, config.decoder_width, k, padding=k // 2, bias=b)
            c = config.decoder_width
        else:
            self.dec_reduce = self.dec_fuse = None
        self.classifier = nn.Conv2d(c, config.num_classes, 1, bias=b)

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.encoder:
            h = F.silu(conv(h))
            feats.append(h)
        return feats

    def decode(self, feats: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        h = feats[-1]
        if self.dec_reduce is not None:
            h = F.silu(self.dec_reduce(h))
            if self.config.skip:
                h = F.interpolate(h, size=feats[0].shape[2:], mode="bilinear", align_corners=False)
                h = torch.cat([h, feats[0]], dim=1)
            h = F.silu(self.dec_fuse(h))
        return F.interpolate(self.classifier(h), size=size, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x), x.shape[-2:])

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled final encoder map, shape ``(n, D)``."""
        return self.encode(x)[-1].mean(dim=(2, 3))


def init_segmodel(config: SegConfig = SegConfig(), seed: int = 0) -> SegModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegModel(config)
    return model


def _as_image_batch(m: SegModel, image) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(image)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != m.config.in_channels:
        raise ValueError(f"expected image(s) with {m.config.in_channels} channels, got shape {tuple(x.shape)}")
    return x.to(next(m.parameters()).dtype), single


@torch.no_grad()
def extract_features(m: SegModel, image) -> torch.Tensor:
    x, single = _as_image_batch(m, image)
    f = m.pooled(x)
    return f[0] if single else f


def argmax_lowest(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Argmax that resolves exact ties toward the lowest index."""
    # torch.argmax does not document its tie rule; make it explicit
    best = logits.max(dim=dim, keepdim=True).values
    idx = torch.arange(logits.shape[dim]).view([-1 if d == dim else 1 for d in range(logits.dim())])
    cand = torch.where(logits == best, idx, torch.full_like(idx, logits.shape[dim]))
    return cand.min(dim=dim).values


@torch.no_grad()
def predict_map(m: SegModel, image, batch_size: int = 256) -> np.ndarray:
    x, single = _as_image_batch(m, image)
    was_training = m.training
    m.eval()
    try:
        out = [argmax_lowest(m(x[i : i + batch_size])) for i in range(0, x.shape[0], batch_size)]
    finally:
        m.train(was_training)
    maps = torch.cat(out).numpy()
    return maps[0] if single else maps


def confusion_matrix(preds, gts, num_classes: int) -> np.ndarray:
    """Global ``(gt, pred)`` pixel counts accumulated over all maps."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if len(preds) == 0:
        raise ValueError("mIoU of an empty list is undefined")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= num_classes):
            raise ValueError("class index out of range")
        cm += np.bincount(g.ravel() * num_classes + p.ravel(), minlength=num_classes**2).reshape(
            num_classes, num_classes
        )
    return cm


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where a class is absent from both prediction and truth."""
    tp = np.diag(cm).astype(float)
    denom = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(preds, gts, num_classes: int) -> float:
    """Mean IoU over classes present in prediction or truth.

    Accumulated in exact rationals and rounded once, so the result does not
    depend on summation order.
    """
    cm = confusion_matrix(preds, gts, num_classes)
    tp = np.diag(cm)
    denom = cm.sum(0) + cm.sum(1) - tp
    ious = [Fraction(int(a), int(b)) for a, b in zip(tp, denom) if b > 0]
    return float(sum(ious) / len(ious))
