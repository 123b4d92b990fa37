"""Pipeline stages: pretrain the denoiser, transfer, adapt, evaluate.

Each stage is a plain function of a :class:`~zodi.config.RunConfig` and its
inputs so that the CLI and the test-suite run exactly the same code.
"""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .adaptation import TrainConfig, TrainHistory, train_source_only, train_zodi
from .config import RunConfig
from .denoiser import LayoutDenoiser, init_denoiser, pretrain
from .diffusion import NoiseSchedule, build_schedule
from .segmentation import SegModel, init_segmodel, miou, predict_map
from .transfer import TransferConfig, TransferredPair, transfer_dataset
from .world import NUM_CLASSES, SceneSample, Splits, make_splits

logger = logging.getLogger(__name__)

MODES = ("source_only", "zodi", "zodi_no_sim")


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    return build_schedule(cfg.schedule.T, cfg.schedule.kind)


def build_splits(cfg: RunConfig, include_eval: bool = True) -> Splits:
    return make_splits(cfg.world, include_eval=include_eval)


def pretrain_denoiser(cfg: RunConfig, corpus: list[SceneSample]) -> tuple[LayoutDenoiser, list[float]]:
    den = init_denoiser(cfg.denoiser, seed=cfg.seed)
    pcfg = replace(cfg.pretrain, seed=cfg.seed)
    return pretrain(den, corpus, schedule_for(cfg), pcfg)


def transfer_config(cfg: RunConfig, domain: str, variant: str = "zodi", strength: float | None = None) -> TransferConfig:
    return TransferConfig(
        target_domain=domain,
        strength=cfg.strength(domain) if strength is None else strength,
        variant=variant,
        steps=cfg.transfer.steps,
        inversion_domain=cfg.transfer.inversion_domain,
        batch_size=cfg.transfer.batch_size,
    )


def transfer_split(cfg: RunConfig, den, samples, domain: str, variant: str = "zodi",
                   strength: float | None = None, master_seed: int | None = None) -> list[TransferredPair]:
    tcfg = transfer_config(cfg, domain, variant, strength)
    seed = cfg.seed if master_seed is None else master_seed
    return transfer_dataset(samples, tcfg, den, schedule_for(cfg), seed)


def trainer_config(cfg: RunConfig, mode: str, trial: int) -> TrainConfig:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    lam = cfg.trainer.lam if mode == "zodi" else 0.0
    return replace(cfg.trainer, seed=int(trial), lam=lam)


def train_run(cfg: RunConfig, mode: str, trial: int, *, pairs=None, samples=None,
              hook=None) -> tuple[SegModel, TrainHistory]:
    """Train one segmenter for ``trial``.

    ``source_only`` needs ``samples``; the two adapted modes need ``pairs``.
    """
    tcfg = trainer_config(cfg, mode, trial)
    model = init_segmodel(cfg.segmenter, seed=int(trial))
    if mode == "source_only":
        if samples is None:
            raise ValueError("source_only training needs source samples")
        return train_source_only(model, samples, tcfg, hook)
    if pairs is None:
        raise ValueError(f"{mode} training needs transferred pairs")
    return train_zodi(model, pairs, tcfg, hook)


def evaluate(model: SegModel, eval_sets: dict[str, list[SceneSample]]) -> dict[str, float]:
    out = {}
    for domain, samples in eval_sets.items():
        preds = predict_map(model, np.stack([s.image for s in samples]))
        out[domain] = miou(preds, [s.layout for s in samples], model.config.num_classes)
    return out


def train_oracle_segmenter(cfg: RunConfig, corpus: list[SceneSample], seed: int = 0,
                           epochs: int | None = None) -> SegModel:
    """Segmenter trained on the multi-domain pretraining corpus.

    Used only as a measuring device for how well a transfer keeps its layout.
    """
    tcfg = replace(cfg.trainer, seed=seed, lam=0.0, epochs=epochs or cfg.trainer.epochs)
    model, _ = train_source_only(init_segmodel(cfg.segmenter, seed=seed), corpus, tcfg)
    return model


def layout_consistency(oracle: SegModel, pairs: list[TransferredPair]) -> float:
    """mIoU of the oracle's reading of generated images against the source maps."""
    preds = predict_map(oracle, np.stack([p.generated for p in pairs]))
    return miou(preds, [p.layout for p in pairs], NUM_CLASSES)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
