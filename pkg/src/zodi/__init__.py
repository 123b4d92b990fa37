"""ZoDi at desk scale: zero-shot domain adaptation by layout-conditioned diffusion transfer.

The package builds a procedural driving world, pretrains a small
layout-conditioned diffusion model on it, transfers source-domain scenes to
unseen target domains with stochastic inversion, and adapts a segmenter on
the resulting image pairs with a feature-similarity loss.
"""

from .diffusion import NoiseSchedule, build_schedule, denoise_from, forward_noising, reverse_step
from .transfer import TransferConfig, strength_to_k, stochastic_inversion, transfer_dataset
from .world import CLASSES, DOMAINS, generate_spec, make_splits, render

__version__ = "0.1.0"

__all__ = [
    "CLASSES", "DOMAINS", "NoiseSchedule", "TransferConfig", "build_schedule", "denoise_from",
    "forward_noising", "generate_spec", "make_splits", "render", "reverse_step", "stochastic_inversion",
    "strength_to_k", "transfer_dataset",
]
