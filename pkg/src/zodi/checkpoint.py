"""Single-file model checkpoints.

Layout::

    ZODI-CKPT v1\\n
    <one-line JSON header>\\n
    <flat float32 little-endian parameter vector>

The header carries the model kind, its config, the init seed, the parameter
count, the SHA-256 of the payload and free-form ``extra`` metadata. Files are
byte-stable: the header is serialized with sorted keys and nothing depends
on wall-clock time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

MAGIC = b"ZODI-CKPT v1\n"


class CheckpointError(ValueError):
    """Unreadable, corrupt or mismatched checkpoint."""


def save_checkpoint(path, kind: str, model: torch.nn.Module, seed: int, extra: dict | None = None) -> str:
    """Write ``model``'s parameters and return the payload checksum."""
    flat = parameters_to_vector(model.parameters()).detach().to(torch.float32).numpy()
    payload = flat.astype("<f4").tobytes()
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "kind": kind,
        "config": asdict(model.config),
        "seed": int(seed),
        "num_params": int(flat.size),
        "sha256": digest,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return digest


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    """Return ``(header, flat_params)`` after verifying magic, size and checksum."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path} is not a zodi checkpoint")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: malformed header") from exc
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    flat = np.frombuffer(payload, dtype="<f4")
    if flat.size != header.get("num_params"):
        raise CheckpointError(f"{path}: expected {header.get('num_params')} params, found {flat.size}")
    return header, flat


def load_into(model: torch.nn.Module, flat: np.ndarray) -> torch.nn.Module:
    n = sum(p.numel() for p in model.parameters())
    if n != flat.size:
        raise CheckpointError(f"model has {n} parameters, checkpoint {flat.size}")
    vector_to_parameters(torch.from_numpy(flat.astype(np.float32)), model.parameters())
    return model


def load_denoiser(path):
    from .denoiser import DenoiserConfig, LayoutDenoiser

    header, flat = read_checkpoint(path)
    if header["kind"] != "denoiser":
        raise CheckpointError(f"{path} holds a {header['kind']!r}, not a denoiser")
    model = load_into(LayoutDenoiser(DenoiserConfig.from_dict(header["config"])), flat)
    model.trained_steps.fill_(int(header["extra"].get("trained_steps", 0)))
    return model.eval(), header


def load_segmenter(path):
    from .segmentation import SegConfig, SegModel

    header, flat = read_checkpoint(path)
    if header["kind"] != "segmenter":
        raise CheckpointError(f"{path} holds a {header['kind']!r}, not a segmenter")
    model = load_into(SegModel(SegConfig.from_dict(header["config"])), flat)
    return model.eval(), header
