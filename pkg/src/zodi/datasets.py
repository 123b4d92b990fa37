"""On-disk transferred datasets and split manifests.

A transfer dataset directory holds::

    manifest.json          one entry per pair, see schemas/manifest.schema.json
    images/00000.png       generated image, 8-bit RGB
    maps/00000.npy         original class map (int64)

Source images are not copied: they are re-rendered from their seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .transfer import TransferConfig, TransferredPair
from .world import SceneSample, render_seed

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``(3, h, w)`` in ``[-1, 1]`` to ``(h, w, 3)`` bytes."""
    return np.round((np.clip(image, -1, 1).transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def write_transfer_dataset(root, pairs: list[TransferredPair], *, T: int, master_seed: int) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    cfg = pairs[0].config if pairs else None
    entries = []
    for i, p in enumerate(pairs):
        img_rel, map_rel = f"images/{i:05d}.png", f"maps/{i:05d}.npy"
        write_png(root / img_rel, p.generated)
        np.save(root / map_rel, np.ascontiguousarray(p.layout, dtype=np.int64))
        entries.append({
            "index": i,
            "source_id": int(p.source.seed),
            "source_domain": p.source.domain,
            "seed": int(master_seed),
            "image": img_rel,
            "layout": map_rel,
            "config": p.config.as_dict(),
        })
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "target_domain": cfg.target_domain if cfg else None,
        "variant": cfg.variant if cfg else None,
        "strength": cfg.strength if cfg else None,
        "k": cfg.k(T) if cfg else None,
        "T": T,
        "master_seed": int(master_seed),
        "count": len(entries),
        "pairs": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


@dataclass
class LoadedDataset:
    manifest: dict
    pairs: list[TransferredPair]


def read_transfer_dataset(root) -> LoadedDataset:
    """Load pairs; source images are re-rendered in their recorded source domain."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"no transfer dataset at {root} (manifest.json missing)")
    manifest = json.loads(mpath.read_text())
    pairs = []
    for e in manifest["pairs"]:
        with Image.open(root / e["image"]) as im:
            generated = from_uint8(np.asarray(im.convert("RGB")))
        layout = np.load(root / e["layout"])
        source = render_seed(e["source_id"], e["source_domain"])
        if not np.array_equal(source.layout, layout):
            raise DatasetError(f"pair {e['index']}: stored map differs from the source scene's map")
        cfg = TransferConfig(**{k: v for k, v in e["config"].items()})
        pairs.append(TransferredPair(source, generated, layout, cfg))
    return LoadedDataset(manifest, pairs)


def write_split_manifest(path, splits) -> None:
    c = splits.config
    doc = {
        "schema_version": MANIFEST_VERSION,
        "seed_ranges": splits.seed_ranges(),
        "source_domain": c.source_domain,
        "pretrain_domains": list(c.pretrain_domains),
        "target_domains": list(c.target_domains),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def sample_from_png(path, seed: int, domain: str) -> SceneSample:
    with Image.open(path) as im:
        image = from_uint8(np.asarray(im.convert("RGB")))
    return SceneSample(image, render_seed(seed, domain).layout, domain, seed)
