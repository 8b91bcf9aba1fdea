"""On-disk paired dataset: generation and loading.

Layout::

    root/manifest.json
    root/{train,test}/visible/<id>.png      8-bit RGB
    root/{train,test}/infrared/<id>.png     8-bit grayscale
    root/{train,test}/annotations/<id>.json
    root/{train,test}/band/<id>.txt         near | mid | long
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import AnnotationSet, annotate_oracle, load_annotation_set, save_annotation_set
from .errors import ConfigurationError, GenerationError
from .io import atomic_write_text, read_png, write_png
from .scene import BANDS, DEFAULT_TABLE, EmissivityTable, GeneratorConfig, render_infrared, render_visible, sample_scene

GENERATOR_VERSION = "vis2ir-synth-1"
SPLITS = ("train", "test")


@dataclass
class PairedSample:
    visible: np.ndarray  # H x W x 3
    infrared: np.ndarray  # H x W x 1
    band: str
    annotations: AnnotationSet
    sample_id: str

    def __post_init__(self):
        if self.visible.shape[:2] != self.infrared.shape[:2]:
            raise ValueError(f"{self.sample_id}: visible and infrared sizes differ")
        if self.band not in BANDS:
            raise ValueError(f"{self.sample_id}: unknown band {self.band!r}")


def sample_seeds(dataset_seed: int, split: str, index: int) -> tuple:
    """(scene_seed, noise_seed) for one sample, independent of generation order."""
    ss = np.random.SeedSequence([int(dataset_seed), SPLITS.index(split), int(index)])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def allocate_bands(bands: dict, n: int, dataset_seed: int, split: str) -> list:
    """Split ``n`` samples across bands by largest remainder, then shuffle."""
    names = [b for b in BANDS if b in bands]
    w = np.array([float(bands[b]) for b in names])
    if (w < 0).any() or w.sum() <= 0:
        raise ConfigurationError("band proportions must be non-negative with a positive sum")
    exact = w / w.sum() * n
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    out = [b for b, c in zip(names, counts) for _ in range(c)]
    rng = np.random.default_rng([int(dataset_seed), SPLITS.index(split), 7919])
    rng.shuffle(out)
    return out


def make_sample(cfg: GeneratorConfig, split: str, index: int, band: str,
                table: EmissivityTable) -> tuple:
    scene_seed, noise_seed = sample_seeds(cfg.seed, split, index)
    spec = sample_scene(scene_seed, cfg)
    sample = PairedSample(
        visible=render_visible(spec),
        infrared=render_infrared(spec, band, table, noise_seed),
        band=band,
        annotations=annotate_oracle(spec),
        sample_id=f"{split}-{index:05d}",
    )
    return spec, sample


def generate_dataset(cfg: GeneratorConfig, out_dir, table: EmissivityTable | None = None) -> dict:
    """Write a dataset to ``out_dir`` and return its manifest.

    Files are produced in a sibling temporary directory that is renamed into
    place at the end, so an interrupted run leaves nothing behind.
    """
    cfg.validate()
    table = table or DEFAULT_TABLE
    if cfg.noise_sigma is not None:
        table = table.with_noise(cfg.noise_sigma)
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise GenerationError(f"{out_dir}: output directory exists and is not empty")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=f".{out_dir.name}."))
    try:
        histogram = {}
        seen = set()
        for split in SPLITS:
            n = int(cfg.splits.get(split, 0))
            bands = allocate_bands(cfg.bands, n, cfg.seed, split)
            histogram[split] = {b: bands.count(b) for b in BANDS if b in cfg.bands}
            for sub in ("visible", "infrared", "annotations", "band"):
                (tmp / split / sub).mkdir(parents=True)
            for i, band in enumerate(bands):
                _, s = make_sample(cfg, split, i, band, table)
                if s.sample_id in seen:
                    raise GenerationError(f"duplicate sample_id {s.sample_id}")
                seen.add(s.sample_id)
                base = tmp / split
                try:
                    write_png(base / "visible" / f"{s.sample_id}.png", s.visible)
                    write_png(base / "infrared" / f"{s.sample_id}.png", s.infrared)
                    save_annotation_set(s.annotations, base / "annotations" / f"{s.sample_id}.json")
                    atomic_write_text(base / "band" / f"{s.sample_id}.txt", band + "\n")
                except OSError as exc:
                    raise OSError(f"writing sample {s.sample_id} under {out_dir}: {exc}") from exc
        manifest = {
            "generator_version": GENERATOR_VERSION,
            "seed": cfg.seed,
            "bands": {b: cfg.bands[b] for b in BANDS if b in cfg.bands},
            "band_histogram": histogram,
            "emissivity_table": table.to_dict(),
            "splits": {s: int(cfg.splits.get(s, 0)) for s in SPLITS},
            "image_size": [cfg.height, cfg.width],
            "config": cfg.to_dict(),
        }
        atomic_write_text(tmp / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        if out_dir.exists():
            out_dir.rmdir()
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise ConfigurationError(f"{root}: not a dataset directory (no manifest.json)")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def list_ids(root, split: str) -> list:
    vis = Path(root) / split / "visible"
    if not vis.is_dir():
        raise ConfigurationError(f"{root}: missing split directory {split}/visible")
    return sorted(p.stem for p in vis.glob("*.png"))


def load_sample(root, split: str, sample_id: str, band: str | None = None) -> PairedSample:
    base = Path(root) / split
    band_file = base / "band" / f"{sample_id}.txt"
    file_band = band_file.read_text().strip() if band_file.is_file() else None
    if band is None and file_band is None:
        raise ConfigurationError(f"{sample_id}: no band recorded and none declared")
    if band is not None and file_band is not None and band != file_band:
        raise ConfigurationError(f"{sample_id}: declared band {band} but file says {file_band}")
    vis = read_png(base / "visible" / f"{sample_id}.png")
    ir = read_png(base / "infrared" / f"{sample_id}.png")
    if ir.ndim == 3:
        ir = ir.mean(axis=2)
    return PairedSample(
        visible=vis,
        infrared=ir[:, :, None],
        band=file_band or band,
        annotations=load_annotation_set(base / "annotations" / f"{sample_id}.json"),
        sample_id=sample_id,
    )


def load_split(root, split: str, band: str | None = None, limit: int | None = None) -> list:
    ids = list_ids(root, split)
    if limit is not None:
        ids = ids[:limit]
    return [load_sample(root, split, i, band) for i in ids]
