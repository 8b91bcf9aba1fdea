"""Experiment helpers shared by the CLI, the demos and the acceptance suite:
translating whole splits, the global intensity-mapping baseline, the
person-contrast probe and the conditioning ablation sweep.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds
from .annotation import AnnotationSet, load_annotation_set
from .conditioning import COND_MODES, CondFlags
from .errors import ConfigurationError
from .io import read_png
from .metrics import compute_report, to_luminance
from .pipeline import TranslationModel
from .training import TrainConfig, build_model, prepare_all, train_translation, validation_loss

log = logging.getLogger(__name__)


@dataclass
class InputItem:
    sample_id: str
    visible: np.ndarray  # H x W x 3
    annotations: AnnotationSet
    infrared: np.ndarray | None = None  # H x W, when ground truth is available
    band: str | None = None


def read_inputs(path, limit: int | None = None) -> list:
    """Load translation inputs.

    ``path`` is a split directory (``visible/`` + ``annotations/``, optionally
    ``infrared/`` and ``band/``), a dataset root (its test split is used), or
    a single visible PNG.
    """
    path = Path(path)
    if path.is_file():
        vis = read_png(path)
        if vis.ndim != 3:
            vis = np.repeat(vis[:, :, None], 3, axis=2)
        return [InputItem(path.stem, vis, AnnotationSet(vis.shape[:2], ()))]
    if (path / "manifest.json").is_file():
        path = path / "test"
    vis_dir = path / "visible"
    if not vis_dir.is_dir():
        raise ConfigurationError(f"{path}: expected a visible/ directory, a dataset root or a PNG file")
    ids = sorted(p.stem for p in vis_dir.glob("*.png"))
    if limit is not None:
        ids = ids[:limit]
    if not ids:
        raise ConfigurationError(f"{vis_dir}: no PNG images")
    items = []
    for sid in ids:
        vis = read_png(vis_dir / f"{sid}.png")
        ann_path = path / "annotations" / f"{sid}.json"
        ann = load_annotation_set(ann_path) if ann_path.is_file() else AnnotationSet(vis.shape[:2], ())
        ir_path = path / "infrared" / f"{sid}.png"
        ir = read_png(ir_path) if ir_path.is_file() else None
        if ir is not None and ir.ndim == 3:
            ir = ir.mean(axis=2)
        band_path = path / "band" / f"{sid}.txt"
        band = band_path.read_text().strip() if band_path.is_file() else None
        items.append(InputItem(sid, vis, ann, ir, band))
    return items


def items_from_samples(samples) -> list:
    return [InputItem(s.sample_id, s.visible, s.annotations, s.infrared[:, :, 0], s.band) for s in samples]


def item_seed(seed: int, index: int) -> int:
    """Sampling seed of the ``index``-th input of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def translate_items(model: TranslationModel, items, bands, template_id: int = 0, guidance: float = 3.0,
                    steps: int = 50, seed: int = 0, chunk: int = 32) -> np.ndarray:
    """Translate every item; ``bands`` is one band name or one per item. Returns N x H x W."""
    if isinstance(bands, str):
        bands = [bands] * len(items)
    out = []
    for i in range(0, len(items), chunk):
        part = items[i:i + chunk]
        out.append(model.translate(
            np.stack([it.visible for it in part]), [it.annotations for it in part], bands[i:i + chunk],
            [template_id] * len(part), steps=steps, guidance_scale=guidance,
            seeds=[item_seed(seed, i + k) for k in range(len(part))]))
    return np.concatenate(out)


def grid_image(visible, prediction, ground_truth=None) -> np.ndarray:
    """Side-by-side RGB strip: visible | ground truth (if any) | prediction."""
    panels = [np.asarray(visible, dtype=np.float32)]
    for img in (ground_truth, prediction):
        if img is not None:
            g = np.asarray(img, dtype=np.float32).reshape(visible.shape[:2])
            panels.append(np.repeat(g[:, :, None], 3, axis=2))
    sep = np.ones((visible.shape[0], 2, 3), dtype=np.float32)
    out = [panels[0]]
    for p in panels[1:]:
        out += [sep, p]
    return np.concatenate(out, axis=1)


# ---------------------------------------------------------------------------
# baseline and probes


def fit_intensity_baseline(samples) -> tuple:
    """Least-squares fit ``ir ~ a * luminance(visible) + b`` over all training pixels."""
    x = np.concatenate([to_luminance(s.visible).ravel() for s in samples])
    y = np.concatenate([np.asarray(s.infrared, dtype=np.float64).ravel() for s in samples])
    A = np.stack([x, np.ones_like(x)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(a), float(b)


def apply_intensity_baseline(visible, coeffs) -> np.ndarray:
    a, b = coeffs
    return np.clip(a * to_luminance(visible) + b, 0.0, 1.0)


def class_mask(ann: AnnotationSet, label: str) -> np.ndarray:
    """Union of the masks of every object with ``label``."""
    mask = np.zeros(ann.image_size, dtype=bool)
    for it in ann.items:
        if it.label == label:
            mask |= it.mask
    return mask


def person_contrast(pred, ann: AnnotationSet) -> float | None:
    """Mean predicted intensity on person pixels minus the mean on background pixels.

    Background means pixels covered by no annotated object.  Returns None if
    the scene has no visible person pixels.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(ann.image_size)
    person = class_mask(ann, "person")
    covered = np.zeros(ann.image_size, dtype=bool)
    for it in ann.items:
        covered |= it.mask
    background = ~covered
    if not person.any() or not background.any():
        return None
    return float(pred[person].mean() - pred[background].mean())


# ---------------------------------------------------------------------------
# ablation


ABLATION_COLUMNS = ("mode", "text_labels", "bounding_boxes", "masks", "fid", "lpips", "ssim", "psnr", "val_loss")


def run_ablation(codec, base_cfg: TrainConfig, modes=COND_MODES, seeds=(0, 1, 2), eval_items: int = 50,
                 steps: int = 25, guidance: float = 3.0, val_seed: int = 1234, progress: bool = False):
    """Train one model per (mode, seed) and score it on the test split.

    Every mode sees the same training samples, the same seeds and the same
    validation noise stream, so the differences come from the conditioning
    alone.  Returns ``(rows, per_seed)``; ``rows`` averages over seeds and has
    the columns of ``ABLATION_COLUMNS``.
    """
    for m in modes:
        CondFlags.from_mode(m)
    train_samples, test_samples = [], []
    for path, band in base_cfg.dataset_dirs:
        train_samples += ds.load_split(path, "train", band, base_cfg.max_samples_per_dataset)
        test_samples += ds.load_split(path, "test", band)
    if not test_samples:
        raise ConfigurationError("ablation needs a non-empty test split")
    items = items_from_samples(test_samples[:eval_items])
    gts = np.stack([it.infrared for it in items])
    rows, per_seed = [], []
    for mode in modes:
        flags = CondFlags.from_mode(mode)
        metrics, losses = [], []
        train_data = val_data = None
        for seed in seeds:
            cfg = dataclasses.replace(base_cfg, cond_mode=mode, seed=int(seed))
            if train_data is None:
                probe = build_model(cfg, codec)
                train_data = prepare_all(probe, train_samples)
                val_data = prepare_all(probe, test_samples)
            result = train_translation(cfg, codec, data=train_data, progress=progress)
            vl = validation_loss(result.model, val_data, seed=val_seed)
            preds = translate_items(result.model, items, [it.band for it in items], guidance=guidance,
                                    steps=steps, seed=val_seed)
            rep = compute_report(preds, gts, codec)
            metrics.append((rep.fid, rep.lpips, rep.ssim, rep.psnr))
            losses.append(vl)
            per_seed.append({"mode": mode, "seed": int(seed), "val_loss": vl, "fid": rep.fid,
                             "lpips": rep.lpips, "ssim": rep.ssim, "psnr": rep.psnr})
            log.info("ablation mode %s seed %d val_loss %.5f", mode, seed, vl)
        m = np.mean(np.array(metrics, dtype=np.float64), axis=0)
        rows.append({"mode": mode, "text_labels": int(flags.use_text_labels), "bounding_boxes": int(flags.use_boxes),
                     "masks": int(flags.use_masks), "fid": float(m[0]), "lpips": float(m[1]),
                     "ssim": float(m[2]), "psnr": float(m[3]), "val_loss": float(np.mean(losses))})
    return rows, per_seed
