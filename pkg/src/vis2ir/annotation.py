"""Per-object (label, mask, box) annotations and their JSON+RLE file format.

Three providers produce an :class:`AnnotationSet`: an exact oracle over
synthetic scenes, a degrader that simulates imperfect zero-shot detections,
and a loader for annotation files produced offline from real images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import AnnotationParseError, SchemaVersionError
from .io import atomic_write_text
from .scene import SceneSpec, object_id_map

SCHEMA = "fvita-ann-1"
MAX_ITEMS = 64


def tight_box(mask: np.ndarray) -> tuple:
    """Half-open (x0, y0, x1, y1) bounding box of the true pixels."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask has no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


@dataclass(eq=False)
class ObjectAnnotation:
    label: str
    mask: np.ndarray
    box: tuple

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.box = tuple(int(v) for v in self.box)
        if not self.mask.any():
            raise ValueError(f"annotation {self.label!r} has an empty mask")
        x0, y0, x1, y1 = self.box
        H, W = self.mask.shape
        if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
            raise ValueError(f"box {self.box} invalid for image {H}x{W}")

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, ObjectAnnotation):
            return NotImplemented
        return (self.label == other.label and self.box == other.box
                and self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask)))


@dataclass(eq=False)
class AnnotationSet:
    image_size: tuple  # (H, W)
    items: list = field(default_factory=list)
    source: str = "oracle"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if len(self.items) > MAX_ITEMS:
            raise ValueError(f"{len(self.items)} annotations exceeds the cap of {MAX_ITEMS}")
        for it in self.items:
            if it.mask.shape != self.image_size:
                raise ValueError(f"mask shape {it.mask.shape} != image size {self.image_size}")

    def __len__(self):
        return len(self.items)

    def __eq__(self, other):
        # ``source`` records provenance only; it is not part of the content.
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return self.image_size == other.image_size and self.items == other.items


def annotate_oracle(spec: SceneSpec) -> AnnotationSet:
    """Exact annotations: residual footprint after painting, in spec order.

    Fully occluded objects are dropped.
    """
    ids = object_id_map(spec)
    items = []
    for i, obj in enumerate(spec.objects):
        mask = ids == i
        if mask.any():
            items.append(ObjectAnnotation(obj.class_name, mask, tight_box(mask)))
    return AnnotationSet((spec.height, spec.width), items, source="oracle")


@dataclass
class DegradeConfig:
    p_drop: float = 0.0
    radius: int = 0
    p_conf: float = 0.0
    confusion: dict = field(default_factory=dict)  # label -> list of substitutes


def degrade_annotations(ann: AnnotationSet, noise_cfg: DegradeConfig, seed: int) -> AnnotationSet:
    """Simulate imperfect detections: drops, boundary jitter and label swaps.

    Each item consumes a fixed number of draws so outcomes for one item do
    not depend on what happened to the previous ones.
    """
    rng = np.random.default_rng(seed)
    r = int(noise_cfg.radius)
    out = []
    for item in ann.items:
        u_drop, u_conf, u_pick = rng.random(3)
        step = int(rng.integers(-r, r + 1)) if r > 0 else 0
        if u_drop < noise_cfg.p_drop:
            continue
        mask = item.mask
        if step < 0:
            mask = ndimage.binary_erosion(mask, iterations=-step)
        elif step > 0:
            mask = ndimage.binary_dilation(mask, iterations=step)
        if not mask.any():
            continue
        label = item.label
        subs = noise_cfg.confusion.get(label)
        if subs and u_conf < noise_cfg.p_conf:
            label = subs[min(int(u_pick * len(subs)), len(subs) - 1)]
        out.append(ObjectAnnotation(label, mask, tight_box(mask)))
    return AnnotationSet(ann.image_size, out, source="degraded")


def rle_encode(mask: np.ndarray) -> list:
    """Row-major alternating run lengths, starting with a (possibly empty) zero run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(v) for v in runs]


def rle_decode(runs, shape) -> np.ndarray:
    H, W = shape
    runs = [int(v) for v in runs]
    if any(v < 0 for v in runs):
        raise ValueError("negative run length")
    if sum(runs) != H * W:
        raise ValueError(f"runs sum to {sum(runs)}, expected {H * W}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(H, W)


def annotation_to_dict(ann: AnnotationSet) -> dict:
    return {
        "schema": SCHEMA,
        "image_size": list(ann.image_size),
        "items": [{"label": it.label, "box": list(it.box), "mask_rle": rle_encode(it.mask)}
                  for it in ann.items],
    }


def annotation_from_dict(d: dict, source: str = "file") -> AnnotationSet:
    if d.get("schema") != SCHEMA:
        raise SchemaVersionError(f"unsupported annotation schema {d.get('schema')!r}, expected {SCHEMA!r}")
    shape = tuple(d["image_size"])
    items = []
    for i, raw in enumerate(d["items"]):
        try:
            mask = rle_decode(raw["mask_rle"], shape)
            items.append(ObjectAnnotation(raw["label"], mask, tuple(raw["box"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise AnnotationParseError(f"item {i}: {exc}") from exc
    return AnnotationSet(shape, items, source=source)


def save_annotation_set(ann: AnnotationSet, path) -> None:
    atomic_write_text(path, json.dumps(annotation_to_dict(ann), separators=(",", ":")))


def load_annotation_set(path) -> AnnotationSet:
    with open(path, encoding="utf-8") as fh:
        return annotation_from_dict(json.load(fh))
