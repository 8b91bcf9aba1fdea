"""A tour of the synthetic paired world.

Every scene is a handful of labelled shapes on a background.  The visible
render gives each object a random colour, so colour says nothing about the
class; the infrared renders come from a per-class, per-band intensity table.
An oracle annotator turns the scene back into masks and labels, standing in
for an off-the-shelf detector + segmenter.

Run:  python demos/01_synthetic_world.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from vis2ir.annotation import (DegradeConfig, annotate_oracle, annotation_to_dict, degrade_annotations,
                               rle_encode)
from vis2ir.experiments import class_mask
from vis2ir.io import write_png
from vis2ir.scene import BANDS, DEFAULT_TABLE, GeneratorConfig, render_infrared, render_visible, sample_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")
out.mkdir(parents=True, exist_ok=True)

cfg = GeneratorConfig(count_range=(4, 9), required_classes=("person",))
rows = []
for seed in range(6):
    spec = sample_scene(seed, cfg)
    vis = render_visible(spec)
    irs = [np.repeat(render_infrared(spec, b, noise_seed=seed), 3, axis=2) for b in BANDS]
    gap = np.ones((64, 2, 3))
    rows.append(np.concatenate([vis, gap] + sum(([ir, gap] for ir in irs), [])[:-1], axis=1))
sheet = np.concatenate([np.concatenate([r, np.ones((2, r.shape[1], 3))]) for r in rows])
write_png(out / "contact_sheet.png", sheet)
print(f"contact sheet (visible | near | mid | long) -> {out / 'contact_sheet.png'}")

print("\nintensity table:")
for band in BANDS:
    print(f"  {band:>4}: " + "  ".join(f"{c}={v:.2f}" for c, v in DEFAULT_TABLE.values[band].items()))

# What the model is expected to learn: people are hot in long-wave and dim in near-IR.
spec = sample_scene(0, cfg)
ann = annotate_oracle(spec)
person = class_mask(ann, "person")
for band in BANDS:
    ir = render_infrared(spec, band, noise_seed=0)[:, :, 0]
    print(f"scene 0, {band:>4}: person mean {ir[person].mean():.3f}, everything else {ir[~person].mean():.3f}")

print(f"\nscene 0 has {len(spec.objects)} objects, {len(ann)} survive occlusion:")
for it in ann.items:
    runs = rle_encode(it.mask)
    print(f"  {it.label:>8} box={it.box} area={int(it.mask.sum()):4d} rle_runs={len(runs)}")
print("first annotation as stored:", {k: v for k, v in annotation_to_dict(ann)["items"][0].items() if k != "mask_rle"})

noisy = degrade_annotations(ann, DegradeConfig(p_drop=0.3, radius=1, p_conf=0.2,
                                               confusion={"person": ["car"], "car": ["person"]}), seed=1)
print(f"a degraded annotator keeps {len(noisy)} of {len(ann)} objects: {[it.label for it in noisy.items]}")
