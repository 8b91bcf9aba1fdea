"""A miniature end-to-end run: data, codec, translation model, samples.

Everything here is deliberately small so it finishes in a few minutes on a
laptop CPU.  The outputs will be blurry; the point is to show the moving
parts and how they connect.  The acceptance suite runs the same pipeline at
a useful scale.

Run:  python demos/03_train_and_translate.py [out_dir]
"""

import logging
import sys
from pathlib import Path

import numpy as np

from vis2ir.dataset import generate_dataset, load_split
from vis2ir.experiments import (apply_intensity_baseline, fit_intensity_baseline, grid_image, items_from_samples,
                                person_contrast, translate_items)
from vis2ir.io import write_png
from vis2ir.metrics import psnr, ssim
from vis2ir.scene import GeneratorConfig
from vis2ir.training import AutoencoderConfig, TrainConfig, pretrain_autoencoder, train_translation

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/03")
out.mkdir(parents=True, exist_ok=True)

data = out / "data"
if not data.exists():
    generate_dataset(GeneratorConfig(seed=0, splits={"train": 300, "test": 8}, bands={"long": 1.0},
                                     required_classes=("person",)), data)

# 1. the codec: a small autoencoder that both images live in during diffusion
codec, report = pretrain_autoencoder(
    AutoencoderConfig(dataset_dirs=[data], epochs=4, batch_size=8, channels=(16, 32, 64), rmse_target=1.0),
    out / "codec.ckpt")
print(f"codec held-out RMSE {report['heldout_rmse']:.3f}")

# 2. the translation model: only the denoiser and the object-token projector train
cfg = TrainConfig(dataset_dirs=[(str(data), "long")], epochs=6, batch_size=16, learning_rate=1e-3,
                  lr_schedule="cosine", warmup_steps=20, base_channels=32)
result = train_translation(cfg, codec, out / "run", progress=True)
print(f"{len(result.losses)} steps, loss {result.losses[0][1]:.3f} -> {np.mean([v for _, v in result.losses[-20:]]):.3f}")

# 3. sample and compare against the least-squares gray -> IR baseline
items = items_from_samples(load_split(data, "test"))
preds = translate_items(result.model, items, "long", steps=25, guidance=3.0, seed=0)
coeffs = fit_intensity_baseline(load_split(data, "train"))
for it, p in zip(items, preds):
    b = apply_intensity_baseline(it.visible, coeffs)
    c = person_contrast(p, it.annotations)
    print(f"{it.sample_id}: PSNR {psnr(p, it.infrared):5.2f} (baseline {psnr(b, it.infrared):5.2f})  "
          f"SSIM {ssim(p, it.infrared):.2f} (baseline {ssim(b, it.infrared):.2f})  "
          f"person contrast {'n/a' if c is None else f'{c:.2f}'}")
    write_png(out / f"{it.sample_id}.png", grid_image(it.visible, p, it.infrared))
print(f"strips (visible | ground truth | prediction) in {out}")
