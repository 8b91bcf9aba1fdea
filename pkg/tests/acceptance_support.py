"""Recipes and a small artifact cache for the acceptance suite.

Training runs are expensive on a CPU, so every artifact (dataset, codec,
trained model, ablation table) is stored under a key made of its recipe and
a hash of the package source.  Any source edit or recipe change rebuilds the
artifact; evaluation is always recomputed from the stored checkpoint.

Environment:
  VIS2IR_ACCEPTANCE_CACHE  cache directory (default: <repo>/.acceptance_cache)
  VIS2IR_ACCEPTANCE_FRESH  set to 1 to ignore cached artifacts
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from pathlib import Path

import vis2ir
from vis2ir.checkpoint import load_checkpoint
from vis2ir.dataset import generate_dataset
from vis2ir.scene import GeneratorConfig
from vis2ir.training import AutoencoderConfig, TrainConfig, codec_from_checkpoint, pretrain_autoencoder
from vis2ir.training import train_translation

log = logging.getLogger("acceptance")

REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("VIS2IR_ACCEPTANCE_CACHE", REPO / ".acceptance_cache"))
FRESH = os.environ.get("VIS2IR_ACCEPTANCE_FRESH") == "1"

# datasets ------------------------------------------------------------------

LONG_DATA = GeneratorConfig(seed=101, splits={"train": 2000, "test": 200}, bands={"long": 1.0},
                            required_classes=("person",))
BAND_DATA = {
    band: GeneratorConfig(seed=seed, splits={"train": 1000, "test": 0}, bands={band: 1.0})
    for band, seed in (("near", 301), ("mid", 302), ("long", 303))
}
# held-out scenes for the multi-band check; each is re-rendered in all three bands
BAND_EVAL = GeneratorConfig(seed=399, splits={"train": 0, "test": 100}, bands={"long": 1.0})

# models --------------------------------------------------------------------

CODEC = dict(epochs=8, batch_size=8, learning_rate=1e-3, channels=(32, 64, 128), seed=0)
TRANSLATION = dict(batch_size=16, learning_rate=1e-3, lr_schedule="cosine", warmup_steps=200, base_channels=64)
LEARNING_EPOCHS = 20
MULTIBAND_EPOCHS = 20
ABLATION = dict(epochs=8, seeds=(0, 1, 2), eval_items=50, steps=25, guidance=3.0)
SAMPLER = dict(steps=50, guidance=3.0)


# criterion number -> (passed, detail); printed at the end of the session by conftest
RESULTS: dict = {}


def record(n: int, passed: bool, detail: str) -> bool:
    RESULTS[n] = (bool(passed), detail)
    return bool(passed)


@contextmanager
def criterion(n: int):
    """Record an exception inside the block as a failure of criterion ``n``."""
    try:
        yield
    except BaseException as exc:
        if n not in RESULTS or RESULTS[n][0]:
            RESULTS[n] = (False, f"{type(exc).__name__}: {exc}".splitlines()[0][:200])
        raise


def source_fingerprint() -> str:
    h = hashlib.sha256()
    pkg = Path(vis2ir.__file__).parent
    for p in sorted(pkg.rglob("*.py")):
        h.update(p.relative_to(pkg).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cached(name: str, recipe: dict, build) -> Path:
    """Return ``CACHE/name`` built by ``build(tmp_dir)``, reusing it when the key matches."""
    key = {"recipe": json.loads(json.dumps(recipe, default=str)), "source": source_fingerprint()}
    out = CACHE / name
    key_file = out / "key.json"
    if not FRESH and key_file.is_file() and json.loads(key_file.read_text()) == key:
        log.info("reusing %s", out)
        return out
    tmp = CACHE / f".{name}.building"
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    t0 = time.time()
    build(tmp)
    (tmp / "build_seconds.txt").write_text(f"{time.time() - t0:.1f}\n")
    key_file_tmp = tmp / "key.json"
    key_file_tmp.write_text(json.dumps(key, indent=2, sort_keys=True))
    shutil.rmtree(out, ignore_errors=True)
    os.replace(tmp, out)
    return out


def total_build_seconds(*names) -> float:
    """Summed build time of cached artifacts (as originally built, even when reused)."""
    total = 0.0
    for name in names:
        f = CACHE / name / "build_seconds.txt"
        total += float(f.read_text()) if f.is_file() else 0.0
    return total


def dataset(name: str, cfg: GeneratorConfig) -> Path:
    return cached(f"data-{name}", cfg.to_dict(), lambda tmp: generate_dataset(cfg, tmp / "d")) / "d"


def long_dataset() -> Path:
    return dataset("long", LONG_DATA)


def band_datasets() -> dict:
    return {b: dataset(f"band-{b}", cfg) for b, cfg in BAND_DATA.items()}


def codec_checkpoint_path() -> Path:
    data = long_dataset()
    cfg = AutoencoderConfig(dataset_dirs=[data], **CODEC)

    def build(tmp):
        pretrain_autoencoder(cfg, tmp / "codec.ckpt", tmp / "curve.csv")

    return cached("codec", {"ae": cfg.to_dict(), "data": LONG_DATA.to_dict()}, build) / "codec.ckpt"


def load_codec():
    return codec_from_checkpoint(load_checkpoint(codec_checkpoint_path()))


def trained_model(name: str, cfg: TrainConfig) -> Path:
    """Train (or reuse) a translation model; returns the run directory."""
    codec_path = codec_checkpoint_path()

    def build(tmp):
        train_translation(cfg, codec_path, tmp, progress=True)

    recipe = {"train": cfg.to_dict(), "codec_key": json.loads((codec_path.parent / "key.json").read_text())}
    return cached(name, recipe, build)


def learning_config() -> TrainConfig:
    return TrainConfig(dataset_dirs=[(str(long_dataset()), "long")], epochs=LEARNING_EPOCHS, **TRANSLATION)


def multiband_config() -> TrainConfig:
    dirs = [(str(p), b) for b, p in band_datasets().items()]
    return TrainConfig(dataset_dirs=dirs, epochs=MULTIBAND_EPOCHS, **TRANSLATION)


def ablation_table() -> Path:
    """Run the six-mode ablation through the CLI; returns the directory holding both CSVs."""
    from vis2ir import cli

    data = long_dataset()
    codec_path = codec_checkpoint_path()
    base = {"epochs": ABLATION["epochs"], **TRANSLATION}

    def build(tmp):
        (tmp / "config.json").write_text(json.dumps(base))
        res = cli.run(["ablate", "--codec", str(codec_path), "--data", f"{data}:long",
                       "--config", str(tmp / "config.json"),
                       "--seeds", ",".join(str(s) for s in ABLATION["seeds"]),
                       "--eval-items", str(ABLATION["eval_items"]), "--steps", str(ABLATION["steps"]),
                       "--guidance", str(ABLATION["guidance"]), "--out", str(tmp / "out")])
        if res.exit_code != 0:
            raise RuntimeError(f"ablate exited with {res.exit_code}")

    recipe = {"ablation": ABLATION, "train": base, "codec_key": json.loads((codec_path.parent / "key.json").read_text())}
    return cached("ablation", recipe, build) / "out"
