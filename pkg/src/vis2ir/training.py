"""Autoencoder pretraining and translation training.

Only the denoiser and the projector are optimized during translation
training; the codec and the frozen embedder tables are never touched.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .checkpoint import Checkpoint, config_hash, load_checkpoint, load_module, module_blobs, save_checkpoint
from .codec import LatentCodec, to_tensor
from .conditioning import CondFlags, Conditioner, EmbedderConfig
from .diffusion import TrainBatch, build_schedule, training_loss
from .errors import ConfigurationError, NumericalFailure, TrainingFailure
from .instructions import BANK_VERSION
from .io import atomic_write_text
from .pipeline import TranslationModel
from .unet import Denoiser, DenoiserConfig

log = logging.getLogger(__name__)


@dataclass
class AutoencoderConfig:
    dataset_dirs: list = field(default_factory=list)
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3  # peak of the one-cycle schedule
    seed: int = 0
    channels: tuple = (32, 64, 128)
    rmse_target: float = 0.05
    max_train_images: int | None = None
    max_holdout_images: int | None = 200

    def to_dict(self):
        d = asdict(self)
        d["dataset_dirs"] = [str(p) for p in self.dataset_dirs]
        d["channels"] = list(self.channels)
        return d


LR_SCHEDULES = ("constant", "cosine")


def lr_factor(step: int, total: int, schedule: str = "constant", warmup: int = 0) -> float:
    """Multiplier on the base learning rate for optimizer step ``step`` (0-based)."""
    f = min(1.0, (step + 1) / warmup) if warmup else 1.0
    if schedule == "cosine":
        f *= 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))
    return f


@dataclass
class TrainConfig:
    dataset_dirs: list = field(default_factory=list)  # [(path, band or None), ...]
    epochs: int = 20
    batch_size: int = 1
    learning_rate: float = 5e-5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    cond_mode: str = "text+masks"
    cfg_drop_prob: float = 0.05
    checkpoint_every: int = 0
    max_steps: int | None = None
    max_samples_per_dataset: int | None = None
    embed_seed: int = 0
    grad_clip: float | None = 1.0
    lr_schedule: str = "constant"  # or "cosine": decay to zero over the run
    warmup_steps: int = 0  # linear ramp from zero, either schedule
    base_channels: int = 64
    attention_resolutions: tuple = (8, 4)
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not self.dataset_dirs:
            raise ConfigurationError("at least one dataset directory is required")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        CondFlags.from_mode(self.cond_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset_dirs"] = [[str(p), b] for p, b in self.dataset_dirs]
        d["adam_betas"] = list(self.adam_betas)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "dataset_dirs" in d:
            d["dataset_dirs"] = [tuple(x) if isinstance(x, (list, tuple)) else (x, None) for x in d["dataset_dirs"]]
        for key in ("adam_betas", "attention_resolutions"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ---------------------------------------------------------------------------
# autoencoder


def _collect_images(dirs, split, limit=None) -> np.ndarray:
    images = []
    for root in dirs:
        for sid in ds.list_ids(root, split):
            base = Path(root) / split
            images.append(ds.read_png(base / "visible" / f"{sid}.png"))
            ir = ds.read_png(base / "infrared" / f"{sid}.png")
            images.append(np.repeat(ir[:, :, None], 3, axis=2) if ir.ndim == 2 else ir)
    if limit is not None:
        images = images[:limit]
    if not images:
        raise ConfigurationError(f"no {split} images found in {list(map(str, dirs))}")
    return np.stack(images).astype(np.float32)


@torch.no_grad()
def reconstruction_rmse(codec: LatentCodec, images) -> np.ndarray:
    """Per-image RMSE of decode(encode(x)); infrared is compared on the channel mean."""
    x = to_tensor(images)
    out = []
    for i in range(0, len(x), 64):
        xb = x[i:i + 64]
        rec = codec.decode(codec.encode(xb))
        out.append(((rec - xb) ** 2).mean(dim=(1, 2, 3)).sqrt())
    return torch.cat(out).numpy()


@torch.no_grad()
def fit_latent_scale(codec: LatentCodec, images) -> float:
    x = to_tensor(images)
    z = torch.cat([codec.encode(x[i:i + 64]) for i in range(0, len(x), 64)])
    return float(1.0 / z.std())


def codec_checkpoint(codec: LatentCodec, metadata: dict) -> Checkpoint:
    meta = {"kind": "codec", "codec": codec.config(), "codec_version": codec.version(), **metadata}
    return Checkpoint(module_blobs("codec", codec), meta)


def codec_from_checkpoint(ckpt: Checkpoint) -> LatentCodec:
    cfg = ckpt.metadata["codec"]
    codec = LatentCodec(tuple(cfg["image_size"]), tuple(cfg["channels"]), cfg["latent_channels"])
    load_module(codec, ckpt.group("codec"))
    return codec.freeze()


def pretrain_autoencoder(cfg: AutoencoderConfig, out_path=None, curve_path=None) -> tuple:
    """Train the codec on visible + infrared images of the train splits.

    Returns ``(codec, report)``; raises TrainingFailure (after dumping the loss
    curve) if held-out RMSE misses ``cfg.rmse_target``.
    """
    train = _collect_images(cfg.dataset_dirs, "train", cfg.max_train_images)
    held = _collect_images(cfg.dataset_dirs, "test", cfg.max_holdout_images)
    H, W = train.shape[1:3]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        codec = LatentCodec((H, W), cfg.channels)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.learning_rate)
    total_steps = max(1, cfg.epochs * math.ceil(len(train) / cfg.batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.learning_rate, total_steps=total_steps, pct_start=0.1)
    x_all = to_tensor(train)
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        codec.train()
        perm = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for i in range(0, len(perm), cfg.batch_size):
            xb = x_all[perm[i:i + cfg.batch_size]]
            loss = torch.mean((codec.decode(codec.encode(xb)) - xb) ** 2)
            if not torch.isfinite(loss):
                raise NumericalFailure(f"autoencoder loss non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            total += loss.item() * len(xb)
        held_rmse = float(reconstruction_rmse(codec, held).mean())
        curve.append((epoch, total / len(x_all), held_rmse))
        log.info("ae epoch %d train_mse %.5f heldout_rmse %.4f", epoch, total / len(x_all), held_rmse)
    codec.latent_scale.fill_(fit_latent_scale(codec, train[: min(len(train), 1024)]))
    codec.freeze()
    rmse = reconstruction_rmse(codec, held)
    report = {"heldout_rmse": float(rmse.mean()), "heldout_rmse_max": float(rmse.max()),
              "steps": step, "curve": curve, "latent_scale": float(codec.latent_scale)}
    if curve_path is not None:
        atomic_write_text(curve_path, _csv([("epoch", "train_mse", "heldout_rmse")] + curve))
    if report["heldout_rmse"] >= cfg.rmse_target:
        dump = curve_path or "(no curve path given)"
        raise TrainingFailure(f"held-out RMSE {report['heldout_rmse']:.4f} >= target {cfg.rmse_target}; "
                              f"curve: {curve if curve_path is None else dump}")
    if out_path is not None:
        save_checkpoint(codec_checkpoint(codec, {"config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()),
                                                 "heldout_rmse": report["heldout_rmse"], "step": step}), out_path)
    return codec, report


# ---------------------------------------------------------------------------
# translation


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def loss_log_csv(losses) -> str:
    return _csv([("step", "loss")] + [(s, repr(float(v))) for s, v in losses])


def build_model(cfg: TrainConfig, codec: LatentCodec) -> TranslationModel:
    latent = codec.latent_shape
    dcfg = DenoiserConfig(latent_channels=latent[0], latent_size=latent[1], base_channels=cfg.base_channels,
                          attention_resolutions=tuple(cfg.attention_resolutions), seed=cfg.seed)
    conditioner = Conditioner(EmbedderConfig(init_seed=cfg.embed_seed), codec)
    schedule = build_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)
    return TranslationModel(codec, conditioner, Denoiser(dcfg, schedule.alpha_bars), schedule,
                            CondFlags.from_mode(cfg.cond_mode))


def load_training_samples(cfg: TrainConfig, split: str = "train") -> list:
    samples = []
    for path, band in cfg.dataset_dirs:
        ds.read_manifest(path)
        samples += ds.load_split(path, split, band, cfg.max_samples_per_dataset)
    if not samples:
        raise ConfigurationError(f"no {split} samples in {cfg.dataset_dirs}")
    return samples


def prepare_all(model: TranslationModel, samples, chunk: int = 256) -> TrainBatch:
    parts = [model.prepare_batch(samples[i:i + chunk]) for i in range(0, len(samples), chunk)]
    return TrainBatch(*(torch.cat(ts) for ts in zip(*(
        (p.ir_latent, p.vis_latent, p.obj_feats, p.n_obj, p.image_emb, p.instr_options) for p in parts))))


def subset(batch: TrainBatch, idx) -> TrainBatch:
    return TrainBatch(batch.ir_latent[idx], batch.vis_latent[idx], batch.obj_feats[idx],
                      batch.n_obj[idx], batch.image_emb[idx], batch.instr_options[idx])


def translation_checkpoint(model: TranslationModel, cfg: TrainConfig, step: int, extra: dict | None = None) -> Checkpoint:
    params = {}
    params.update(module_blobs("denoiser", model.denoiser))
    params.update(module_blobs("projector", model.conditioner.projector))
    params.update(module_blobs("codec", model.codec))
    params.update(module_blobs("embedders", model.conditioner.frozen))
    meta = {
        "kind": "translation",
        "step": step,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "template_bank_version": BANK_VERSION,
        "emissivity_table_version": _table_version(cfg),
        "schedule": model.schedule.to_dict(),
        "denoiser": model.denoiser.cfg.to_dict(),
        "embedder": asdict(model.conditioner.cfg),
        "codec": model.codec.config(),
        "codec_version": model.codec.version(),
        "cond_mode": cfg.cond_mode,
        **(extra or {}),
    }
    return Checkpoint(params, meta)


def _table_version(cfg: TrainConfig):
    versions = set()
    for path, _ in cfg.dataset_dirs:
        try:
            versions.add(ds.read_manifest(path)["emissivity_table"]["version"])
        except (ConfigurationError, KeyError):
            versions.add("unknown")
    return sorted(versions)


def model_from_checkpoint(ckpt: Checkpoint) -> TranslationModel:
    if ckpt.metadata.get("kind") != "translation":
        raise ConfigurationError("not a translation checkpoint")
    cfg = TrainConfig.from_dict(ckpt.metadata["config"])
    codec = codec_from_checkpoint(ckpt)
    model = build_model(cfg, codec)
    load_module(model.denoiser, ckpt.group("denoiser"))
    load_module(model.conditioner.projector, ckpt.group("projector"))
    load_module(model.conditioner.frozen, ckpt.group("embedders"))
    model.conditioner.frozen.sync_tables()
    return model


@dataclass
class TrainResult:
    model: TranslationModel
    losses: list  # [(step, loss)]
    checkpoint: Checkpoint
    checkpoint_path: Path | None = None


def train_translation(cfg: TrainConfig, codec, out_dir=None, data: TrainBatch | None = None,
                      progress: bool = False, init: Checkpoint | None = None) -> TrainResult:
    """Optimize denoiser + projector on the configured datasets.

    ``codec`` is a LatentCodec or a path to a codec checkpoint.  ``data`` may
    carry a precomputed TrainBatch (it must match ``cfg.cond_mode``).
    ``init`` optionally supplies starting denoiser/projector weights.
    """
    cfg.validate()
    if not isinstance(codec, LatentCodec):
        codec = codec_from_checkpoint(load_checkpoint(codec))
    model = build_model(cfg, codec)
    if init is not None:
        if init.metadata.get("codec_version") != codec.version():
            raise ConfigurationError("initial checkpoint was trained against a different codec")
        load_module(model.denoiser, init.group("denoiser"))
        load_module(model.conditioner.projector, init.group("projector"))
    if data is None:
        data = prepare_all(model, load_training_samples(cfg))
    out_dir = Path(out_dir) if out_dir is not None else None
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = []
    step = 0
    N = len(data)
    total = cfg.epochs * math.ceil(N / cfg.batch_size)
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    model.denoiser.train()
    try:
        for epoch in range(cfg.epochs):
            perm = torch.randperm(N, generator=gen)
            for i in range(0, N, cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                batch = subset(data, perm[i:i + cfg.batch_size])
                loss = training_loss(batch, model.schedule, model.denoiser, model.conditioner, gen,
                                     cfg.cfg_drop_prob)
                for group in opt.param_groups:
                    group["lr"] = cfg.learning_rate * lr_factor(step, total, cfg.lr_schedule, cfg.warmup_steps)
                opt.zero_grad()
                loss.backward()
                # checked before the update so the weights on abort are still the last good ones
                gnorm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip or math.inf)
                if not torch.isfinite(gnorm):
                    raise NumericalFailure(f"non-finite gradient at step {step + 1}")
                opt.step()
                step += 1
                losses.append((step, loss.item()))
                if progress and step % 100 == 0:
                    recent = np.mean([v for _, v in losses[-100:]])
                    log.info("epoch %d step %d loss %.4f", epoch, step, recent)
                if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(translation_checkpoint(model, cfg, step), out_dir / f"step-{step:07d}.ckpt")
                    atomic_write_text(out_dir / "loss.csv", loss_log_csv(losses))
    except NumericalFailure as exc:
        if out_dir is not None:
            save_checkpoint(translation_checkpoint(model, cfg, step, {"aborted": str(exc)}), out_dir / "last-good.ckpt")
            atomic_write_text(out_dir / "loss.csv", loss_log_csv(losses))
        raise
    model.denoiser.eval()
    ckpt = translation_checkpoint(model, cfg, step)
    path = None
    if out_dir is not None:
        path = out_dir / "final.ckpt"
        save_checkpoint(ckpt, path)
        atomic_write_text(out_dir / "loss.csv", loss_log_csv(losses))
    return TrainResult(model, losses, ckpt, path)


@torch.no_grad()
def validation_loss(model: TranslationModel, data: TrainBatch, seed: int = 0, repeats: int = 4,
                    batch_size: int = 64) -> float:
    """Mean denoising loss with a fixed noise stream and no conditioning drops."""
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    model.denoiser.eval()
    for _ in range(repeats):
        for i in range(0, len(data), batch_size):
            b = subset(data, torch.arange(i, min(i + batch_size, len(data))))
            loss = training_loss(b, model.schedule, model.denoiser, model.conditioner, gen, 0.0)
            total += float(loss) * len(b)
            count += len(b)
    return total / count
