"""Command-line entry point: ``vis2ir <subcommand> ...``.

Exit codes: 0 success, 1 user error (bad flags, bad inputs, refused
overwrite), 2 internal error (numerical failure, unmet training target, bug).
Every subcommand echoes its effective configuration as one JSON line on
stderr before doing any work.  Seeds default to ``$FVITA_SEED`` (else 0).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from .annotation import AnnotationParseError, load_annotation_set
from .checkpoint import load_checkpoint
from .conditioning import COND_MODES, ROLE_NAMES, CondFlags, Conditioner, EmbedderConfig
from .errors import (ConfigHashMismatch, ConfigurationError, GenerationError, IntegrityError,
                     NumericalFailure, SchemaVersionError, TrainingFailure)
from .experiments import (ABLATION_COLUMNS, grid_image, read_inputs, run_ablation, translate_items)
from .instructions import BANK_SIZE, render_instruction
from .io import atomic_write_text, read_png, staged_directory, write_png
from .metrics import evaluate_pairs
from .scene import BANDS, GeneratorConfig
from .training import (AutoencoderConfig, TrainConfig, codec_from_checkpoint, model_from_checkpoint,
                       pretrain_autoencoder, train_translation)

log = logging.getLogger("vis2ir")

USER_ERRORS = (ConfigurationError, AnnotationParseError, SchemaVersionError, IntegrityError,
               ConfigHashMismatch, GenerationError, OSError, json.JSONDecodeError)


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list = field(default_factory=list)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get("FVITA_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"FVITA_SEED must be an integer, got {raw!r}") from None


def _echo(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "effective_config": config}, sort_keys=True, default=str),
          file=sys.stderr, flush=True)


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return data


def _data_dirs(values) -> list:
    """``DIR`` or ``DIR:BAND`` -> [(DIR, BAND or None)]."""
    out = []
    for v in values:
        path, sep, band = v.rpartition(":")
        if sep and band in BANDS:
            out.append((path, band))
        else:
            out.append((v, None))
    return out


def _guard_file(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path}: exists (use --force to overwrite)")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> CommandResult:
    cfg_dict = _load_json(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg_dict.setdefault("seed", _default_seed())
    cfg = GeneratorConfig.from_dict(cfg_dict)
    cfg.validate()
    _echo("synth-data", {**cfg.to_dict(), "out": args.out})
    out = Path(args.out)
    with staged_directory(out, overwrite=args.force) as tmp:
        target = tmp / "data"
        ds.generate_dataset(cfg, target)
        for p in target.iterdir():
            os.replace(p, tmp / p.name)
        target.rmdir()
    print(f"wrote dataset to {out}", file=sys.stderr)
    return CommandResult(0, [str(out)])


def cmd_pretrain_ae(args) -> CommandResult:
    d = _load_json(args.config)
    overrides = {"dataset_dirs": args.data, "epochs": args.epochs, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "max_train_images": args.max_train_images}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.channels:
        d["channels"] = tuple(int(c) for c in args.channels.split(","))
    d["seed"] = args.seed if args.seed is not None else d.get("seed", _default_seed())
    cfg = AutoencoderConfig(**d)
    if not cfg.dataset_dirs:
        raise ConfigurationError("pretrain-ae needs at least one --data directory")
    out = Path(args.out)
    _guard_file(out, args.force)
    curve = Path(args.curve) if args.curve else out.with_suffix(".curve.csv")
    _echo("pretrain-ae", {**cfg.to_dict(), "out": str(out), "curve": str(curve)})
    _, report = pretrain_autoencoder(cfg, out, curve)
    print(f"held-out RMSE {report['heldout_rmse']:.4f}; wrote {out}", file=sys.stderr)
    return CommandResult(0, [str(out), str(curve)])


def _train_config(args) -> TrainConfig:
    d = _load_json(args.config)
    if args.data:
        d["dataset_dirs"] = _data_dirs(args.data)
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.lr,
                 "cond_mode": args.cond, "max_steps": args.max_steps, "checkpoint_every": args.checkpoint_every,
                 "max_samples_per_dataset": args.max_samples}
    d.update({k: v for k, v in overrides.items() if v is not None})
    d["seed"] = args.seed if args.seed is not None else d.get("seed", _default_seed())
    cfg = TrainConfig.from_dict(d)
    cfg.validate()
    return cfg


def cmd_train(args) -> CommandResult:
    cfg = _train_config(args)
    out = Path(args.out)
    if (out / "final.ckpt").exists() and not args.force:
        raise FileExistsError(f"{out}: already holds a trained model (use --force)")
    _echo("train", {**cfg.to_dict(), "config_hash": cfg.hash(), "codec": args.codec, "out": str(out),
                    "init": args.init})
    init = None
    if args.init:
        init = load_checkpoint(args.init, expected_config_hash=cfg.hash(), force=args.force)
    result = train_translation(cfg, args.codec, out, progress=True, init=init)
    print(f"final loss {result.losses[-1][1]:.5f} after {len(result.losses)} steps; wrote {result.checkpoint_path}"
          if result.losses else f"no steps run; wrote {result.checkpoint_path}", file=sys.stderr)
    return CommandResult(0, [str(result.checkpoint_path), str(out / "loss.csv")])


def cmd_translate(args) -> CommandResult:
    if not 0 <= args.template < BANK_SIZE:
        raise ConfigurationError(f"--template must lie in [0, {BANK_SIZE})")
    seed = args.seed if args.seed is not None else _default_seed()
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    items = read_inputs(args.input, args.limit)
    config = {"ckpt": args.ckpt, "input": args.input, "band": args.band, "template": args.template,
              "instruction": render_instruction(args.template, args.band), "guidance": args.guidance,
              "steps": args.steps, "seed": seed, "out": args.out, "grid": args.grid, "n_inputs": len(items),
              "cond_mode": model.flags.mode}
    _echo("translate", config)
    preds = translate_items(model, items, args.band, args.template, args.guidance, args.steps, seed)
    out = Path(args.out)
    with staged_directory(out, overwrite=args.force) as tmp:
        for it, p in zip(items, preds):
            write_png(tmp / f"{it.sample_id}.png", p)
            if args.grid:
                write_png(tmp / "grid" / f"{it.sample_id}.png", grid_image(it.visible, p, it.infrared))
        atomic_write_text(tmp / "translate.json", json.dumps(config, indent=2, sort_keys=True))
    print(f"wrote {len(items)} {args.band}-wave predictions to {out}", file=sys.stderr)
    return CommandResult(0, [str(out)])


def _extractor(path):
    ckpt = load_checkpoint(path)
    return codec_from_checkpoint(ckpt)


def cmd_evaluate(args) -> CommandResult:
    _echo("evaluate", {"pred": args.pred, "gt": args.gt, "ckpt": args.ckpt, "out": args.out})
    extractor = _extractor(args.ckpt)
    out = Path(args.out) if args.out else Path(args.pred) / "metrics.json"
    report = evaluate_pairs(args.pred, args.gt, extractor, out)
    print(report.to_json())
    return CommandResult(0, [str(out)])


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_ablate(args) -> CommandResult:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        CondFlags.from_mode(m)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [_default_seed()]
    cfg = _train_config(args)
    out = Path(args.out)
    _echo("ablate", {**cfg.to_dict(), "modes": modes, "seeds": seeds, "codec": args.codec, "out": str(out),
                     "eval_items": args.eval_items, "steps": args.steps, "guidance": args.guidance})
    codec = codec_from_checkpoint(load_checkpoint(args.codec))
    rows, per_seed = run_ablation(codec, cfg, modes, seeds, args.eval_items, args.steps, args.guidance, progress=True)
    with staged_directory(out, overwrite=args.force) as tmp:
        atomic_write_text(tmp / "ablation.csv", _csv_text(rows, ABLATION_COLUMNS))
        atomic_write_text(tmp / "ablation_per_seed.csv",
                          _csv_text(per_seed, ("mode", "seed", "val_loss", "fid", "lpips", "ssim", "psnr")))
    sys.stdout.write(_csv_text(rows, ABLATION_COLUMNS))
    return CommandResult(0, [str(out / "ablation.csv"), str(out / "ablation_per_seed.csv")])


def cmd_inspect_cond(args) -> CommandResult:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.metadata.get("kind") == "translation":
        model = model_from_checkpoint(ckpt)
        conditioner, flags = model.conditioner, model.flags
    else:
        codec = codec_from_checkpoint(ckpt)
        conditioner = Conditioner(EmbedderConfig(), codec)
        flags = CondFlags.from_mode(args.cond)
    vis = read_png(args.input)
    if vis.ndim == 2:
        vis = np.repeat(vis[:, :, None], 3, axis=2)
    ann = load_annotation_set(args.ann)
    if ann.image_size != vis.shape[:2]:
        raise ConfigurationError(f"annotation size {ann.image_size} does not match image {vis.shape[:2]}")
    instruction = render_instruction(args.template, args.band)
    _echo("inspect-cond", {"ckpt": args.ckpt, "input": args.input, "ann": args.ann, "band": args.band,
                           "template": args.template, "cond_mode": flags.mode})
    bundle = conditioner.assemble_conditioning(ann, conditioner.embed_visible(vis),
                                               conditioner.embed_instruction(instruction), flags)
    norms = bundle.tokens.detach().norm(dim=1).tolist()
    report = {"instruction": instruction, "cond_mode": flags.mode, "n_objects": bundle.n_objects,
              "n_annotations": len(ann), "tokens": [
                  {"slot": i, "role": role, "norm": round(float(n), 6)}
                  for i, (role, n) in enumerate(zip(bundle.token_roles, norms))],
              "role_counts": {r: bundle.token_roles.count(r) for r in ROLE_NAMES}}
    print(json.dumps(report, indent=2))
    return CommandResult(0, [])


# ---------------------------------------------------------------------------
# parser


def _train_flags(p, require_codec=True):
    p.add_argument("--codec", required=require_codec, help="codec checkpoint from pretrain-ae")
    p.add_argument("--data", nargs="+", metavar="DIR[:BAND]", help="dataset roots, optionally with a declared band")
    p.add_argument("--config", help="JSON file with TrainConfig fields (flags override it)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cond", choices=COND_MODES, help="conditioning mode (default text+masks)")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--max-samples", type=int, help="cap on training samples per dataset")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vis2ir", description="Instruction-conditioned visible-to-infrared translation.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a paired synthetic dataset")
    p.add_argument("--config", help="JSON file with generator fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain-ae", help="pretrain the latent codec")
    p.add_argument("--data", nargs="+", help="dataset roots")
    p.add_argument("--config", help="JSON file with autoencoder fields")
    p.add_argument("--out", required=True, help="codec checkpoint path")
    p.add_argument("--curve", help="loss curve CSV (default: next to the checkpoint)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--channels", help="comma-separated codec widths, e.g. 32,64,128")
    p.add_argument("--max-train-images", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain_ae)

    p = sub.add_parser("train", help="train the translation model (denoiser + projector)")
    _train_flags(p)
    p.add_argument("--out", required=True, help="run directory for checkpoints and loss.csv")
    p.add_argument("--init", help="initialize from a translation checkpoint (config hash must match)")
    p.add_argument("--force", action="store_true", help="overwrite a finished run / ignore a config-hash mismatch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate visible images to a requested infrared band")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="split directory, dataset root or single PNG")
    p.add_argument("--band", required=True, choices=BANDS)
    p.add_argument("--template", type=int, default=0, help=f"instruction template id in [0, {BANK_SIZE})")
    p.add_argument("--guidance", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int, help="translate only the first N inputs")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="store_true", help="also write visible | ground truth | prediction strips")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="FID / perceptual distance / SSIM / PSNR between two image folders")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ckpt", required=True, help="codec or translation checkpoint providing the feature extractor")
    p.add_argument("--out", help="report path (default: PRED/metrics.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score several conditioning modes")
    _train_flags(p)
    p.add_argument("--modes", default=",".join(COND_MODES))
    p.add_argument("--seeds", help="comma-separated seeds (default: the global seed)")
    p.add_argument("--eval-items", type=int, default=50)
    p.add_argument("--steps", type=int, default=25, help="sampler steps for the metric pass")
    p.add_argument("--guidance", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-cond", help="dump the conditioning token layout for one image")
    p.add_argument("--ckpt", required=True, help="translation checkpoint (or a codec checkpoint)")
    p.add_argument("--input", required=True, help="visible PNG")
    p.add_argument("--ann", required=True, help="annotation JSON")
    p.add_argument("--band", default="long", choices=BANDS)
    p.add_argument("--template", type=int, default=0)
    p.add_argument("--cond", default="text+masks", choices=COND_MODES, help="mode when given a codec checkpoint")
    p.set_defaults(func=cmd_inspect_cond)
    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(1)
    except SystemExit as exc:  # --help
        return CommandResult(int(exc.code or 0))
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (NumericalFailure, TrainingFailure) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandResult(2)
    except USER_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandResult(1)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(1)
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandResult(2)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
