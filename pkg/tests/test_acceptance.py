"""Acceptance criteria 1-8.

Each test records one pass/fail line (printed at the end of the pytest
session) and then asserts on it.  Criteria 5-7 need trained models; those
are built once and cached (see acceptance_support), which takes a few hours
on a single CPU core the first time.
"""

import csv
import math
import time

import numpy as np
import pytest
import torch

import acceptance_support as acc
import test_diffusion as td
from test_metrics import brute_ssim

from vis2ir.annotation import (AnnotationSet, ObjectAnnotation, annotate_oracle, annotation_to_dict,
                               load_annotation_set, save_annotation_set, tight_box)
from vis2ir.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, module_blobs, save_checkpoint
from vis2ir.conditioning import COND_MODES, Conditioner, EmbedderConfig
from vis2ir.dataset import generate_dataset, load_split, make_sample
from vis2ir.diffusion import build_schedule, q_sample
from vis2ir.experiments import (ABLATION_COLUMNS, apply_intensity_baseline, fit_intensity_baseline,
                                items_from_samples, person_contrast, translate_items)
from vis2ir.instructions import render_instruction
from vis2ir.metrics import fid, psnr, ssim
from vis2ir.scene import BANDS, DEFAULT_TABLE, N_MAX, GeneratorConfig, render_visible, sample_scene
from vis2ir.training import (build_model, model_from_checkpoint, prepare_all, subset, train_translation,
                             validation_loss)
from vis2ir.unet import Denoiser, DenoiserConfig

from conftest import small_codec, small_train_config

pytestmark = pytest.mark.acceptance


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _exact_gaussian(rng, n, mu, cov):
    """Samples whose sample mean and (n-1) covariance equal ``mu`` and ``cov`` exactly."""
    d = len(mu)
    x = rng.standard_normal((n, d))
    x -= x.mean(axis=0)
    white = x @ np.linalg.inv(np.linalg.cholesky(x.T @ x / (n - 1))).T
    return white @ np.linalg.cholesky(cov).T + mu


# 1 -----------------------------------------------------------------------

def test_criterion_1_metric_oracles():
    t0 = time.time()
    with acc.criterion(1):
        rng = np.random.default_rng(11)
        d, n = 8, 400
        errs = []
        mu = rng.standard_normal(d)
        a = _exact_gaussian(rng, n, np.zeros(d), np.eye(d))
        b = _exact_gaussian(rng, n, mu, np.eye(d))
        errs.append(abs(fid(a, b) - float(mu @ mu)))
        for sa, sb in ((1.0, 4.0), (0.25, 2.0), (3.0, 3.0), (0.5, 0.02)):
            a = _exact_gaussian(rng, n, np.zeros(d), sa * np.eye(d))
            b = _exact_gaussian(rng, n, np.zeros(d), sb * np.eye(d))
            errs.append(abs(fid(a, b) - d * (sa + sb - 2 * math.sqrt(sa * sb))))
        fid_err = max(errs)

        ssim_err = psnr_err = 0.0
        for _ in range(50):
            x, y = rng.random((32, 32)), rng.random((32, 32))
            if rng.random() < 0.5:
                y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
            ssim_err = max(ssim_err, abs(ssim(x, y) - brute_ssim(x, y)))
            direct = 10 * math.log10(1.0 / float(np.mean((x - y) ** 2)))
            psnr_err = max(psnr_err, abs(psnr(x, y) - direct))
        elapsed = time.time() - t0
        ok = fid_err <= 1e-6 and ssim_err <= 1e-9 and psnr_err <= 1e-9 and elapsed < 60
        acc.record(1, ok, f"max err FID {fid_err:.1e} SSIM {ssim_err:.1e} PSNR {psnr_err:.1e}, {elapsed:.0f}s")
        assert ok


# 2 -----------------------------------------------------------------------

def _square(label, x, y, s):
    m = np.zeros((64, 64), bool)
    m[y:y + s, x:x + s] = True
    return ObjectAnnotation(label, m, tight_box(m))


def test_criterion_2_conditioning_contract():
    t0 = time.time()
    with acc.criterion(2):
        cond = Conditioner(EmbedderConfig(), small_codec())
        vis = render_visible(sample_scene(0, GeneratorConfig()))
        image_emb = cond.embed_visible(vis)
        instr = cond.embed_instruction(render_instruction(0, "long"))

        def bundle(ann):
            with torch.no_grad():
                return cond.assemble_conditioning(ann, image_emb, instr)

        # shapes and role layout
        layouts_ok = True
        for n in (0, 1, 3, 16, 20):
            items = [_square(("car", "person", "tree")[i % 3], (i % 5) * 12, (i // 5) * 12, 3 + i % 9)
                     for i in range(n)]
            b = bundle(AnnotationSet((64, 64), items))
            k = max(1, min(n, N_MAX))
            expected = []
            for role in ("object", "image", "instruction"):
                expected += [role] * k + ["pad"] * (N_MAX - k)
            layouts_ok &= tuple(b.tokens.shape) == (3 * N_MAX, 128) and b.token_roles == expected

        # permuting annotations permutes object slots only
        items = [_square("car", 2, 2, 6), _square("person", 20, 5, 9), _square("tree", 40, 40, 12),
                 _square("sky", 5, 40, 7), _square("road", 40, 2, 10)]
        perm = np.random.default_rng(3).permutation(len(items))
        a = bundle(AnnotationSet((64, 64), items))
        p = bundle(AnnotationSet((64, 64), [items[i] for i in perm]))
        k = len(items)
        perm_tok_err = float((p.tokens[:k] - a.tokens[torch.as_tensor(perm)]).abs().max())
        rest_same = torch.equal(p.tokens[k:], a.tokens[k:]) and p.token_roles == a.token_roles

        # denoiser output: invariant to the permutation and blind to masked slots (float64)
        den = Denoiser(DenoiserConfig()).double().eval()
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            den.conv_out.weight.copy_(torch.randn(den.conv_out.weight.shape, generator=g, dtype=torch.float64) * 0.1)
        z = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)
        v = torch.randn(1, 4, 16, 16, generator=g, dtype=torch.float64)

        def run(b, tokens=None):
            tok = (b.tokens if tokens is None else tokens).double()[None]
            with torch.no_grad():
                return den(z, torch.tensor([250]), v, tok, b.key_mask[None], b.role_ids[None])

        base = run(a)
        perm_out_err = float((run(p) - base).abs().max())
        junk = a.tokens.double().clone()
        pad = ~a.key_mask
        junk[pad] = torch.randn(int(pad.sum()), 128, generator=g, dtype=torch.float64) * 1e3
        mask_err = float((run(a, junk) - base).abs().max())
        elapsed = time.time() - t0
        ok = (layouts_ok and perm_tok_err <= 1e-6 and rest_same and perm_out_err <= 1e-6 and mask_err <= 1e-6
              and elapsed < 60)
        acc.record(2, ok, f"layouts {'ok' if layouts_ok else 'WRONG'}, permuted object tokens err {perm_tok_err:.1e}, "
                          f"other slots {'identical' if rest_same else 'CHANGED'}, denoiser permutation err "
                          f"{perm_out_err:.1e}, masked-slot err {mask_err:.1e}, {elapsed:.0f}s")
        assert ok


# 3 -----------------------------------------------------------------------

def test_criterion_3_freeze_contract():
    t0 = time.time()
    with acc.criterion(3):
        codec = acc.load_codec()
        prep = time.time() - t0  # cached codec build is not part of this criterion
        cfg = acc.TrainConfig(dataset_dirs=[(str(acc.long_dataset()), "long")], max_steps=100, batch_size=4,
                              max_samples_per_dataset=64, **{k: v for k, v in acc.TRANSLATION.items()
                                                              if k not in ("batch_size",)})
        init = build_model(cfg, codec)

        def frozen(m):
            return {**module_blobs("codec", m.codec), **module_blobs("embedders", m.conditioner.frozen)}

        def trainable(m):
            return {**module_blobs("denoiser", m.denoiser), **module_blobs("projector", m.conditioner.projector)}

        before_frozen = {k: v.tobytes() for k, v in frozen(init).items()}
        before_train = {k: v.tobytes() for k, v in trainable(init).items()}
        res = train_translation(cfg, codec)
        after_frozen = {k: v.tobytes() for k, v in frozen(res.model).items()}
        after_train = {k: v.tobytes() for k, v in trainable(res.model).items()}
        same = before_frozen == after_frozen
        changed = {g: sum(before_train[k] != after_train[k] for k in before_train if k.startswith(g))
                   for g in ("denoiser", "projector")}
        totals = {g: sum(k.startswith(g) for k in before_train) for g in changed}
        elapsed = time.time() - t0 - prep
        ok = len(res.losses) == 100 and same and all(changed.values()) and elapsed < 300
        acc.record(3, ok, f"{len(before_frozen)} frozen tensors {'byte-identical' if same else 'CHANGED'}; "
                          f"changed tensors: denoiser {changed['denoiser']}/{totals['denoiser']}, "
                          f"projector {changed['projector']}/{totals['projector']}; {elapsed:.0f}s")
        assert ok


# 4 -----------------------------------------------------------------------

def test_criterion_4_diffusion_correctness(tiny_dataset, tiny_model, tiny_samples):
    with acc.criterion(4):
        s = build_schedule()
        ab = np.asarray(s.alpha_bars, dtype=np.float64)
        monotone = bool(np.all(np.diff(ab) < 0) and 0 < ab[-1] < ab[0] < 1)

        # one variance statistic over 10^5 scalar draws per timestep
        n = 100_000
        g = torch.Generator().manual_seed(1)
        z0 = torch.full((n,), 0.7, dtype=torch.float64)
        worst_sigma = 0.0
        for t in (0, 250, 999):
            zt = q_sample(z0, torch.full((n,), t), torch.randn(n, generator=g, dtype=torch.float64), s)
            target = 1 - ab[t]
            se = target * np.sqrt(2 / (n - 1))  # std. error of a gaussian sample variance
            worst_sigma = max(worst_sigma, abs(float(zt.var()) - target) / se)

        grads_ok = True
        try:
            td.test_gradients_match_finite_differences(tiny_model, tiny_samples)
        except AssertionError:
            grads_ok = False

        codec = small_codec()
        data = subset(prepare_all(build_model(small_train_config(tiny_dataset), codec), tiny_samples),
                      torch.arange(10))
        cfg = small_train_config(tiny_dataset, epochs=200, batch_size=10, learning_rate=2e-3, cfg_drop_prob=0.0)
        initial = validation_loss(build_model(cfg, codec), data, seed=3, repeats=8)
        res = train_translation(cfg, codec, data=data)
        final = validation_loss(res.model, data, seed=3, repeats=8)
        halved = len(res.losses) <= 200 and final <= 0.5 * initial
        ok = monotone and worst_sigma <= 3 and grads_ok and halved
        acc.record(4, ok, f"alpha_bar monotone {monotone}; q_sample worst deviation {worst_sigma:.2f} sigma; "
                          f"10 finite-difference gradients {'within 1e-3' if grads_ok else 'OFF'}; "
                          f"overfit loss {initial:.3f} -> {final:.3f} in {len(res.losses)} steps")
        assert ok


# 5 -----------------------------------------------------------------------

def test_criterion_5_desk_scale_learning():
    with acc.criterion(5):
        t0 = time.time()
        run = acc.trained_model("learning", acc.learning_config())
        model = model_from_checkpoint(load_checkpoint(run / "final.ckpt"))
        t_eval = time.time()
        train = load_split(acc.long_dataset(), "train")
        coeffs = fit_intensity_baseline(train)
        items = items_from_samples(load_split(acc.long_dataset(), "test"))
        preds = translate_items(model, items, "long", **acc.SAMPLER, seed=0)
        contrasts = [person_contrast(p, it.annotations) for p, it in zip(preds, items)]
        frac_a = np.mean([c is not None and c >= 0.15 for c in contrasts])
        wins = []
        for p, it in zip(preds, items):
            base = apply_intensity_baseline(it.visible, coeffs)
            wins.append(psnr(p, it.infrared) > psnr(base, it.infrared) and ssim(p, it.infrared) > ssim(base, it.infrared))
        frac_b = float(np.mean(wins))
        runtime = acc.total_build_seconds("data-long", "codec", "learning") + time.time() - t_eval
        ok = len(items) == 200 and frac_a >= 0.8 and frac_b >= 0.7 and runtime <= 2 * 3600
        valid = [c for c in contrasts if c is not None]
        acc.record(5, ok, f"(a) person contrast >= 0.15 on {frac_a:.0%} of {len(items)} scenes "
                          f"(median {np.median(valid):.3f}); (b) beats intensity baseline on PSNR and SSIM "
                          f"on {frac_b:.0%}; runtime {runtime / 60:.0f} min")
        assert ok


# 6 -----------------------------------------------------------------------

def test_criterion_6_ablation_ordering():
    with acc.criterion(6):
        out = acc.ablation_table()
        t_eval = time.time()
        rows = list(csv.DictReader((out / "ablation.csv").open()))
        per_seed = list(csv.DictReader((out / "ablation_per_seed.csv").open()))
        modes_ok = [r["mode"] for r in rows] == list(COND_MODES) and tuple(rows[0]) == ABLATION_COLUMNS
        loss = {(r["mode"], int(r["seed"])): float(r["val_loss"]) for r in per_seed}
        seeds = acc.ABLATION["seeds"]
        wins = sum(loss[("text+masks", s)] < loss[("none", s)] for s in seeds)
        runtime = acc.total_build_seconds("data-long", "codec", "ablation") + time.time() - t_eval
        ok = modes_ok and len(seeds) == 3 and wins >= 2 and runtime <= 6 * 3600
        pairs = ", ".join(f"{loss[('text+masks', s)]:.4f}/{loss[('none', s)]:.4f}" for s in seeds)
        acc.record(6, ok, f"text+masks below none on {wins}/3 seeds (val loss {pairs}); "
                          f"{len(rows)}-mode CSV {'ok' if modes_ok else 'WRONG'}; runtime {runtime / 60:.0f} min")
        assert ok


# 7 -----------------------------------------------------------------------

def test_criterion_7_multiband_prompting():
    with acc.criterion(7):
        run = acc.trained_model("multiband", acc.multiband_config())
        model = model_from_checkpoint(load_checkpoint(run / "final.ckpt"))
        t_eval = time.time()
        n = acc.BAND_EVAL.splits["test"]
        gts, items = {}, []
        for i in range(n):
            for band in BANDS:
                _, sample = make_sample(acc.BAND_EVAL, "test", i, band, DEFAULT_TABLE)
                gts[(i, band)] = sample.infrared[:, :, 0]
            items.append(items_from_samples([sample])[0])
        preds = {band: translate_items(model, items, band, **acc.SAMPLER, seed=0) for band in BANDS}

        def rmse(a, b):
            return float(np.sqrt(np.mean((a - b) ** 2)))

        hits = np.zeros((n, len(BANDS)), bool)
        for i in range(n):
            for j, band in enumerate(BANDS):
                d = {gb: rmse(preds[band][i], gts[(i, gb)]) for gb in BANDS}
                hits[i, j] = all(d[band] < d[o] for o in BANDS if o != band)
        scene_rate = float(hits.all(axis=1).mean())
        per_band = ", ".join(f"{b} {hits[:, j].mean():.0%}" for j, b in enumerate(BANDS))
        runtime = (acc.total_build_seconds("data-band-near", "data-band-mid", "data-band-long", "data-long", "codec",
                                           "multiband") + time.time() - t_eval)
        ok = scene_rate >= 0.8 and runtime <= 3 * 3600
        acc.record(7, ok, f"all three band requests closest to their own band on {scene_rate:.0%} of {n} scenes "
                          f"(per request: {per_band}); runtime {runtime / 60:.0f} min")
        assert ok


# 8 -----------------------------------------------------------------------

def test_criterion_8_serialization_and_determinism(tmp_path):
    t0 = time.time()
    with acc.criterion(8):
        cfg = GeneratorConfig(seed=8, splits={"train": 24, "test": 6}, bands={"near": 1, "mid": 1, "long": 1})
        generate_dataset(cfg, tmp_path / "a")
        generate_dataset(cfg, tmp_path / "b")
        data_same = _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

        ann_ok = True
        for i, path in enumerate(sorted((tmp_path / "a" / "train" / "annotations").glob("*.json"))):
            ann = load_annotation_set(path)
            save_annotation_set(ann, tmp_path / f"ann{i}.json")
            ann_ok &= (tmp_path / f"ann{i}.json").read_bytes() == path.read_bytes()
            spec_ann = annotate_oracle(sample_scene(i, GeneratorConfig()))
            save_annotation_set(spec_ann, tmp_path / "x.json")
            ann_ok &= load_annotation_set(tmp_path / "x.json") == spec_ann
            ann_ok &= annotation_to_dict(load_annotation_set(tmp_path / "x.json")) == annotation_to_dict(spec_ann)

        t_codec = time.time()
        codec = acc.load_codec()
        prep = time.time() - t_codec  # cached codec build is not part of this criterion
        tcfg = acc.TrainConfig(dataset_dirs=[(str(tmp_path / "a"), None)], max_steps=20, batch_size=4,
                               base_channels=acc.TRANSLATION["base_channels"],
                               learning_rate=acc.TRANSLATION["learning_rate"])
        r1 = train_translation(tcfg, codec, tmp_path / "run1")
        r2 = train_translation(tcfg, codec, tmp_path / "run2")
        l1, l2 = np.array([v for _, v in r1.losses]), np.array([v for _, v in r2.losses])
        loss_diff = float(np.max(np.abs(l1 - l2)))
        raw = (tmp_path / "run1" / "final.ckpt").read_bytes()
        ck = load_checkpoint(tmp_path / "run1" / "final.ckpt")
        save_checkpoint(ck, tmp_path / "again.ckpt")
        ckpt_same = (tmp_path / "again.ckpt").read_bytes() == raw == encode_checkpoint(decode_checkpoint(raw))
        restored = model_from_checkpoint(ck)
        weights_same = all(v.tobytes() == restored_v.tobytes() for (k, v), restored_v in zip(
            sorted(module_blobs("denoiser", r1.model.denoiser).items()),
            [b for _, b in sorted(module_blobs("denoiser", restored.denoiser).items())]))
        elapsed = time.time() - t0 - prep
        ok = (data_same and ann_ok and ckpt_same and weights_same and len(l1) == 20 and loss_diff <= 1e-6
              and elapsed < 600)
        acc.record(8, ok, f"dataset {'byte-identical' if data_same else 'DIFFERS'}, annotations "
                          f"{'round-trip' if ann_ok else 'DIFFER'}, checkpoint {'byte-identical' if ckpt_same else 'DIFFERS'}"
                          f", restored weights {'equal' if weights_same else 'DIFFER'}, repeated loss logs max diff "
                          f"{loss_diff:.1e}; {elapsed:.0f}s")
        assert ok


# properties that need the trained acceptance artifacts ----------------------

def test_codec_reconstruction_on_heldout_images():
    from vis2ir.training import _collect_images, reconstruction_rmse

    codec = acc.load_codec()
    test = load_split(acc.long_dataset(), "test")
    vis = reconstruction_rmse(codec, np.stack([s.visible for s in test]))
    ir = reconstruction_rmse(codec, np.stack([np.repeat(s.infrared, 3, axis=2) for s in test]))
    assert vis.mean() < 0.05 and ir.mean() < 0.05, (vis.mean(), ir.mean())
    # bands the codec never saw in training
    for band, path in acc.band_datasets().items():
        other = reconstruction_rmse(codec, _collect_images([path], "train", 100))
        assert other.mean() < 0.05, (band, other.mean())
    black = reconstruction_rmse(codec, np.zeros((1, 64, 64, 3)))
    assert np.isfinite(black).all() and black[0] < 0.1, black


def test_band_responsiveness_of_trained_model():
    run = acc.trained_model("multiband", acc.multiband_config())
    model = model_from_checkpoint(load_checkpoint(run / "final.ckpt"))
    items = [items_from_samples([make_sample(acc.BAND_EVAL, "test", i, "long", DEFAULT_TABLE)[1]])[0]
             for i in range(10)]
    long_ = translate_items(model, items, "long", **acc.SAMPLER, seed=0)
    near = translate_items(model, items, "near", **acc.SAMPLER, seed=0)
    diffs = np.abs(long_ - near).mean(axis=(1, 2))
    assert np.all(diffs > 0.02), diffs
