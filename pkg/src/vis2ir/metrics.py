"""FID, perceptual distance, SSIM and PSNR.

FID and the perceptual distance use the frozen codec encoder as their feature
extractor, so absolute values are only comparable between runs that share
the same extractor version (recorded in every report).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .codec import LatentCodec, to_tensor
from .errors import ConfigurationError, NumericalFailure
from .io import atomic_write_text, read_png

SCHEMA = "fvita-metrics-1"
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_CONSTANTS = {"K1": 0.01, "K2": 0.03, "window": 11, "sigma": 1.5, "data_range": 1.0}


def to_luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    return img


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        a, b = to_luminance(a), to_luminance(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(20.0 * np.log10(max_val / np.sqrt(mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim(a, b, K1: float = 0.01, K2: float = 0.03, win: int = 11, sigma: float = 1.5,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained gaussian windows (no padding)."""
    a, b = _pair(a, b)
    a, b = to_luminance(a), to_luminance(b)
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    g = gaussian_window(win, sigma)
    C1, C2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def _check_version(extractor: LatentCodec, expected_version):
    if expected_version is not None and extractor.version() != expected_version:
        raise ConfigurationError(f"feature extractor {extractor.version()} does not match report "
                                 f"extractor {expected_version}")


@torch.no_grad()
def perceptual_distances(a, b, extractor: LatentCodec, expected_version: str | None = None) -> np.ndarray:
    """Per-pair distance over batches of images (N x H x W [x C])."""
    _check_version(extractor, expected_version)
    fa = extractor.features(to_tensor(a).float())
    fb = extractor.features(to_tensor(b).float())
    per_layer = []
    for x, y in zip(fa, fb):
        x = x / (x.norm(dim=1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=1, keepdim=True) + 1e-10)
        per_layer.append(((x - y) ** 2).mean(dim=(1, 2, 3)))
    return torch.stack(per_layer).mean(dim=0).double().numpy()


def perceptual_distance(a, b, extractor: LatentCodec, expected_version: str | None = None) -> float:
    """Mean over encoder layers of the MSE between channel-normalized features."""
    if np.array_equal(np.asarray(a), np.asarray(b)):
        _check_version(extractor, expected_version)
        return 0.0
    return float(perceptual_distances(np.asarray(a)[None], np.asarray(b)[None], extractor, expected_version)[0])


@torch.no_grad()
def extract_features(images, extractor: LatentCodec, chunk: int = 64) -> np.ndarray:
    """Spatially pooled encoder activations, concatenated across layers: N x d."""
    x = to_tensor(images)
    out = []
    for i in range(0, len(x), chunk):
        feats = extractor.features(x[i:i + chunk])
        out.append(torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1))
    return torch.cat(out).double().numpy()


def _sqrt_trace_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((A B)^(1/2)) via the symmetric product A^(1/2) B A^(1/2)."""
    wa, va = np.linalg.eigh((cov_a + cov_a.T) / 2)
    if wa.min() < -1e-8:
        raise NumericalFailure(f"covariance has eigenvalue {wa.min():.3g} < -1e-8")
    sqrt_a = (va * np.sqrt(np.clip(wa, 0, None))) @ va.T
    m = sqrt_a @ cov_b @ sqrt_a
    w = np.linalg.eigvalsh((m + m.T) / 2)
    if not np.isfinite(w).all():
        raise NumericalFailure("matrix square root did not converge")
    if w.min() < -1e-8:
        raise NumericalFailure(f"product has eigenvalue {w.min():.3g} < -1e-8")
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def fid_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.asarray(mu_a, dtype=np.float64), np.asarray(mu_b, dtype=np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError("feature dimension mismatch")
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
                - 2 * _sqrt_trace_product(cov_a, cov_b))
    return max(val, 0.0)


def feature_moments(features) -> tuple:
    f = np.asarray(features, dtype=np.float64)
    mu = f.mean(axis=0)
    d = f - mu
    cov = d.T @ d / max(len(f) - 1, 1)
    return mu, cov


def fid(features_a, features_b) -> float:
    """Frechet distance between gaussian fits of two N x d feature sets."""
    fa, fb = np.asarray(features_a), np.asarray(features_b)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dimension mismatch: {fa.shape} vs {fb.shape}")
    d = fa.shape[1]
    if min(len(fa), len(fb)) <= d:
        warnings.warn(f"FID with {min(len(fa), len(fb))} samples in {d} dims: covariance is rank-deficient",
                      stacklevel=2)
    return fid_from_moments(*feature_moments(fa), *feature_moments(fb))


@dataclass
class MetricReport:
    fid: float
    lpips: float
    ssim: float
    psnr: float
    n_pairs: int
    extractor_version: str
    ssim_constants: dict

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("a report needs at least one pair")

    def to_json(self) -> str:
        d = {"schema": SCHEMA, **asdict(self)}
        if math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        if d.pop("schema", None) != SCHEMA:
            raise ConfigurationError("not a metrics report")
        if d["psnr"] == "inf":
            d["psnr"] = math.inf
        return cls(**d)


def compute_report(preds, gts, extractor: LatentCodec) -> MetricReport:
    """Metrics over paired image stacks (N x H x W or N x H x W x C)."""
    preds = [to_luminance(p) for p in preds]
    gts = [to_luminance(g) for g in gts]
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many (and at least one) predictions and references")
    psnrs = [psnr(p, g) for p, g in zip(preds, gts)]
    ssims = [ssim(p, g) for p, g in zip(preds, gts)]
    lp = perceptual_distances(np.stack(preds), np.stack(gts), extractor)
    lp[[np.array_equal(p, g) for p, g in zip(preds, gts)]] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = fid(extract_features(np.stack(preds), extractor), extract_features(np.stack(gts), extractor))
    return MetricReport(
        fid=f,
        lpips=float(np.mean(lp)),
        ssim=float(np.mean(ssims)),
        psnr=float(np.mean(psnrs)),
        n_pairs=len(preds),
        extractor_version=extractor.version(),
        ssim_constants=dict(SSIM_CONSTANTS),
    )


def evaluate_pairs(pred_dir, gt_dir, extractor: LatentCodec, out_path=None) -> MetricReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_ids = {p.stem for p in pred_dir.glob("*.png")}
    gt_ids = {p.stem for p in gt_dir.glob("*.png")}
    if pred_ids != gt_ids or not pred_ids:
        missing = sorted(gt_ids - pred_ids)
        extra = sorted(pred_ids - gt_ids)
        raise ConfigurationError(f"image sets differ: missing predictions {missing}, unexpected {extra}")
    ids = sorted(pred_ids)
    report = compute_report([read_png(pred_dir / f"{i}.png") for i in ids],
                            [read_png(gt_dir / f"{i}.png") for i in ids], extractor)
    if out_path is not None:
        atomic_write_text(out_path, report.to_json())
    return report
