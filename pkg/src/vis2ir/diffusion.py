"""DDPM noise schedule, epsilon-prediction loss and a guided DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ConfigurationError, NumericalFailure


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ConfigurationError("betas must be a non-empty 1-D array")
        if not ((b > 0) & (b < 1)).all():
            raise ConfigurationError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def sqrt_alpha_bars(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars)

    @property
    def sqrt_one_minus_alpha_bars(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1]),
                "kind": "linear"}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError("T must be at least 1")
    if not 0 < beta_start < 1 or not 0 < beta_end < 1 or (T > 1 and not beta_start < beta_end):
        raise ConfigurationError(f"invalid beta range ({beta_start}, {beta_end})")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _coef(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(values, dtype=like.dtype)[t]
    return c.view(-1, *([1] * (like.dim() - 1)))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1 and z0.shape[0] != 1:
        t = t.expand(z0.shape[0])
    if ((t < 0) | (t >= schedule.T)).any():
        raise ValueError(f"timestep outside [0, {schedule.T})")
    return _coef(schedule.sqrt_alpha_bars, t, z0) * z0 + _coef(schedule.sqrt_one_minus_alpha_bars, t, z0) * eps


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise NumericalFailure(f"{what}: {bad} non-finite values")
    return x


@dataclass
class TrainBatch:
    """Precomputed per-sample tensors; everything here is frozen-model output."""

    ir_latent: torch.Tensor  # B x c x h x w (scaled)
    vis_latent: torch.Tensor  # B x c x h x w (scaled)
    obj_feats: torch.Tensor  # B x N_MAX x (d_mask + d_label)
    n_obj: torch.Tensor  # B
    image_emb: torch.Tensor  # B x d_model
    instr_options: torch.Tensor  # B x n_templates x d_model, already for each sample's band

    def __len__(self):
        return self.ir_latent.shape[0]

    def to(self, dtype):
        return TrainBatch(*(t.to(dtype) if t.is_floating_point() else t for t in
                            (self.ir_latent, self.vis_latent, self.obj_feats, self.n_obj,
                             self.image_emb, self.instr_options)))


def training_loss(batch: TrainBatch, schedule: NoiseSchedule, denoiser, conditioner,
                  generator: torch.Generator, cfg_drop_prob: float = 0.05,
                  return_parts: bool = False):
    """MSE between the true and predicted noise for one batch.

    Draws, in order: timesteps, noise, template ids, object-drop and
    instruction-drop coins.  Dropping both gives the unconditional bundle.
    """
    B = len(batch)
    z0 = batch.ir_latent
    t = torch.randint(0, schedule.T, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    tmpl = torch.randint(0, batch.instr_options.shape[1], (B,), generator=generator)
    drop_obj = torch.rand(B, generator=generator) < cfg_drop_prob
    drop_instr = torch.rand(B, generator=generator) < cfg_drop_prob
    instr = batch.instr_options[torch.arange(B), tmpl]
    tokens, mask, roles = conditioner.build_tokens(
        batch.obj_feats, batch.n_obj, batch.image_emb, instr,
        drop_obj=drop_obj, drop_instr=drop_instr, null=drop_obj & drop_instr)
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat = denoiser(z_t, t, batch.vis_latent, tokens, mask, roles)
    loss = F.mse_loss(eps_hat, eps)
    check_finite(loss.detach(), "training loss")
    if return_parts:
        return loss, {"t": t, "eps": eps, "z_t": z_t, "eps_hat": eps_hat}
    return loss


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced, strictly decreasing timesteps from T-1 down to 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    ts = np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(int))
    return ts[::-1].copy()


@torch.no_grad()
def ddim_sample(denoiser, schedule: NoiseSchedule, noise, vis_latent, cond, null_cond=None,
                steps: int = 50, guidance_scale: float = 1.0, skip_unit_guidance: bool = True):
    """Deterministic DDIM reverse trajectory with classifier-free guidance.

    ``cond`` and ``null_cond`` are ``(tokens, key_mask, roles)`` triples.
    With ``guidance_scale == 1`` the guided prediction equals the conditional
    one, so the unconditional branch is skipped unless ``skip_unit_guidance``
    is False.
    """
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be non-negative")
    ab = schedule.alpha_bars
    z = noise
    B = z.shape[0]
    ts = ddim_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        tt = torch.full((B,), int(t), dtype=torch.long)
        eps = denoiser(z, tt, vis_latent, *cond)
        if guidance_scale != 1.0 or not skip_unit_guidance:
            if null_cond is None:
                raise ValueError("guidance needs the unconditional bundle")
            eps_null = denoiser(z, tt, vis_latent, *null_cond)
            eps = eps_null + guidance_scale * (eps - eps_null)
        check_finite(eps, f"noise prediction at t={t}")
        a_t = float(ab[t])
        a_prev = float(ab[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        x0 = (z - (1 - a_t) ** 0.5 * eps) / a_t ** 0.5
        z = a_prev ** 0.5 * x0 + (1 - a_prev) ** 0.5 * eps
    return z
