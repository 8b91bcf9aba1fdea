"""The assembled translation model: codec + conditioner + denoiser + schedule."""

from __future__ import annotations

import numpy as np
import torch

from .codec import LatentCodec, to_gray, to_tensor
from .conditioning import CondFlags, Conditioner, ConditioningBundle
from .diffusion import NoiseSchedule, TrainBatch, build_schedule, check_finite, ddim_sample
from .instructions import BANK_SIZE, render_instruction
from .scene import BANDS
from .unet import Denoiser


class TranslationModel:
    def __init__(self, codec: LatentCodec, conditioner: Conditioner, denoiser: Denoiser,
                 schedule: NoiseSchedule | None = None, flags: CondFlags = CondFlags()):
        self.codec = codec.freeze()
        self.conditioner = conditioner
        object.__setattr__(conditioner, "codec", codec)
        self.denoiser = denoiser
        self.schedule = schedule or build_schedule()
        self.flags = flags
        self._instr_cache = {}

    def trainable_parameters(self):
        return list(self.denoiser.parameters()) + list(self.conditioner.projector.parameters())

    def instruction_options(self, band: str) -> torch.Tensor:
        """Embeddings of every template rendered for ``band``: BANK_SIZE x d_model."""
        if band not in self._instr_cache:
            rows = [self.conditioner.embed_instruction(render_instruction(i, band)) for i in range(BANK_SIZE)]
            self._instr_cache[band] = torch.from_numpy(np.stack(rows))
        return self._instr_cache[band]

    @torch.no_grad()
    def encode(self, images, chunk: int = 64) -> torch.Tensor:
        x = to_tensor(images)
        return torch.cat([self.codec.encode_scaled(x[i:i + chunk]) for i in range(0, len(x), chunk)])

    @torch.no_grad()
    def decode_infrared(self, z: torch.Tensor) -> np.ndarray:
        return to_gray(self.codec.decode_scaled(z)).numpy()

    def object_batch(self, annotations) -> tuple:
        feats, counts = zip(*(self.conditioner.object_inputs(a, self.flags) for a in annotations))
        return torch.from_numpy(np.stack(feats)), torch.tensor(counts, dtype=torch.long)

    @torch.no_grad()
    def prepare_batch(self, samples) -> TrainBatch:
        """Run every frozen component once over a list of PairedSample."""
        vis = np.stack([s.visible for s in samples])
        ir = np.stack([s.infrared for s in samples])
        obj, n = self.object_batch([s.annotations for s in samples])
        return TrainBatch(
            ir_latent=self.encode(ir),
            vis_latent=self.encode(vis),
            obj_feats=obj,
            n_obj=n,
            image_emb=torch.from_numpy(np.atleast_2d(self.conditioner.embed_visible(vis))),
            instr_options=torch.stack([self.instruction_options(s.band) for s in samples]),
        )

    def predict_noise(self, z_t, t, visible_latent, cond: ConditioningBundle) -> torch.Tensor:
        """Single-bundle noise prediction, batched over ``z_t``."""
        B = z_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(B)
        tokens = cond.tokens.expand(B, *cond.tokens.shape)
        mask = cond.key_mask.expand(B, -1)
        roles = cond.role_ids.expand(B, -1)
        with torch.no_grad():
            out = self.denoiser(z_t, t, visible_latent, tokens, mask, roles)
        return check_finite(out, "predict_noise")

    @torch.no_grad()
    def translate(self, visible, annotations, bands, template_ids, steps: int = 50,
                  guidance_scale: float = 3.0, seeds=None, skip_unit_guidance: bool = True) -> np.ndarray:
        """Batched translation; returns B x H x W infrared images in [0, 1].

        The initial latent of item ``i`` depends only on ``seeds[i]``, so
        results do not depend on how a set is batched.
        """
        visible = np.asarray(visible, dtype=np.float32)
        B = len(visible)
        seeds = list(range(B)) if seeds is None else list(seeds)
        for b in bands:
            if b not in BANDS:
                raise ValueError(f"unknown band {b!r}")
        vis_lat = self.encode(visible)
        obj, n = self.object_batch(annotations)
        img = torch.from_numpy(np.atleast_2d(self.conditioner.embed_visible(visible)))
        instr = torch.stack([self.instruction_options(b)[k] for b, k in zip(bands, template_ids)])
        cond = self.conditioner.build_tokens(obj, n, img, instr)
        null = self.conditioner.null_tokens(B)
        shape = vis_lat.shape[1:]
        noise = torch.stack([torch.randn(shape, generator=torch.Generator().manual_seed(int(s))) for s in seeds])
        self.denoiser.eval()
        z = ddim_sample(self.denoiser, self.schedule, noise, vis_lat, cond, null, steps=steps,
                        guidance_scale=guidance_scale, skip_unit_guidance=skip_unit_guidance)
        return self.decode_infrared(z)

    def sample_translation(self, visible, band, template_id, annotations, steps: int = 50,
                           guidance_scale: float = 3.0, seed: int = 0) -> np.ndarray:
        """One visible image -> H x W x 1 infrared image."""
        out = self.translate(np.asarray(visible)[None], [annotations], [band], [template_id],
                             steps=steps, guidance_scale=guidance_scale, seeds=[seed])
        return out[0][:, :, None]
