"""Small convolutional autoencoder mapping 3-channel images to a 4x-downsampled latent.

Infrared images go through the same codec as visible ones by replicating the
single channel; decoding back to infrared averages the three output channels.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Encoder(nn.Module):
    def __init__(self, channels=(32, 64, 128), latent_channels=4):
        super().__init__()
        c0, c1, c2 = channels
        self.stage0 = nn.Sequential(_conv(3, c0), nn.SiLU())
        self.stage1 = nn.Sequential(_conv(c0, c1, 2), nn.SiLU(), _conv(c1, c1), nn.SiLU())
        self.stage2 = nn.Sequential(_conv(c1, c2, 2), nn.SiLU(), _conv(c2, c2), nn.SiLU())
        self.to_latent = nn.Conv2d(c2, latent_channels, 1)

    def forward(self, x, return_features=False):
        f0 = self.stage0(x)
        f1 = self.stage1(f0)
        f2 = self.stage2(f1)
        z = self.to_latent(f2)
        return (z, [f0, f1, f2]) if return_features else z


class Decoder(nn.Module):
    def __init__(self, channels=(32, 64, 128), latent_channels=4):
        super().__init__()
        c0, c1, c2 = channels
        self.stage2 = nn.Sequential(_conv(latent_channels, c2), nn.SiLU(), _conv(c2, c2), nn.SiLU())
        self.stage1 = nn.Sequential(_conv(c2, c1), nn.SiLU(), _conv(c1, c1), nn.SiLU())
        self.stage0 = nn.Sequential(_conv(c1, c0), nn.SiLU(), _conv(c0, 3))

    def forward(self, z):
        h = self.stage2(z)
        h = self.stage1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.stage0(F.interpolate(h, scale_factor=2, mode="nearest"))
        return torch.sigmoid(h)


class LatentCodec(nn.Module):
    """Frozen-after-pretraining image <-> latent codec.

    ``latent_scale`` is fitted after pretraining so that scaled latents have
    roughly unit variance, which is what the diffusion schedule expects.
    """

    downsample = 4

    def __init__(self, image_size=(64, 64), channels=(32, 64, 128), latent_channels=4):
        super().__init__()
        self.image_size = tuple(image_size)
        self.channels = tuple(channels)
        self.latent_channels = latent_channels
        self.encoder = Encoder(channels, latent_channels)
        self.decoder = Decoder(channels, latent_channels)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    @property
    def latent_shape(self):
        H, W = self.image_size
        return (self.latent_channels, H // self.downsample, W // self.downsample)

    def config(self) -> dict:
        return {"image_size": list(self.image_size), "channels": list(self.channels),
                "latent_channels": self.latent_channels}

    def _check(self, x):
        if tuple(x.shape[-2:]) != self.image_size:
            raise ValueError(f"image size {tuple(x.shape[-2:])} does not match codec {self.image_size}")

    def encode(self, x):
        self._check(x)
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def encode_scaled(self, x):
        return self.encode(x) * self.latent_scale

    def decode_scaled(self, z):
        return self.decode(z / self.latent_scale)

    def features(self, x):
        """Intermediate encoder activations, used as the metric feature extractor."""
        self._check(x)
        z, feats = self.encoder(x, return_features=True)
        return feats + [z]

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def version(self) -> str:
        """Content hash of the codec weights; identifies the metric extractor."""
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
        return "codec-" + h.hexdigest()[:12]


def to_tensor(images) -> torch.Tensor:
    """H x W x C (or batch of them) numpy images in [0,1] -> N x 3 x H x W float32.

    Single-channel images are replicated to three channels.
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[..., None] if arr.shape[-1] not in (1, 3) else arr[None]
    if arr.ndim != 4 or arr.shape[-1] not in (1, 3):
        raise ConfigurationError(f"cannot interpret image array of shape {np.shape(images)}")
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    if t.shape[1] == 1:
        t = t.expand(-1, 3, -1, -1)
    return t.contiguous()


def to_gray(decoded: torch.Tensor) -> torch.Tensor:
    """N x 3 x H x W decoder output -> N x H x W infrared intensities."""
    return decoded.mean(dim=1).clamp(0.0, 1.0)
