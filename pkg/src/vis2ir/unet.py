"""Latent denoising U-Net with cross-attention over conditioning tokens."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 64
    channel_mults: tuple = (1, 2, 4)
    attention_resolutions: tuple = (8, 4)
    latent_size: int = 16
    heads: int = 4
    head_dim: int = 32
    d_model: int = 128
    time_dim: int = 128
    n_roles: int = 4
    seed: int = 0
    # add sqrt(1 - alpha_bar_t) * z_t to the output (needs the schedule's alpha_bars)
    input_skip: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    return emb


def _groups(c):
    return min(8, c)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Queries from feature maps (plus a learned position embedding), keys/values from tokens.

    Pad tokens are excluded with a boolean key mask, so their stored values
    never reach the output.
    """

    def __init__(self, channels, resolution, d_model, heads, head_dim):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.pos = nn.Parameter(torch.randn(resolution * resolution, channels) * 0.02)
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(d_model, inner, bias=False)
        self.to_v = nn.Linear(d_model, inner, bias=False)
        self.out = nn.Linear(inner, channels)

    def forward(self, x, context, key_mask):
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2) + self.pos
        q = self.to_q(h).view(B, H * W, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        # Exact zeros for masked keys, even if a masked value is non-finite.
        v = v.masked_fill(~key_mask[:, None, :, None], 0.0)
        out = (attn @ v).transpose(1, 2).reshape(B, H * W, -1)
        return x + self.out(out).transpose(1, 2).view(B, C, H, W)


class Denoiser(nn.Module):
    """epsilon-prediction U-Net.

    Input is the noisy infrared latent channel-concatenated with the visible
    latent; conditioning tokens enter through cross-attention at the
    configured resolutions.

    With ``alpha_bars`` given and ``cfg.input_skip`` set, the network output is
    added to sqrt(1 - alpha_bar_t) * z_t, the best linear guess of the noise
    when nothing is known about z0.  The output is still the noise estimate;
    the layers only learn the correction, which is small at high t.
    """

    def __init__(self, cfg: DenoiserConfig | None = None, alpha_bars=None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self._build(cfg)
        scale = None
        if cfg.input_skip and alpha_bars is not None:
            scale = torch.sqrt(1.0 - torch.as_tensor(alpha_bars, dtype=torch.float64)).float()
        # derived from the schedule, so not part of the checkpoint
        self.register_buffer("skip_scale", scale, persistent=False)

    def _build(self, cfg):
        temb = cfg.time_dim * 2
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.role_emb = nn.Embedding(cfg.n_roles, cfg.d_model)
        nn.init.normal_(self.role_emb.weight, std=0.02)
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        self.conv_in = nn.Conv2d(2 * cfg.latent_channels, chans[0], 3, padding=1)

        def attn(c, res):
            if res in cfg.attention_resolutions:
                return CrossAttention(c, res, cfg.d_model, cfg.heads, cfg.head_dim)
            return None

        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        res = cfg.latent_size
        cin = chans[0]
        self.resolutions = []
        for i, c in enumerate(chans):
            self.resolutions.append(res)
            self.down.append(ResBlock(cin, c, temb))
            self.down_attn.append(attn(c, res) or nn.Identity())
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
                res //= 2
            cin = c
        self.mid1 = ResBlock(cin, cin, temb)
        self.mid_attn = CrossAttention(cin, res, cfg.d_model, cfg.heads, cfg.head_dim)
        self.mid2 = ResBlock(cin, cin, temb)
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.up.append(ResBlock(cin + c, c, temb))
            self.up_attn.append(attn(c, self.resolutions[i]) or nn.Identity())
            if i > 0:
                self.upsample.append(nn.Conv2d(c, chans[i - 1], 3, padding=1))
                cin = chans[i - 1]
            else:
                cin = c
        self.norm_out = nn.GroupNorm(_groups(cin), cin)
        self.conv_out = nn.Conv2d(cin, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @staticmethod
    def _attend(block, h, ctx, mask):
        return block(h, ctx, mask) if isinstance(block, CrossAttention) else h

    def forward(self, z_t, t, visible_latent, tokens, key_mask, roles):
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(z_t.dtype))
        ctx = tokens + self.role_emb(roles)
        h = self.conv_in(torch.cat([z_t, visible_latent], dim=1))
        skips = []
        for i, (block, at) in enumerate(zip(self.down, self.down_attn)):
            h = self._attend(at, block(h, temb), ctx, key_mask)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), ctx, key_mask), temb)
        for j, (block, at) in enumerate(zip(self.up, self.up_attn)):
            h = self._attend(at, block(torch.cat([h, skips.pop()], dim=1), temb), ctx, key_mask)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        if self.skip_scale is not None:
            out = out + self.skip_scale.to(z_t.dtype)[t].view(-1, 1, 1, 1) * z_t
        return out
