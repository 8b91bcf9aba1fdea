"""Cross-attention conditioning tokens.

Frozen embedders turn masks, object labels, the instruction and the visible
image into vectors.  A trainable projector maps each concatenated
(mask, label) pair to an object token.  Image and instruction tokens are
repeated once per object, and everything is laid out in a fixed
``3 * N_MAX`` token sequence with pad slots masked out of attention::

    [object x n | pad] [image x n | pad] [instruction x n | pad]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .annotation import AnnotationSet
from .codec import LatentCodec, to_tensor
from .errors import ConfigurationError
from .scene import N_MAX

ROLE_OBJECT, ROLE_IMAGE, ROLE_INSTRUCTION, ROLE_PAD = range(4)
ROLE_NAMES = ("object", "image", "instruction", "pad")
MASK_GRID = 16
N_TOKENS = 3 * N_MAX


@dataclass(frozen=True)
class EmbedderConfig:
    d_mask: int = 256
    d_label: int = 128
    d_instr: int = 128
    d_model: int = 128
    vocab_buckets: int = 1024
    hash_algo: str = "fnv1a-32 mod vocab_buckets"
    init_seed: int = 0
    heads: int = 4
    head_dim: int = 32

    def __post_init__(self):
        if min(self.d_mask, self.d_label, self.d_instr, self.d_model, self.vocab_buckets) <= 0:
            raise ConfigurationError("embedder dimensions must be positive")
        if self.heads * self.head_dim != self.d_model:
            raise ConfigurationError("heads * head_dim must equal d_model")
        if self.d_mask != MASK_GRID * MASK_GRID:
            raise ConfigurationError(f"d_mask must be {MASK_GRID * MASK_GRID}")
        if self.d_instr != self.d_model:
            raise ConfigurationError("instruction embeddings are used as tokens; d_instr must equal d_model")


@dataclass(frozen=True)
class CondFlags:
    use_text_labels: bool = True
    use_boxes: bool = False
    use_masks: bool = True

    def __post_init__(self):
        if self.use_boxes and self.use_masks:
            raise ConfigurationError("boxes and masks cannot both be enabled; boxes are superfluous given masks")

    @property
    def mode(self) -> str:
        parts = [name for name, on in (("text", self.use_text_labels), ("boxes", self.use_boxes),
                                       ("masks", self.use_masks)) if on]
        return "+".join(parts) or "none"

    @classmethod
    def from_mode(cls, mode: str) -> "CondFlags":
        if mode not in COND_MODES:
            raise ConfigurationError(f"unknown conditioning mode {mode!r}; choose from {', '.join(COND_MODES)}")
        parts = set(mode.split("+")) - {"none"}
        return cls("text" in parts, "boxes" in parts, "masks" in parts)


COND_MODES = ("none", "text", "boxes", "masks", "text+boxes", "text+masks")


def fnv1a_32(text: str) -> int:
    h = 0x811C9DC5
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def _area_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input pixels over cell [i*n_in/n_out, (i+1)*n_in/n_out)."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges[i], edges[i + 1]
        for j in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
            m[i, j] = min(b, j + 1) - max(a, j)
        m[i] /= b - a
    return m


def embed_mask(mask: np.ndarray) -> np.ndarray:
    """Area-average a binary mask onto a 16x16 grid and flatten row-major."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot embed an empty mask")
    H, W = mask.shape
    pooled = _area_pool_matrix(H, MASK_GRID) @ mask.astype(np.float64) @ _area_pool_matrix(W, MASK_GRID).T
    return pooled.ravel().astype(np.float32)


def embed_box(box, image_size, d_mask: int = 256) -> np.ndarray:
    H, W = image_size
    x0, y0, x1, y1 = box
    out = np.zeros(d_mask, dtype=np.float32)
    out[:4] = (x0 / W, y0 / H, x1 / W, y1 / H)
    return out


class HashEmbedder:
    """Bag-of-words embedder over a frozen seeded table of hashed buckets."""

    def __init__(self, dim: int, buckets: int, seed: int):
        self.buckets = buckets
        self.table = np.random.default_rng(seed).standard_normal((buckets, dim)).astype(np.float32)

    def bucket(self, token: str) -> int:
        return fnv1a_32(token) % self.buckets

    def __call__(self, text: str) -> np.ndarray:
        tokens = text.lower().split()
        if not tokens:
            return np.zeros(self.table.shape[1], dtype=np.float32)
        return self.table[[self.bucket(t) for t in tokens]].mean(axis=0)


class Projector(nn.Module):
    """The trainable (mask, label) -> token MLP plus the two learned null tokens."""

    def __init__(self, cfg: EmbedderConfig, hidden: int = 256):
        super().__init__()
        gen = torch.Generator().manual_seed(cfg.init_seed + 3)
        d_in = cfg.d_mask + cfg.d_label
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, cfg.d_model)
        self.act = nn.SiLU()
        self.null_object = nn.Parameter(torch.zeros(cfg.d_model))
        self.uncond = nn.Parameter(torch.zeros(cfg.d_model))
        with torch.no_grad():
            for lin in (self.fc1, self.fc2):
                bound = 1.0 / lin.in_features ** 0.5
                lin.weight.copy_(torch.empty_like(lin.weight).uniform_(-bound, bound, generator=gen))
                lin.bias.copy_(torch.empty_like(lin.bias).uniform_(-bound, bound, generator=gen))
            self.null_object.copy_(torch.randn(cfg.d_model, generator=gen))
            self.uncond.copy_(torch.randn(cfg.d_model, generator=gen))

    def forward(self, mask_emb, label_emb):
        return self.fc2(self.act(self.fc1(torch.cat([mask_emb, label_emb], dim=-1))))


class FrozenEmbedders(nn.Module):
    """Holds the frozen tables as buffers so they checkpoint but never train."""

    def __init__(self, cfg: EmbedderConfig, latent_channels: int = 4):
        super().__init__()
        self.label = HashEmbedder(cfg.d_label, cfg.vocab_buckets, cfg.init_seed)
        self.instr = HashEmbedder(cfg.d_instr, cfg.vocab_buckets, cfg.init_seed + 1)
        vis = np.random.default_rng(cfg.init_seed + 2).standard_normal((latent_channels, cfg.d_model))
        self.register_buffer("label_table", torch.from_numpy(self.label.table))
        self.register_buffer("instr_table", torch.from_numpy(self.instr.table))
        self.register_buffer("visible_map", torch.from_numpy(vis.astype(np.float32)))

    def sync_tables(self):
        """Point the numpy lookups at the (possibly reloaded) buffers."""
        self.label.table = self.label_table.numpy()
        self.instr.table = self.instr_table.numpy()


@dataclass
class ConditioningBundle:
    tokens: torch.Tensor  # K x d_model
    token_roles: list
    n_objects: int

    @property
    def role_ids(self) -> torch.Tensor:
        return torch.tensor([ROLE_NAMES.index(r) for r in self.token_roles], dtype=torch.long)

    @property
    def key_mask(self) -> torch.Tensor:
        return self.role_ids != ROLE_PAD


def select_objects(ann: AnnotationSet, n_max: int = N_MAX) -> list:
    """Keep the ``n_max`` largest-area items (ties by index), preserving input order."""
    items = list(ann.items)
    if len(items) <= n_max:
        return items
    order = sorted(range(len(items)), key=lambda i: (-items[i].area, i))[:n_max]
    return [items[i] for i in sorted(order)]


class Conditioner(nn.Module):
    """Frozen embedders + trainable projector, producing batched token sequences."""

    def __init__(self, cfg: EmbedderConfig | None = None, codec: LatentCodec | None = None):
        super().__init__()
        self.cfg = cfg or EmbedderConfig()
        self.frozen = FrozenEmbedders(self.cfg)
        self.projector = Projector(self.cfg)
        # Not a submodule: the codec belongs to neither the trainable nor the embedder state.
        object.__setattr__(self, "codec", codec)

    # frozen embedders -------------------------------------------------
    def embed_label(self, label: str) -> np.ndarray:
        return self.frozen.label(label)

    def embed_instruction(self, text: str) -> np.ndarray:
        return self.frozen.instr(text)

    @torch.no_grad()
    def embed_visible(self, images) -> np.ndarray:
        """Pool the frozen codec latent and map it to d_model; batched or single."""
        if self.codec is None:
            raise ConfigurationError("embed_visible needs a codec")
        single = np.ndim(images) == 3
        z = self.codec.encode(to_tensor(images))
        out = z.mean(dim=(2, 3)) @ self.frozen.visible_map
        out = out.numpy()
        return out[0] if single else out

    def object_inputs(self, ann: AnnotationSet, flags: CondFlags) -> tuple:
        """(N_MAX x (d_mask + d_label) projector inputs, n_objects)."""
        cfg = self.cfg
        feats = np.zeros((N_MAX, cfg.d_mask + cfg.d_label), dtype=np.float32)
        items = select_objects(ann)
        for i, it in enumerate(items):
            if flags.use_masks:
                feats[i, :cfg.d_mask] = embed_mask(it.mask)
            elif flags.use_boxes:
                feats[i, :cfg.d_mask] = embed_box(it.box, ann.image_size, cfg.d_mask)
            if flags.use_text_labels:
                feats[i, cfg.d_mask:] = self.embed_label(it.label)
        return feats, len(items)

    # token assembly ---------------------------------------------------
    def project_object_token(self, mask_emb, label_emb):
        return self.projector(torch.as_tensor(mask_emb), torch.as_tensor(label_emb))

    def build_tokens(self, obj_feats, n_obj, image_emb, instr_emb,
                     drop_obj=None, drop_instr=None, null=None):
        """Batched assembly.

        Returns ``(tokens B x K x d, key_mask B x K, roles B x K)``.  ``drop_obj``
        swaps the object tokens for the learned null-object token,
        ``drop_instr`` masks the instruction tokens, and ``null`` yields the
        unconditional bundle.
        """
        B = obj_feats.shape[0]
        d = self.cfg.d_model
        dm = self.cfg.d_mask
        n_obj = torch.as_tensor(n_obj, dtype=torch.long)
        slots = torch.arange(N_MAX)
        reps = n_obj.clamp(min=1)
        obj_tok = self.projector(obj_feats[..., :dm], obj_feats[..., dm:])
        obj_valid = slots[None, :] < n_obj[:, None]
        use_null_obj = n_obj == 0
        if drop_obj is not None:
            use_null_obj = use_null_obj | drop_obj
            obj_valid = obj_valid & ~drop_obj[:, None]
        null_slot = use_null_obj[:, None] & (slots[None, :] == 0)
        obj_tok = torch.where(obj_valid[..., None], obj_tok, torch.zeros(()))
        obj_tok = torch.where(null_slot[..., None], self.projector.null_object.expand(B, N_MAX, d), obj_tok)
        obj_valid = obj_valid | null_slot

        rep_valid = slots[None, :] < reps[:, None]
        img_tok = torch.where(rep_valid[..., None], image_emb[:, None, :].expand(B, N_MAX, d), torch.zeros(()))
        ins_valid = rep_valid if drop_instr is None else rep_valid & ~drop_instr[:, None]
        ins_tok = torch.where(ins_valid[..., None], instr_emb[:, None, :].expand(B, N_MAX, d), torch.zeros(()))

        tokens = torch.cat([obj_tok, img_tok, ins_tok], dim=1)
        valid = torch.cat([obj_valid, rep_valid, ins_valid], dim=1)
        roles = torch.cat([torch.full((B, N_MAX), r) for r in (ROLE_OBJECT, ROLE_IMAGE, ROLE_INSTRUCTION)], dim=1)
        if null is not None and bool(null.any()):
            nt, nv, nr = self.null_tokens(B)
            sel = null[:, None]
            tokens = torch.where(sel[..., None], nt, tokens)
            valid = torch.where(sel, nv, valid)
            roles = torch.where(sel, nr, roles)
        roles = torch.where(valid, roles, torch.full_like(roles, ROLE_PAD))
        return tokens, valid, roles

    def null_tokens(self, B: int):
        d = self.cfg.d_model
        uncond = self.projector.uncond
        tokens = torch.cat([uncond.expand(B, 1, d), uncond.new_zeros(B, N_TOKENS - 1, d)], dim=1)
        valid = torch.zeros(B, N_TOKENS, dtype=torch.bool)
        valid[:, 0] = True
        roles = torch.full((B, N_TOKENS), ROLE_PAD)
        roles[:, 0] = ROLE_OBJECT
        return tokens, valid, roles

    def assemble_conditioning(self, ann: AnnotationSet, image_emb, instr_emb,
                              flags: CondFlags = CondFlags()) -> ConditioningBundle:
        feats, n = self.object_inputs(ann, flags)
        tokens, _, roles = self.build_tokens(
            torch.from_numpy(feats)[None], torch.tensor([n]),
            torch.as_tensor(np.asarray(image_emb, dtype=np.float32))[None],
            torch.as_tensor(np.asarray(instr_emb, dtype=np.float32))[None])
        return ConditioningBundle(tokens[0], [ROLE_NAMES[r] for r in roles[0].tolist()], n)

    def null_bundle(self) -> ConditioningBundle:
        tokens, _, roles = self.null_tokens(1)
        return ConditioningBundle(tokens[0], [ROLE_NAMES[r] for r in roles[0].tolist()], 0)
