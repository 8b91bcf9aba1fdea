"""What the denoiser actually sees.

Each scene becomes a fixed-length sequence of 48 tokens: up to 16 object
tokens (projected mask + label embeddings), then the pooled image token and
the instruction token, each repeated once per object.  Unused slots are zero
and masked out of attention.  The six ablation modes switch which object
inputs are filled in.

Run:  python demos/02_conditioning_tokens.py
"""

from collections import Counter

import torch

from vis2ir.annotation import annotate_oracle
from vis2ir.codec import LatentCodec
from vis2ir.conditioning import COND_MODES, CondFlags, Conditioner
from vis2ir.instructions import parse_band, render_instruction
from vis2ir.scene import GeneratorConfig, render_visible, sample_scene

torch.manual_seed(0)
torch.set_grad_enabled(False)
codec = LatentCodec((64, 64)).freeze()  # untrained is fine for looking at shapes
cond = Conditioner(codec=codec)

spec = sample_scene(3, GeneratorConfig(count_range=(5, 5)))
ann = annotate_oracle(spec)
vis = render_visible(spec)

for template in (0, 17, 42):
    text = render_instruction(template, "near")
    print(f"template {template:2d}: {text!r} -> band {parse_band(text)}")

instruction = cond.embed_instruction(render_instruction(0, "long"))
bundle = cond.assemble_conditioning(ann, cond.embed_visible(vis), instruction)
print(f"\n{len(ann)} annotations -> {tuple(bundle.tokens.shape)} tokens, roles {dict(Counter(bundle.token_roles))}")
abbrev = {"object": "o", "image": "i", "instruction": "n", "pad": "."}
print("slot roles:", "".join(abbrev[r] for r in bundle.token_roles), "(o=object i=image n=instruction .=pad)")

print("\nobject-token norms per ablation mode (same scene, fresh projector):")
for mode in COND_MODES:
    b = cond.assemble_conditioning(ann, cond.embed_visible(vis), instruction, CondFlags.from_mode(mode))
    norms = b.tokens[: b.n_objects].norm(dim=1)
    distinct = len({tuple(t.tolist()) for t in b.tokens[: b.n_objects]})
    print(f"  {mode:>14}: {b.n_objects} objects, {distinct} distinct object tokens, "
          f"norms {[round(float(v), 2) for v in norms]}")

null = cond.null_bundle()
print(f"\nunconditional bundle for guidance: {Counter(null.token_roles)}")
