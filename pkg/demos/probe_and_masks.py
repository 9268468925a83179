"""Find a light/dark direction pair on the toy compositor and look at the masks it yields.

Run from the repository root:

    python demos/probe_and_masks.py

A shortened probe (300 steps) keeps this under a minute. The strip written
to demos/out/masks.png shows, per row: image, extracted mask, oracle mask.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from latentseg import ProbeConfig, ToyCompositor, extract_mask, find_direction_pair, toy_oracle_mask
from latentseg.evalharness import iou
from latentseg.generator import LatentCode, generate
from latentseg.masksynth import image_to_uint8
from latentseg.probe import direction_diagnostics

gen = ToyCompositor()
cfg = ProbeConfig(steps=300, seed=0)
pair = find_direction_pair(gen, cfg)

# The two directions should point roughly opposite ways.
diag = direction_diagnostics(pair, gen, n=64, seed=1)
print(f"dot(v_light, v_dark) = {pair.dot:+.3f}")
print(f"centre-minus-border brightness change: light {diag.center_border_light:+.3f}, "
      f"dark {diag.center_border_dark:+.3f}")

rng = np.random.default_rng(7)
rows, scores = [], []
for _ in range(6):
    z = LatentCode(rng.standard_normal(gen.spec.latent_dim))
    mask, _ = extract_mask(gen, z, pair, cfg.epsilon)
    oracle = toy_oracle_mask(gen, z)
    scores.append(iou(mask, oracle))
    gray = lambda m: np.repeat((m * 255).astype(np.uint8)[..., None], 3, axis=2)
    rows.append(np.concatenate([image_to_uint8(generate(gen, z)), gray(mask), gray(oracle)], axis=1))

print(f"mask IoU against the oracle: mean {np.mean(scores):.3f} over {len(scores)} codes")
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
Image.fromarray(np.concatenate(rows, axis=0)).save(out / "masks.png")
print(f"wrote {out / 'masks.png'}")
