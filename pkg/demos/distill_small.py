"""A scaled-down run of the whole pipeline through the library API.

    python demos/distill_small.py [workdir]

Probe, synthesise 150 masked samples, train a small UNet for 300 steps and
score it on 50 held-out toy images. Takes about a minute on one CPU core. The
full-size run is `latentseg train/eval --config configs/toy.json`.
"""

import sys
import tempfile
from pathlib import Path

from latentseg import (ProbeConfig, RefineConfig, SegArchConfig, ToyCompositor, TrainConfig,
                       evaluate, find_direction_pair, init_model, synthesize_dataset, train)
from latentseg.evalharness import write_toy_heldout

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="latentseg-"))
gen = ToyCompositor()

pair = find_direction_pair(gen, ProbeConfig(steps=300, seed=0))
print(f"probe done, dot {pair.dot:+.3f}")

manifest = synthesize_dataset(gen, pair, 2.0, 150, RefineConfig(), seed=2, out_path=work / "dataset")
print(f"synthesised {manifest.count} samples, acceptance {manifest.acceptance_rate:.2f}")

model = init_model(SegArchConfig(levels=3, base_channels=8), seed=3)
ckpt = train(model, manifest, TrainConfig(steps=300, decay_step=200, seed=4), log_every=100)
print(f"training loss {ckpt.loss_history[0][1]:.3f} -> {ckpt.loss_history[-1][1]:.3f}")

heldout = write_toy_heldout(gen, 50, seed=5, out_path=work / "heldout")
report = evaluate(model, heldout)
agg = report.aggregate
print(f"held-out: acc {agg['acc']:.3f}  iou {agg['iou']:.3f}  f_beta {agg['f_beta']:.3f}  "
      f"max_f_beta {agg['max_f_beta']:.3f}")
print(f"artifacts under {work}")
