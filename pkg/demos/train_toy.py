"""
Training on the two-mode toy set
================================

Train s-PDM (one prototype bound to each class) and unsupervised PDM on
16x16 images whose bright block sits on the left or the right, then sample
from each prototype and classify the samples with the brightness oracle.

The defaults are a short run with a 200-step schedule so the script finishes
in a few minutes on one core; pass a step count to train longer.
"""

import sys
import time

import numpy as np

from protodiff import RunConfig, SampleRequest, generate, synth_two_mode, train
from protodiff.data import mode_of, save_png
from protodiff.prototypes import pairwise_cosine
from protodiff.sampler import make_grid
from protodiff.training import assignment_purity

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
data = synth_two_mode(2000, 16, seed=0)

for variant in ("spdm", "pdm"):
    cfg = RunConfig(variant=variant, K=2, T=200, beta_end=0.1, epochs=1000, max_steps=steps)
    t0 = time.time()
    state = train(data, cfg)
    first = np.mean([r.total for r in state.history[:50]])
    last = np.mean([r.total for r in state.history[-50:]])
    purity, mapping = assignment_purity(state.model, data.images, data.labels)
    cos = float(pairwise_cosine(state.model.prototypes.e.detach())[0, 1])
    print(f"{variant}: {steps} steps in {time.time() - t0:.0f}s, loss {first:.1f} -> {last:.1f}, "
          f"purity {purity:.3f}, class->prototype {mapping}, prototype cosine {cos:.3f}")

    rows = []
    for k in range(cfg.K):
        imgs = generate(SampleRequest(count=8, seed=k, proto_index=k), state.model, state.schedule,
                        data.shape)
        print(f"  prototype {k}: oracle modes {mode_of(imgs).tolist()}")
        rows.append(imgs)
    save_png(make_grid(np.concatenate(rows), ncols=8, pad=1), f"toy_{variant}.png")
    print(f"  wrote toy_{variant}.png (one row per prototype)")
