"""
Proxy image-quality scores
==========================

Without a pretrained Inception network the scores use a small classifier
trained on the real images. Compare the real set with itself, with a copy
that has lost one mode, and with pure noise.
"""

import numpy as np

from protodiff.data import synth_two_mode
from protodiff.metrics import pca_project, proxy_scores, train_feature_net

real = synth_two_mode(1000, 16, seed=0)
net = train_feature_net(real.images, real.labels, num_classes=2, seed=0, epochs=3)

candidates = {
    "itself": real.images,
    "fresh draw": synth_two_mode(1000, 16, seed=1).images,
    "left mode only": synth_two_mode(1000, 16, seed=2).images[0::2],
    "noise": np.clip(np.random.default_rng(3).standard_normal(real.images.shape), -1, 1).astype(np.float32),
}
print(f"{'candidate':>15}  {'IS':>6}  {'FID':>9}  {'KID':>8}")
for name, imgs in candidates.items():
    s = proxy_scores(net, real.images, imgs)
    print(f"{name:>15}  {s['proxy_is']:6.3f}  {s['proxy_fid']:9.4f}  {s['proxy_kid']:8.4f}")

# the classifier features separate the two modes along the first principal axis
_, feats = net.extract(real.images)
proj, axes, var = pca_project(feats)
print("PC variances:", np.round(var[:2], 4))
print("mean PC1 by class:", [round(float(proj[real.labels == c, 0].mean()), 3) for c in (0, 1)])
