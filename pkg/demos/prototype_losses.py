"""
Prototype assignment and its losses
===================================

Features pick their nearest prototype. The contrastive term pulls each
feature toward its prototype relative to the others, the align term is a
plain squared distance and the compactness term pushes prototypes apart in
angle. Each loss returns hand-derived gradients, checked here against
central differences.
"""

import numpy as np
import torch

from protodiff import align_loss, assign, compact_loss, contrastive_loss

torch.manual_seed(0)
e = torch.tensor([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
x = torch.tensor([[1.2, 0.0], [1.0, 0.0], [0.1, 1.9]], dtype=torch.float64)

a = assign(x, e)
# (1, 0) is equidistant from the first two prototypes; the lower index wins
print("assigned:", a.index.tolist(), "squared distances:", a.distance_sq.tolist())

loss, gx, ge = contrastive_loss(x, a, e, tau=1.0)
print(f"contrastive {float(loss):.5f}")
print(f"align {float(align_loss(x, e[a.index])[0]):.5f}")
print(f"compact {float(compact_loss(e + 0.1, 1.0)[0]):.5f}  (sum over ordered pairs)")

# equal distances to K prototypes give ln K
for K in (2, 4, 10):
    ang = torch.arange(K, dtype=torch.float64) * 2 * np.pi / K
    ring = torch.stack([ang.cos(), ang.sin()], 1)
    z = torch.zeros(2, dtype=torch.float64)
    print(f"K={K}: {float(contrastive_loss(z, assign(z, ring), ring)[0]):.9f} vs ln K {np.log(K):.9f}")


def numeric_grad(f, t, h=1e-6):
    g = torch.zeros_like(t)
    flat, gflat = t.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


f = lambda: contrastive_loss(x, a, e, 1.0)[0]
print("grad_x max error:", float((gx - numeric_grad(f, x)).abs().max()))
print("grad_e max error:", float((ge - numeric_grad(f, e)).abs().max()))
