"""Ancestral sampling conditioned on a prototype."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .diffusion import reverse_step
from .networks import PrototypeDiffusion
from .prototypes import assign
from .schedule import NoiseSchedule
from .training import NumericalError, prototype_index_for


@dataclass
class SampleRequest:
    """What to generate.

    Exactly one of ``reference`` (image ``[C, H, W]`` or batch), ``label``
    (s-PDM only) or ``proto_index`` may be set; none means a uniformly random
    prototype per sample. ``t_override`` shortens the chain for smoke tests
    (a linear schedule with that many steps and the same endpoints).
    """

    count: int = 16
    seed: int = 0
    reference: Optional[np.ndarray] = None
    label: Optional[int] = None
    proto_index: Optional[int] = None
    t_override: Optional[int] = None

    @property
    def mode(self) -> str:
        set_ = [n for n in ("reference", "label", "proto_index") if getattr(self, n) is not None]
        if len(set_) > 1:
            raise ValueError(f"conflicting conditioning options: {', '.join(set_)}")
        return set_[0] if set_ else "random"


def select_condition(request: SampleRequest, model: PrototypeDiffusion,
                     generator: Optional[torch.Generator] = None):
    """Pick one prototype per requested sample.

    Returns:
        ``(prototypes [count, D], indices [count])``; for the DDPM ablation both
        are ``None``.
    """
    if model.variant == "ddpm":
        return None, None
    bank = model.prototypes
    mode = request.mode
    n = request.count
    if mode == "reference":
        ref = torch.as_tensor(np.asarray(request.reference), dtype=torch.float32)
        with torch.no_grad():
            idx = assign(model.encode(ref), bank).index.reshape(-1)
        if idx.numel() == 1:
            idx = idx.expand(n)
        elif idx.numel() != n:
            raise ValueError(f"{idx.numel()} reference images for {n} samples")
    elif mode == "label":
        if model.variant != "spdm":
            raise ValueError("label conditioning needs an s-PDM checkpoint")
        idx = prototype_index_for(int(request.label), bank).reshape(1).expand(n)
    elif mode == "proto_index":
        k = int(request.proto_index)
        if not 0 <= k < bank.K:
            raise IndexError(f"prototype index {k} outside 0..{bank.K - 1}")
        idx = torch.full((n,), k, dtype=torch.long)
    else:
        if generator is None:
            generator = torch.Generator().manual_seed(request.seed)
        idx = torch.randint(0, bank.K, (n,), generator=generator)
    return bank.e.detach()[idx], idx.clone()


@torch.no_grad()
def generate(request: SampleRequest, model: PrototypeDiffusion, schedule: NoiseSchedule,
             image_shape, batch_size: int = 256, return_indices: bool = False):
    """Run the reverse chain from ``x_T ~ N(0, I)`` down to ``t = 1``.

    The conditioning prototype is drawn once per sample and held fixed;
    ``gamma(t)`` follows the loop. No noise is added at t = 1. Output is
    clamped to [-1, 1].
    """
    if request.count < 1:
        raise ValueError("count must be >= 1")
    if request.t_override:
        from .schedule import linear_schedule
        schedule = linear_schedule(request.t_override, float(schedule.beta[0]), float(schedule.beta[-1]))
    gen = torch.Generator().manual_seed(request.seed)
    protos, idx = select_condition(request, model, gen)
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, request.count, batch_size):
        stop = min(start + batch_size, request.count)
        e = protos[start:stop] if protos is not None else None
        x = torch.randn((stop - start, *image_shape), generator=gen)
        for t in range(schedule.T, 0, -1):
            tt = torch.full((stop - start,), t, dtype=torch.long)
            eps_hat = model.denoise(x, model.condition(e, _embed_step(t, schedule, model)))
            z = torch.randn(x.shape, generator=gen) if t > 1 else torch.zeros_like(x)
            x = reverse_step(x, eps_hat, tt, z, schedule)
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite sample at t={t}")
        out.append(x.clamp(-1.0, 1.0))
    model.train(was_training)
    images = torch.cat(out).numpy()
    if return_indices:
        return images, (idx.numpy() if idx is not None else None)
    return images


def _embed_step(t: int, schedule: NoiseSchedule, model: PrototypeDiffusion) -> int:
    # a shortened chain reuses the trained embedding at the proportional step
    T_model = model.time_proj.T
    if schedule.T == T_model:
        return t
    return max(1, min(T_model, int(round(t * T_model / schedule.T))))


def make_grid(images: np.ndarray, ncols: Optional[int] = None, pad: int = 0) -> np.ndarray:
    """Tile ``[N, C, H, W]`` row-major into ``[C, rows*H, ncols*W]``; empty cells stay at -1."""
    n, c, h, w = images.shape
    if ncols is None:
        ncols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / ncols))
    grid = np.full((c, rows * (h + pad) - pad, ncols * (w + pad) - pad), -1.0, dtype=np.float32)
    for i, img in enumerate(images):
        r, k = divmod(i, ncols)
        grid[:, r * (h + pad): r * (h + pad) + h, k * (w + pad): k * (w + pad) + w] = img
    return grid
