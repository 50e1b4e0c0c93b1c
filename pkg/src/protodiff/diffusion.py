"""Forward noising and the single ancestral reverse update.

All functions accept numpy arrays or torch tensors and return the same kind;
they never mutate their inputs. ``t`` may be a scalar step or, for torch
inputs, an integer tensor of per-item steps (leading batch axis).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from .schedule import NoiseSchedule


@dataclass
class NoisedSample:
    x_t: Any
    t: Any
    eps: Any


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t - 1]`` and shape it to broadcast against ``like``."""
    if isinstance(like, torch.Tensor):
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            idx = t.to(torch.long)
            if idx.min() < 1 or idx.max() > values.size:
                raise IndexError(f"timesteps outside 1..{values.size}")
            out = torch.tensor(values, dtype=like.dtype)[idx - 1]
            return out.reshape(-1, *([1] * (like.ndim - 1)))
        t = int(t)
        if not 1 <= t <= values.size:
            raise IndexError(f"timestep {t} outside 1..{values.size}")
        return torch.tensor(values[t - 1], dtype=like.dtype)
    t = int(t)
    if not 1 <= t <= values.size:
        raise IndexError(f"timestep {t} outside 1..{values.size}")
    return values[t - 1]


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(x0, t, eps, schedule: NoiseSchedule) -> NoisedSample:
    """Closed-form marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    _check_shapes(x0, eps, "forward_sample")
    ab = _coef(schedule.alpha_bar, t, x0)
    lib = torch if isinstance(x0, torch.Tensor) else np
    x_t = lib.sqrt(ab) * x0 + lib.sqrt(1.0 - ab) * eps
    return NoisedSample(x_t=x_t, t=t, eps=eps)


def forward_chain(x0, t: int, schedule: NoiseSchedule, rng: np.random.Generator):
    """Apply ``t`` single-step noisings in sequence (test oracle for the marginal).

    ``t = 0`` returns a copy of ``x0``.
    """
    t = int(t)
    if not 0 <= t <= schedule.T:
        raise IndexError(f"timestep {t} outside 0..{schedule.T}")
    x = np.array(x0, dtype=np.float64, copy=True)
    for s in range(t):
        b = schedule.beta[s]
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(x.shape)
    return x


def reverse_step(x_t, eps_hat, t, z, schedule: NoiseSchedule):
    """One ancestral update.

    ``(x_t - (1 - a_t) / sqrt(1 - ab_t) * eps_hat) / sqrt(a_t) + sigma_t * z``
    with ``sigma_t = sqrt(1 - a_t)``. Callers pass ``z = 0`` at t = 1.
    """
    _check_shapes(x_t, eps_hat, "reverse_step")
    _check_shapes(x_t, z, "reverse_step")
    a = _coef(schedule.alpha, t, x_t)
    ab = _coef(schedule.alpha_bar, t, x_t)
    return reverse_update(x_t, eps_hat, a, ab, z)


def reverse_update(x_t, eps_hat, alpha, alpha_bar, z):
    """The reverse update with explicit ``alpha_t``/``alpha_bar_t`` coefficients.

    The noise-prediction weight is taken as 0 when ``alpha_t == 1``.
    """
    lib = torch if isinstance(x_t, torch.Tensor) else np
    if lib is torch:
        alpha = torch.as_tensor(alpha, dtype=x_t.dtype)
        alpha_bar = torch.as_tensor(alpha_bar, dtype=x_t.dtype)
    else:
        alpha = np.asarray(alpha, dtype=np.float64)
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    num = 1.0 - alpha
    den = lib.sqrt(1.0 - alpha_bar)
    safe = lib.where(den > 0, den, lib.ones_like(den))
    w = lib.where(num > 0, num / safe, lib.zeros_like(num))
    mean = (x_t - w * eps_hat) / lib.sqrt(alpha)
    return mean + lib.sqrt(num) * z


def predict_x0(x_t, eps, t, schedule: NoiseSchedule):
    """Invert the forward marginal given the noise: ``(x_t - sqrt(1-ab) eps) / sqrt(ab)``."""
    _check_shapes(x_t, eps, "predict_x0")
    ab = _coef(schedule.alpha_bar, t, x_t)
    lib = torch if isinstance(x_t, torch.Tensor) else np
    return (x_t - lib.sqrt(1.0 - ab) * eps) / lib.sqrt(ab)
