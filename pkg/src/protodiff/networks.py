"""Feature encoder, time embedding and the prototype-conditioned U-Net."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .prototypes import PrototypeBank

FULL_WIDTHS = (128, 256, 256, 256)
DESK_WIDTHS = (16, 32, 32, 32)


def _groups(channels: int, group_size: int = 8) -> int:
    # channel-group standardization with `group_size` channels per group
    return max(1, channels // group_size) if channels % group_size == 0 else 1


class Encoder(nn.Module):
    """Four stride-2 3x3 convolutions with SiLU, then global average pooling to a D-vector."""

    def __init__(self, in_channels: int = 1, dim: int = 128,
                 widths: Sequence[int] = (32, 64, 128)):
        super().__init__()
        chans = [in_channels, *widths, dim]
        for i in range(4):
            setattr(self, f"conv{i + 1}", nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.conv1.in_channels:
            raise ValueError(f"expected [B, {self.conv1.in_channels}, H, W], got {tuple(x.shape)}")
        h = x
        for i in range(4):
            h = getattr(self, f"conv{i + 1}")(h)
            if i < 3:
                h = F.silu(h)
        out = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return out[0] if single else out


def sinusoidal_embedding(t, dim: int) -> torch.Tensor:
    """Component 2i is ``sin(t / 10000^(2i/dim))``, component 2i+1 the matching cosine."""
    t = torch.as_tensor(t, dtype=torch.float64)
    single = t.ndim == 0
    t = t.reshape(-1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    args = t[:, None] * freq[None]
    out = torch.zeros(t.shape[0], dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(args)
    out[:, 1::2] = torch.cos(args)[:, : dim // 2]
    return out[0] if single else out


class TimeEmbedding(nn.Module):
    """Sinusoidal features of the (1-indexed) timestep followed by a learned linear map."""

    def __init__(self, dim: int, T: int):
        super().__init__()
        self.dim = dim
        self.T = T
        self.proj = nn.Linear(dim, dim)

    def forward(self, t) -> torch.Tensor:
        tt = torch.as_tensor(t)
        if tt.numel() and (tt.min() < 1 or tt.max() > self.T):
            raise IndexError(f"timestep outside 1..{self.T}")
        base = sinusoidal_embedding(tt, self.dim).to(self.proj.weight.dtype)
        return self.proj(base)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Spatial positions attend to a single conditioning token.

    Queries come from the (pre-normalized) feature map; the conditioning
    vector is projected to the only key and value. With one key the softmax
    weights are identically 1, so the block adds ``out(value(cond))`` at every
    position; the full attention computation is kept so the weights can be
    inspected.
    """

    def __init__(self, channels: int, cond_dim: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible into {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_dim, channels, bias=False)
        self.to_v = nn.Linear(cond_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        if cond.ndim == 1:
            cond = cond[None].expand(B, -1)
        if cond.shape != (B, self.to_k.in_features):
            raise ValueError(f"cond shape {tuple(cond.shape)} does not match batch {B} "
                             f"and dimension {self.to_k.in_features}")
        nh, hd = self.heads, C // self.heads
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))      # [B, HW, C]
        q = q.reshape(B, H * W, nh, hd).transpose(1, 2)               # [B, nh, HW, hd]
        k = self.to_k(cond).reshape(B, nh, 1, hd)
        v = self.to_v(cond).reshape(B, nh, 1, hd)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)  # [B, nh, HW, 1]
        self.last_weights = w.detach()
        a = (w @ v).transpose(1, 2).reshape(B, H * W, C)
        out = self.to_out(a).transpose(1, 2).reshape(B, C, H, W)
        return x + out


class _Down(nn.Module):
    def __init__(self, cin, cout, downsample):
        super().__init__()
        self.res1 = ResBlock(cin, cout)
        self.res2 = ResBlock(cout, cout)
        self.down = nn.Conv2d(cout, cout, 3, stride=2, padding=1) if downsample else None


class _Up(nn.Module):
    def __init__(self, cin, cskip, cout, upsample):
        super().__init__()
        self.res1 = ResBlock(cin + cskip, cout)
        self.res2 = ResBlock(cout, cout)
        self.up = nn.Conv2d(cout, cout, 3, padding=1) if upsample else None


class UNet(nn.Module):
    """U-Net noise predictor with cross-attention to the conditioning vector at the bottleneck.

    Stage ``i`` of the down path runs two residual blocks at ``widths[i]``;
    all but the last stage then halve the resolution with a stride-2 conv.
    The up path mirrors it, consuming one skip tensor per stage.
    """

    def __init__(self, in_channels: int = 1, widths: Sequence[int] = DESK_WIDTHS,
                 cond_dim: int = 128, heads: int = 4):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.widths = widths
        n = len(widths)
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        prev = widths[0]
        for i, w in enumerate(widths):
            setattr(self, f"down{i}", _Down(prev, w, downsample=i < n - 1))
            prev = w
        self.mid1 = ResBlock(prev, prev)
        self.attn = CrossAttention(prev, cond_dim, heads)
        self.mid2 = ResBlock(prev, prev)
        for i in reversed(range(n)):
            setattr(self, f"up{i}", _Up(prev, widths[i], widths[i], upsample=i > 0))
            prev = widths[i]
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out = nn.Conv2d(prev, in_channels, 3, padding=1)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        single = x.ndim == 3
        if single:
            x = x[None]
            cond = cond[None] if cond.ndim == 1 else cond
        f = self.downsample_factor
        if x.ndim != 4 or x.shape[1] != self.stem.in_channels or x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"input shape {tuple(x.shape)} incompatible with "
                             f"{self.stem.in_channels} channels and downsampling by {f}")
        h = self.stem(x)
        skips = []
        for i in range(len(self.widths)):
            stage = getattr(self, f"down{i}")
            h = stage.res2(stage.res1(h))
            skips.append(h)
            if stage.down is not None:
                h = stage.down(h)
        h = self.mid2(self.attn(self.mid1(h), cond))
        for i in reversed(range(len(self.widths))):
            stage = getattr(self, f"up{i}")
            h = stage.res2(stage.res1(torch.cat([h, skips[i]], dim=1)))
            if stage.up is not None:
                h = stage.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.out(F.silu(self.out_norm(h)))
        return out[0] if single else out


class PrototypeDiffusion(nn.Module):
    """Encoder, denoiser, time embedding and prototype bank as one parameter set.

    ``variant`` is ``"pdm"``, ``"spdm"`` or ``"ddpm"``. The DDPM ablation keeps
    an (unused) bank so every variant has the same parameter layout.
    """

    def __init__(self, variant: str = "pdm", K: int = 2, D: int = 128, T: int = 1000,
                 in_channels: int = 1, widths: Sequence[int] = DESK_WIDTHS,
                 encoder_widths: Sequence[int] = (32, 64, 128),
                 labels: Optional[Sequence[int]] = None, heads: int = 4,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if variant not in ("pdm", "spdm", "ddpm"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.encoder = Encoder(in_channels, D, encoder_widths)
        self.unet = UNet(in_channels, widths, D, heads)
        self.time_proj = TimeEmbedding(D, T)
        if variant == "spdm" and labels is None:
            labels = list(range(K))
        self.prototypes = PrototypeBank(K, D, labels=labels, generator=generator)
        if self.prototypes.D != self.encoder.dim:
            raise ValueError("prototype dimension must equal encoder output dimension")

    @property
    def D(self) -> int:
        return self.encoder.dim

    def condition(self, e_x: Optional[torch.Tensor], t) -> torch.Tensor:
        """``e_x + gamma(t)``, or ``gamma(t)`` alone for the DDPM ablation."""
        g = self.time_proj(t)
        if self.variant == "ddpm" or e_x is None:
            return g
        return e_x + g

    def denoise(self, x_t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return self.unet(x_t, cond)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)


def encode(x: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(x)


def time_embed(t, embedding: TimeEmbedding) -> torch.Tensor:
    return embedding(t)


def cross_attend(bottleneck: torch.Tensor, cond: torch.Tensor, block: CrossAttention) -> torch.Tensor:
    return block(bottleneck, cond)


def denoise(x_t: torch.Tensor, cond: torch.Tensor, unet: UNet) -> torch.Tensor:
    return unet(x_t, cond)
