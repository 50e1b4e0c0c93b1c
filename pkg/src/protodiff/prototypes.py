"""Learnable prototype bank, nearest-prototype assignment and prototype losses.

The three prototype losses carry hand-derived gradients. Each ``*_loss``
function returns ``(value, grads...)`` as plain tensors for inspection; the
``*_term`` wrappers expose the same math to autograd (the backward pass
replays the analytic gradients) and are what the trainer uses.

Batched inputs are accepted everywhere: ``x_hat`` may be ``[D]`` or
``[B, D]``; batched losses are means over the batch.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

# Instrumentation: number of times each operation has run in this process.
call_counts: Counter = Counter()


class PrototypeBank(nn.Module):
    """K learnable D-dimensional prototypes, optionally bound one-to-one to classes."""

    def __init__(self, K: int, D: int, labels: Optional[Sequence[int]] = None,
                 init_std: float = 0.02, generator: Optional[torch.Generator] = None):
        super().__init__()
        if K < 1 or D < 1:
            raise ValueError(f"need K >= 1 and D >= 1, got K={K}, D={D}")
        self.e = nn.Parameter(torch.randn(K, D, generator=generator) * init_std)
        if labels is not None:
            labels = [int(c) for c in labels]
            if len(labels) != K or len(set(labels)) != K:
                raise ValueError("labels must bind each prototype to a distinct class")
        self.labels = labels

    @property
    def K(self) -> int:
        return self.e.shape[0]

    @property
    def D(self) -> int:
        return self.e.shape[1]

    def __len__(self):
        return self.K

    def forward(self, index):
        return self.e[index]


@dataclass
class Assignment:
    index: torch.Tensor        # 0-based prototype index per item
    distance_sq: torch.Tensor  # squared distance to that prototype


def _prototypes(bank) -> torch.Tensor:
    return bank.e if isinstance(bank, PrototypeBank) else torch.as_tensor(bank)


def _as_batch(x_hat: torch.Tensor, D: int):
    x = torch.as_tensor(x_hat)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != D:
        raise ValueError(f"expected feature dimension {D}, got shape {tuple(torch.as_tensor(x_hat).shape)}")
    return x, single


def squared_distances(x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """``[B, K]`` matrix of ``||x_i - e_k||^2`` (explicit differences, no expansion trick)."""
    return ((x[:, None, :] - e[None, :, :]) ** 2).sum(-1)


def assign(x_hat, bank) -> Assignment:
    """Nearest prototype by Euclidean distance; ties go to the lowest index."""
    call_counts["assign"] += 1
    e = _prototypes(bank).detach()
    x, single = _as_batch(torch.as_tensor(x_hat).detach(), e.shape[1])
    d2 = squared_distances(x.to(e.dtype), e)
    # torch.argmin returns the first minimal index, which is the tie-break we want
    idx = torch.argmin(d2, dim=1)
    dist = d2.gather(1, idx[:, None])[:, 0]
    if single:
        return Assignment(idx[0], dist[0])
    return Assignment(idx, dist)


def _index(assignment, B: int) -> torch.Tensor:
    idx = assignment.index if isinstance(assignment, Assignment) else assignment
    idx = torch.as_tensor(idx, dtype=torch.long).reshape(-1)
    if idx.numel() != B:
        raise ValueError(f"{idx.numel()} assignments for {B} features")
    return idx


def contrastive_loss(x_hat, assignment, bank, tau: float = 1.0):
    """Softmax-over-negative-distances loss toward the assigned prototype.

    Per item: ``logsumexp_k(-tau d_k) + tau d_x`` with ``d_k = ||x - e_k||^2``.

    Returns:
        ``(loss, grad_x, grad_e)``; ``grad_x`` has the shape of ``x_hat``,
        ``grad_e`` is ``[K, D]``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau!r}")
    call_counts["contrastive_loss"] += 1
    e = _prototypes(bank).detach()
    x, single = _as_batch(torch.as_tensor(x_hat).detach(), e.shape[1])
    x = x.to(e.dtype)
    B, K = x.shape[0], e.shape[0]
    idx = _index(assignment, B)
    if idx.min() < 0 or idx.max() >= K:
        raise IndexError("assignment index out of range")

    d2 = squared_distances(x, e)
    logits = -tau * d2
    log_p = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    losses = -log_p.gather(1, idx[:, None])[:, 0]
    loss = losses.mean()

    # dL/d(d2) = -tau (softmax - onehot) / B
    p = log_p.exp()
    onehot = torch.zeros_like(p)
    onehot[torch.arange(B), idx] = 1.0
    g = -tau * (p - onehot) / B
    # rows of g sum to zero, so the x_i term of d(d2)/dx vanishes
    grad_x = -2.0 * g @ e
    grad_e = -2.0 * (g.T @ x - g.sum(0)[:, None] * e)
    if single:
        grad_x = grad_x[0]
    return loss, grad_x, grad_e


def align_loss(x_hat, e_x):
    """Mean squared distance between features and their selected prototypes.

    Returns ``(loss, grad_x, grad_e_x)``.
    """
    call_counts["align_loss"] += 1
    x = torch.as_tensor(x_hat).detach()
    e = torch.as_tensor(e_x).detach()
    if x.shape != e.shape:
        raise ValueError(f"dimension mismatch {tuple(x.shape)} vs {tuple(e.shape)}")
    diff = x - e.to(x.dtype)
    B = 1 if diff.ndim == 1 else diff.shape[0]
    loss = (diff ** 2).sum() / B
    grad_x = 2.0 * diff / B
    return loss, grad_x, -grad_x


def compact_loss(bank, beta_compact: float = 1.0):
    """``beta * sum_{k != k'} cos(e_k, e_k')`` over ordered pairs.

    Each unordered pair contributes twice. Returns ``(loss, grad_e)``.
    """
    call_counts["compact_loss"] += 1
    e = _prototypes(bank).detach()
    norms = e.norm(dim=1, keepdim=True)
    if torch.any(norms == 0):
        raise ValueError("cosine similarity undefined for a zero-norm prototype")
    u = e / norms
    s = u.sum(0, keepdim=True)
    # sum over ordered off-diagonal pairs = ||sum u||^2 - K
    loss = beta_compact * ((s ** 2).sum() - e.shape[0])
    g_u = 2.0 * beta_compact * (s - u)
    grad_e = (g_u - (g_u * u).sum(1, keepdim=True) * u) / norms
    return loss, grad_e


class _Contrastive(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, e, idx, tau):
        loss, gx, ge = contrastive_loss(x, idx, e, tau)
        ctx.save_for_backward(gx, ge)
        return loss

    @staticmethod
    def backward(ctx, grad):
        gx, ge = ctx.saved_tensors
        return grad * gx, grad * ge, None, None


class _Align(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, e_x):
        loss, gx, ge = align_loss(x, e_x)
        ctx.save_for_backward(gx, ge)
        return loss

    @staticmethod
    def backward(ctx, grad):
        gx, ge = ctx.saved_tensors
        return grad * gx, grad * ge


class _Compact(torch.autograd.Function):
    @staticmethod
    def forward(ctx, e, beta):
        loss, ge = compact_loss(e, beta)
        ctx.save_for_backward(ge)
        return loss

    @staticmethod
    def backward(ctx, grad):
        (ge,) = ctx.saved_tensors
        return grad * ge, None


def contrastive_term(x_hat: torch.Tensor, e: torch.Tensor, index: torch.Tensor, tau: float):
    """Differentiable contrastive loss (analytic backward) w.r.t. features and all prototypes."""
    return _Contrastive.apply(x_hat, e, index, float(tau))


def align_term(x_hat: torch.Tensor, e_x: torch.Tensor):
    """Differentiable alignment loss; ``e_x`` is usually ``bank.e[index]``."""
    return _Align.apply(x_hat, e_x)


def compact_term(e: torch.Tensor, beta_compact: float):
    """Differentiable compactness penalty over the whole bank."""
    return _Compact.apply(e, float(beta_compact))


def pairwise_cosine(e: torch.Tensor) -> torch.Tensor:
    u = e / e.norm(dim=1, keepdim=True)
    return u @ u.T
