"""Sample-quality metrics (IS, FID, KID), the proxy feature network and PCA projection.

The Inception network of the usual metrics is replaced here by a small CNN
classifier trained on the evaluation data; numbers computed with it are
"proxy" scores, comparable only with each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8, rtol=0):
            raise ValueError("covariance is not symmetric")
        if self.n < 2:
            raise ValueError("need at least two samples")

    @classmethod
    def from_features(cls, feats) -> "GaussianStats":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if len(f) < 2:
            raise ValueError("need at least two samples")
        cov = np.cov(f, rowvar=False, ddof=1)
        return cls(f.mean(0), (cov + np.atleast_2d(cov).T) / 2, len(f))

    def merge(self, other: "GaussianStats") -> "GaussianStats":
        """Pooled statistics of the union of both sample sets."""
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = (self.cov * (self.n - 1) + other.cov * (other.n - 1)
              + np.outer(delta, delta) * self.n * other.n / n)
        return GaussianStats(mean, m2 / (n - 1), n)


def inception_score(probs) -> float:
    """``exp(mean_i KL(p(y|x_i) || p(y)))`` with ``p(y)`` the mean of the rows."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("probs must be a non-empty [N, C] array")
    if np.any(p < 0) or not np.allclose(p.sum(1), 1.0, atol=1e-6):
        raise ValueError("each row must be a probability vector")
    # identical rows: take the row itself so rounding in the mean cannot leak into the score
    marginal = p[0].copy() if np.all(p == p[0]) else p.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(1).mean()))


def psd_sqrt(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Square root of a symmetric PSD matrix by eigendecomposition.

    Eigenvalues below ``-tol`` are rejected; those in ``[-tol, 0)`` are clamped to 0.
    """
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    if w.min(initial=0.0) < -tol * max(1.0, np.abs(w).max(initial=0.0)):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """``Tr((A B)^{1/2})`` for PSD A, B via the symmetric form ``A^{1/2} B A^{1/2}``."""
    ra = psd_sqrt(a)
    inner = ra @ b @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min(initial=0.0) < -1e-6 * max(1.0, np.abs(w).max(initial=0.0)):
        raise ValueError(f"covariance product has negative eigenvalue {w.min():.3g}")
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def fid(real: GaussianStats, gen: GaussianStats) -> float:
    """Frechet distance between two Gaussians."""
    if real.mean.shape != gen.mean.shape:
        raise ValueError("feature dimensions differ")
    diff = real.mean - gen.mean
    tr = np.trace(real.cov) + np.trace(gen.cov) - 2.0 * trace_sqrt_product(real.cov, gen.cov)
    return float(diff @ diff + tr)


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** degree


def kid(real_feats, gen_feats) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x.y / F + 1)^3``."""
    x = np.asarray(real_feats, dtype=np.float64)
    y = np.asarray(gen_feats, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("KID needs at least two samples in each set")
    if x.shape[1] != y.shape[1]:
        raise ValueError("feature dimensions differ")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    return float((kxx.sum() - np.trace(kxx)) / (n * (n - 1))
                 + (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
                 - 2.0 * kxy.mean())


def pca_project(features, dims: int = 2):
    """Project centered features onto the top ``dims`` principal axes.

    Axes are ordered by decreasing variance; each axis is signed so its first
    nonzero loading is positive.

    Returns:
        ``(projection [N, dims], axes [dims, D], eigenvalues [D])`` where the
        eigenvalues are those of the scatter matrix ``Xc^T Xc / N``, descending.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) <= 2:
        raise ValueError("need an [N, D] array with N > 2")
    xc = f - f.mean(0)
    if not np.any(np.abs(xc) > 0):
        raise ValueError("features are constant; no principal axes")
    w, v = np.linalg.eigh(xc.T @ xc / len(f))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    axes = v[:, :dims].T.copy()
    for a in axes:
        nz = np.flatnonzero(np.abs(a) > 1e-12)
        if nz.size and a[nz[0]] < 0:
            a *= -1
    if axes.shape[0] < dims:
        axes = np.vstack([axes, np.zeros((dims - axes.shape[0], f.shape[1]))])
    return xc @ axes.T, axes, w


class FeatureNet(nn.Module):
    """Small CNN classifier whose penultimate layer supplies proxy-metric features."""

    def __init__(self, in_channels: int, num_classes: int, feat_dim: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.fc = nn.Linear(64, feat_dim)
        self.head = nn.Linear(feat_dim, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return torch.tanh(self.fc(h))

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def extract(self, images, batch_size: int = 256):
        """Return ``(probs [N, C], features [N, F])`` as float64 numpy arrays."""
        self.eval()
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        probs, feats = [], []
        for i in range(0, len(x), batch_size):
            f = self.features(x[i:i + batch_size])
            probs.append(torch.softmax(self.head(f).double(), dim=1))
            feats.append(f.double())
        return torch.cat(probs).numpy(), torch.cat(feats).numpy()


def train_feature_net(images, labels, num_classes: int, seed: int = 0, epochs: int = 3,
                      batch_size: int = 64, lr: float = 1e-3, feat_dim: int = 32) -> FeatureNet:
    """Fit the proxy classifier on the evaluation data (seeded, deterministic)."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = FeatureNet(x.shape[1], num_classes, feat_dim)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    net.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            b = perm[i:i + batch_size]
            loss = F.cross_entropy(net(x[b]), y[b])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    return net


def proxy_scores(net: FeatureNet, real_images, gen_images) -> dict:
    """proxy_is on the generated set, proxy_fid and proxy_kid between real and generated."""
    _, real_f = net.extract(real_images)
    gen_p, gen_f = net.extract(gen_images)
    return {
        "proxy_is": inception_score(gen_p),
        "proxy_fid": fid(GaussianStats.from_features(real_f), GaussianStats.from_features(gen_f)),
        "proxy_kid": kid(real_f, gen_f),
    }
