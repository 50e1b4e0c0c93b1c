"""Joint training of encoder, denoiser and prototypes (PDM, s-PDM, DDPM ablation)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import Dataset, shuffled_batches
from .diffusion import forward_sample
from .networks import DESK_WIDTHS, PrototypeDiffusion
from .prototypes import (PrototypeBank, align_term, assign, call_counts, compact_term,
                         contrastive_term)
from .schedule import NoiseSchedule, linear_schedule

log = logging.getLogger(__name__)

VARIANTS = ("pdm", "spdm", "ddpm")
LOSS_COLUMNS = ("step", "diff", "contrastive", "align", "compact", "total")


class NumericalError(RuntimeError):
    """A loss or sample became non-finite."""


@dataclass
class RunConfig:
    variant: str = "pdm"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    K: int = 2
    D: int = 128
    tau: float = 1.0
    beta_compact: float = 1.0
    batch_size: int = 32
    epochs: int = 1
    max_steps: int = 0          # 0 = run all epochs
    lr: float = 2e-4
    seed: int = 0
    dataset: str = "synth:two_mode:n=2000:size=16"
    labels: str = ""
    widths: tuple = DESK_WIDTHS
    encoder_widths: tuple = (32, 64, 128)
    heads: int = 4
    checkpoint_every: int = 0   # steps; 0 = final checkpoint only

    def __post_init__(self):
        self.variant = self.variant.lower().replace("-", "").replace("_", "")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.widths = tuple(int(w) for w in self.widths)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        for name in ("T", "K", "D", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossReport:
    step: int
    diff: float
    contrastive: float = 0.0
    align: float = 0.0
    compact: float = 0.0

    @property
    def total(self) -> float:
        return self.diff + self.contrastive + self.align + self.compact

    def row(self) -> list:
        return [self.step, self.diff, self.contrastive, self.align, self.compact, self.total]


@dataclass
class ModelState:
    """Everything a run mutates: parameters, optimizer moments, step counter and RNG."""

    config: RunConfig
    model: PrototypeDiffusion
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    generator: torch.Generator
    step: int = 0
    history: list = field(default_factory=list)
    image_shape: tuple = ()


def build_state(config: RunConfig, in_channels: int = 1) -> ModelState:
    """Initialize parameters from ``config.seed`` (global torch RNG is left untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = PrototypeDiffusion(
            config.variant, K=config.K, D=config.D, T=config.T, in_channels=in_channels,
            widths=config.widths, encoder_widths=config.encoder_widths, heads=config.heads)
    optimizer = make_optimizer(model, config.lr)
    gen = torch.Generator().manual_seed(config.seed + 1)
    return ModelState(config, model, optimizer, config.schedule(), gen)


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)


def supervised_select(label, bank: PrototypeBank) -> torch.Tensor:
    """Prototype bound to ``label`` (no distance computation)."""
    return bank.e[prototype_index_for(label, bank)]


def prototype_index_for(label, bank: PrototypeBank) -> torch.Tensor:
    if bank.labels is None:
        raise ValueError("prototype bank has no class bindings")
    lookup = {c: k for k, c in enumerate(bank.labels)}
    lab = torch.as_tensor(label).reshape(-1).tolist()
    try:
        idx = torch.tensor([lookup[int(c)] for c in lab], dtype=torch.long)
    except KeyError as exc:
        raise KeyError(f"no prototype bound to label {exc.args[0]}") from None
    return idx[0] if torch.as_tensor(label).ndim == 0 else idx


def compute_losses(model: PrototypeDiffusion, x: torch.Tensor, labels, t: torch.Tensor,
                   eps: torch.Tensor, schedule: NoiseSchedule, config: RunConfig) -> dict:
    """Differentiable loss terms for a batch with given timesteps and noise.

    Keys: ``diff`` always; ``contrastive`` and ``align`` unless DDPM;
    ``compact`` for PDM only. Batch terms are means over items; ``diff``
    sums squared error over pixels.
    """
    bank = model.prototypes
    x_t = forward_sample(x, t, eps, schedule).x_t
    terms = {}
    if config.variant == "ddpm":
        cond = model.condition(None, t)
    else:
        x_hat = model.encode(x)
        if config.variant == "spdm":
            if labels is None:
                raise ValueError("s-PDM training needs labels")
            idx = prototype_index_for(torch.as_tensor(labels).reshape(-1), bank)
        else:
            idx = assign(x_hat, bank).index
        e_x = bank.e[idx]
        cond = model.condition(e_x, t)
        terms["contrastive"] = contrastive_term(x_hat, bank.e, idx, config.tau)
        terms["align"] = align_term(x_hat, e_x)
        if config.variant == "pdm":
            terms["compact"] = compact_term(bank.e, config.beta_compact)
    eps_hat = model.denoise(x_t, cond)
    terms["diff"] = ((eps - eps_hat) ** 2).flatten(1).sum(1).mean()
    return terms


def train_step(images, labels, state: ModelState) -> LossReport:
    """One joint update on a minibatch.

    Draws a timestep and Gaussian noise per item from ``state.generator``,
    then steps the optimizer on the sum of :func:`compute_losses`.
    """
    cfg, model = state.config, state.model
    x = torch.as_tensor(images, dtype=torch.float32)
    if x.ndim != 4 or len(x) == 0:
        raise ValueError(f"expected a non-empty [B, C, H, W] batch, got {tuple(x.shape)}")
    B = x.shape[0]
    t = torch.randint(1, cfg.T + 1, (B,), generator=state.generator)
    eps = torch.randn(x.shape, generator=state.generator)
    terms = compute_losses(model, x, labels, t, eps, state.schedule, cfg)

    loss = sum(terms.values())
    report = LossReport(state.step + 1, **{k: float(v.detach()) for k, v in terms.items()})
    if not all(math.isfinite(v) for v in (report.diff, report.contrastive,
                                          report.align, report.compact)):
        raise NumericalError(f"non-finite loss at step {report.step}: {report}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.history.append(report)
    return report


def write_loss_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in reports:
            w.writerow([r.step] + [repr(float(v)) for v in r.row()[1:]])


def train(dataset: Dataset, config: RunConfig, out_dir=None, state: Optional[ModelState] = None,
          on_checkpoint: Optional[Callable[[ModelState, Path], None]] = None) -> ModelState:
    """Run ``config.epochs`` seeded-shuffle epochs (capped at ``max_steps``).

    With ``out_dir`` set, writes ``loss.csv`` at the end and calls
    ``on_checkpoint(state, path)`` every ``checkpoint_every`` steps and once at
    the end.
    """
    if config.variant == "spdm":
        if dataset.labels is None:
            raise ValueError("s-PDM training needs a labeled dataset")
        if config.K != dataset.num_classes:
            raise ValueError(f"s-PDM needs K = number of classes ({dataset.num_classes}), got {config.K}")
    if state is None:
        state = build_state(config, in_channels=dataset.shape[0])
    state.image_shape = tuple(int(s) for s in dataset.shape)
    out = Path(out_dir) if out_dir is not None else None
    shuffle_rng = np.random.default_rng(config.seed + 2)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels) if dataset.labels is not None else None

    done = False
    for epoch in range(config.epochs):
        for idx in shuffled_batches(len(dataset), config.batch_size, shuffle_rng):
            idx = torch.from_numpy(idx)
            rep = train_step(images[idx], labels[idx] if labels is not None else None, state)
            if rep.step % 500 == 0:
                log.info("step %d total %.4f diff %.4f", rep.step, rep.total, rep.diff)
            if out is not None and on_checkpoint and config.checkpoint_every \
                    and rep.step % config.checkpoint_every == 0:
                on_checkpoint(state, out / f"ckpt_{rep.step}.bin")
            if config.max_steps and state.step >= config.max_steps:
                done = True
                break
        if done:
            break

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_loss_csv(state.history, out / "loss.csv")
        if on_checkpoint and not (config.checkpoint_every and state.step % config.checkpoint_every == 0):
            on_checkpoint(state, out / f"ckpt_{state.step}.bin")
    return state


def assignment_purity(model: PrototypeDiffusion, images, labels) -> tuple[float, dict]:
    """Agreement between nearest-prototype clusters and class labels.

    For a bank bound to classes (s-PDM) this is the fraction of items whose
    nearest prototype is their class's. Otherwise it is cluster purity: each
    prototype's cluster is credited with its majority class, so a bank that
    sends every item to one prototype scores the largest class share.
    The mapping sends each class to the prototype most of its items reach
    (or to its bound prototype).
    """
    with torch.no_grad():
        feats = model.encode(torch.as_tensor(images, dtype=torch.float32))
        idx = assign(feats, model.prototypes).index.numpy()
    labels = np.asarray(labels)
    bank = model.prototypes
    classes = np.unique(labels)
    if bank.labels is not None:
        mapping = {int(c): bank.labels.index(int(c)) for c in classes}
        expected = np.array([mapping[int(c)] for c in labels])
        return float((idx == expected).mean()), mapping
    table = np.array([[np.sum((idx == k) & (labels == c)) for c in classes] for k in range(bank.K)])
    mapping = {int(c): int(table[:, j].argmax()) for j, c in enumerate(classes)}
    return float(table.max(axis=1).sum() / len(labels)), mapping
