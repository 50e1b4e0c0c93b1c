"""Command-line entry points: ``train``, ``sample``, ``eval``, ``ablate`` and ``dump``.

Config files are flat ``key = value`` text with ``#`` comments; keys are the
:class:`~protodiff.training.RunConfig` fields. Command-line flags of the same
name override file values. ``PDM_OUT`` overrides ``--out``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import DataError, Dataset, load_png, resolve_dataset, save_png
from .metrics import pca_project, proxy_scores, train_feature_net
from .prototypes import assign
from .sampler import SampleRequest, generate, make_grid
from .training import NumericalError, RunConfig, train

log = logging.getLogger("protodiff")

METRIC_COLUMNS = ("variant", "dataset", "K", "proxy_is", "proxy_fid", "proxy_kid", "n_real", "n_gen")
ABLATION_COLUMNS = ("K", "proxy_is", "proxy_fid", "proxy_kid")


class ConfigError(Exception):
    pass


EXIT_CODES = {ConfigError: 2, DataError: 3, NumericalError: 4}


# -- config -----------------------------------------------------------------

def _coerce(field: dataclasses.Field, raw: str):
    default = field.default
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip())
    return raw


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; errors name the offending line number."""
    values = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            errors.append(f"{source}:{lineno}: expected key = value")
            continue
        if key not in _FIELDS:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(_FIELDS[key], raw)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key}: {exc}")
    if errors:
        raise ConfigError("\n".join(errors))
    return values


def format_config(config: RunConfig) -> str:
    lines = []
    for name, value in config.to_dict().items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_config(text, str(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _add_config_flags(p: argparse.ArgumentParser):
    for name, f in _FIELDS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", default=None,
                       type=lambda raw, f=f: _coerce(f, raw), metavar=name.upper())


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _out_dir(args) -> Path:
    out = Path(os.environ.get("PDM_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ensure(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(config_or_spec, labels=None) -> Dataset:
    spec = config_or_spec.dataset if isinstance(config_or_spec, RunConfig) else config_or_spec
    if isinstance(config_or_spec, RunConfig):
        labels = config_or_spec.labels or labels
    if not spec.startswith("synth:") and not os.path.exists(spec):
        raise DataError(f"dataset path does not exist: {spec}")
    return resolve_dataset(spec, labels or None)


# -- commands ---------------------------------------------------------------

def cmd_train(config: RunConfig, out: Path):
    dataset = _load_dataset(config)
    out = _ensure(out)
    (out / "resolved.cfg").write_text(format_config(config))
    state = train(dataset, config, out_dir=out, on_checkpoint=checkpoint.save_checkpoint)
    return state


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def cmd_sample(ckpt, out: Path, count: int = 16, seed: int = 0, ref_image=None, label=None,
               proto_index=None, t_override=None) -> np.ndarray:
    state = checkpoint.load_checkpoint(ckpt)
    out = _ensure(out)
    if label is not None and state.config.variant != "spdm":
        raise ConfigError("--label needs an s-PDM checkpoint")
    ref = None
    if ref_image is not None:
        ref = load_png(ref_image)
    req = SampleRequest(count=count, seed=seed, reference=ref, label=label,
                        proto_index=proto_index, t_override=t_override)
    shape = state.image_shape
    images = generate(req, state.model, state.schedule, shape)
    save_png(make_grid(images), out / "grid.png")
    for i, img in enumerate(images):
        save_png(img, out / f"sample_{seed}_{i}.png")
    return images


def evaluate(model, dataset: Dataset, gen_images: np.ndarray, seed: int = 0,
             labels=None, feature_epochs: int = 3):
    """Proxy metrics of ``gen_images`` against ``dataset`` plus the encoder PCA table.

    The proxy classifier is trained on the dataset labels, or on the model's
    prototype assignments when the dataset is unlabeled.
    """
    images = dataset.images
    with torch.no_grad():
        feats = model.encode(torch.from_numpy(images)).double().numpy()
    assigned = (assign(torch.from_numpy(feats), model.prototypes.e.double()).index.numpy()
                if model.variant != "ddpm" else np.full(len(images), -1))
    if labels is None:
        labels = dataset.labels
    if labels is None:
        if model.variant == "ddpm":
            raise DataError("evaluating a DDPM checkpoint needs a labeled dataset")
        labels = assigned
    num_classes = int(np.max(labels)) + 1
    net = train_feature_net(images, labels, num_classes, seed=seed, epochs=feature_epochs)
    scores = proxy_scores(net, images, gen_images)
    proj, _, _ = pca_project(feats)
    pca_rows = []
    for i in range(len(images)):
        row = [proj[i, 0], proj[i, 1], int(assigned[i])]
        if dataset.labels is not None:
            row.append(int(dataset.labels[i]))
        pca_rows.append(row)
    return scores, pca_rows


def cmd_eval(ckpt, dataset_spec: str | None, out: Path, n_gen: int = 256, seed: int = 0,
             gen_dir=None, t_override=None, feature_epochs: int = 3) -> dict:
    if n_gen < 2:
        raise ConfigError("--n-gen must be at least 2")
    state = checkpoint.load_checkpoint(ckpt)
    dataset = _load_dataset(dataset_spec or state.config.dataset)
    if gen_dir is not None:
        gen_images = _load_dataset(str(gen_dir)).images
    else:
        req = SampleRequest(count=n_gen, seed=seed, t_override=t_override)
        gen_images = generate(req, state.model, state.schedule, dataset.shape)
    scores, pca_rows = evaluate(state.model, dataset, gen_images, seed=seed,
                                feature_epochs=feature_epochs)
    out = _ensure(out)
    row = [state.config.variant, dataset.name, state.config.K, scores["proxy_is"],
           scores["proxy_fid"], scores["proxy_kid"], len(dataset), len(gen_images)]
    write_csv(out / "metrics.csv", METRIC_COLUMNS, [row])
    cols = ["x", "y", "assigned_prototype"] + (["label"] if dataset.labels is not None else [])
    write_csv(out / "pca.csv", cols, pca_rows)
    return dict(zip(METRIC_COLUMNS, row))


def parse_k_list(raw: str) -> list:
    try:
        ks = [int(v) for v in str(raw).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --k-list {raw!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("--k-list needs positive integers")
    if len(set(ks)) != len(ks):
        raise ConfigError(f"duplicate K values in --k-list {raw!r}")
    return ks


def cmd_ablate(config: RunConfig, k_list, out: Path, n_gen: int = 256,
               t_override=None, feature_epochs: int = 3) -> list:
    """Train one PDM per K with identical seed and budget, evaluate each, write ablation.csv."""
    ks = parse_k_list(k_list) if isinstance(k_list, str) else list(k_list)
    if len(set(ks)) != len(ks):
        raise ConfigError("duplicate K values")
    dataset = _load_dataset(config)
    rows = []
    for K in ks:
        cfg = dataclasses.replace(config, variant="pdm", K=K)
        state = train(dataset, cfg)
        req = SampleRequest(count=n_gen, seed=config.seed, t_override=t_override)
        gen = generate(req, state.model, state.schedule, dataset.shape)
        # score against the true labels when available so every K shares one proxy network
        scores, _ = evaluate(state.model, dataset, gen, seed=config.seed,
                             feature_epochs=feature_epochs)
        rows.append([K, scores["proxy_is"], scores["proxy_fid"], scores["proxy_kid"]])
        log.info("K=%d fid=%.4f", K, scores["proxy_fid"])
    write_csv(_ensure(out) / "ablation.csv", ABLATION_COLUMNS, rows)
    return rows


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protodiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config", nargs="?")
    p.add_argument("--out", default="runs/train")
    _add_config_flags(p)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--out", default="runs/sample")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-override", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ref-image")
    g.add_argument("--label", type=int)
    g.add_argument("--proto-index", type=int)

    p = sub.add_parser("eval", help="proxy IS/FID/KID and PCA projection")
    p.add_argument("ckpt")
    p.add_argument("--dataset")
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--n-gen", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gen-dir", help="score these images instead of sampling")
    p.add_argument("--t-override", type=int)

    p = sub.add_parser("ablate", help="train and score one PDM per prototype count")
    p.add_argument("config", nargs="?")
    p.add_argument("--k-list", required=True)
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--n-gen", type=int, default=256)
    p.add_argument("--t-override", type=int)
    _add_config_flags(p)

    p = sub.add_parser("dump", help="print a checkpoint's header and tensor table")
    p.add_argument("ckpt")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cmd_train(load_config(args.config, _overrides(args)), _out_dir(args))
        elif args.command == "sample":
            cmd_sample(args.ckpt, _out_dir(args), args.count, args.seed, args.ref_image,
                       args.label, args.proto_index, args.t_override)
        elif args.command == "eval":
            cmd_eval(args.ckpt, args.dataset, _out_dir(args), args.n_gen, args.seed,
                     args.gen_dir, args.t_override)
        elif args.command == "ablate":
            cmd_ablate(load_config(args.config, _overrides(args)), args.k_list,
                       _out_dir(args), args.n_gen, args.t_override)
        elif args.command == "dump":
            print(checkpoint.dump(args.ckpt))
    except tuple(EXIT_CODES) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES[type(exc)]
    except checkpoint.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
