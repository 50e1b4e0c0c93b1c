"""Image datasets: PNG directories and the synthetic two-mode toy set.

Images are stored channel-first as float32 in [-1, 1] (``x / 127.5 - 1``).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image


class DataError(Exception):
    """Raised for unreadable, empty or inconsistent datasets."""


@dataclass
class Dataset:
    images: np.ndarray                  # [N, C, H, W] float32 in [-1, 1]
    labels: Optional[np.ndarray] = None  # [N] int64 or None
    name: str = "dataset"
    num_classes: int = 0
    filenames: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DataError("one label per image required")
            if not self.num_classes:
                self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DataError(f"labels must cover [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def resolution(self):
        return self.images.shape[2:]


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 ``[0, 255]`` to float32 ``[-1, 1]``."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def to_uint8(images) -> np.ndarray:
    """Clamp to [-1, 1] and map affinely onto ``[0, 255]`` (rounded)."""
    x = np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    """Write one ``[C, H, W]`` image in [-1, 1] as an 8-bit PNG (grayscale or RGB)."""
    pix = to_uint8(image)
    if pix.shape[0] == 1:
        img = Image.fromarray(pix[0])
    elif pix.shape[0] == 3:
        img = Image.fromarray(np.ascontiguousarray(np.transpose(pix, (1, 2, 0))))
    else:
        raise ValueError(f"cannot write {pix.shape[0]}-channel image as PNG")
    img.save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """One PNG as a ``[C, H, W]`` float32 array in [-1, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
    return to_unit_range(arr)


def load_image_dir(path, labels_file=None) -> Dataset:
    """Load every ``*.png`` in ``path`` (sorted by name) into a Dataset.

    ``labels_file`` is a CSV with a ``filename,label`` header; every image must
    have a row.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no PNG images in {root}")

    arrays = []
    for p in files:
        arr = load_png(p)
        if arrays and arr.shape != arrays[0].shape:
            raise DataError(f"{p.name} has shape {arr.shape}, expected {arrays[0].shape}")
        arrays.append(arr)
    images = np.stack(arrays)

    labels = None
    if labels_file is not None:
        table = {}
        with open(labels_file, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
                raise DataError(f"{labels_file}: header must contain filename,label")
            for row in reader:
                table[row["filename"]] = int(row["label"])
        missing = [p.name for p in files if p.name not in table]
        if missing:
            raise DataError(f"no label row for {missing[0]} ({len(missing)} missing)")
        labels = np.array([table[p.name] for p in files], dtype=np.int64)

    return Dataset(images, labels, name=root.name, filenames=[p.name for p in files])


def export_image_dir(dataset: Dataset, path, labels: bool = True) -> None:
    """Write a dataset as numbered PNGs plus ``labels.csv`` when labels are present."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(dataset.images):
        name = f"{i:06d}.png"
        save_png(img, root / name)
        names.append(name)
    if labels and dataset.labels is not None:
        with open(root / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["filename", "label"])
            for name, y in zip(names, dataset.labels):
                w.writerow([name, int(y)])


def two_mode_template(size: int, mode: int) -> np.ndarray:
    """Noise-free ``[1, size, size]`` image: dark field, bright block on the left (0) or right (1) half."""
    img = np.full((1, size, size), -0.8, dtype=np.float32)
    m = size // 8
    rows = slice(m, size - m)
    cols = slice(m, size // 2 - m) if mode == 0 else slice(size // 2 + m, size - m)
    img[0, rows, cols] = 0.8
    return img


def synth_two_mode(n: int = 2000, size: int = 16, seed: int = 0, noise: float = 0.1) -> Dataset:
    """``n/2`` left-bright and ``n/2`` right-bright images with Gaussian texture.

    Items alternate label 0, 1, 0, 1, ...; pixel values are clipped to [-1, 1].
    """
    if size < 8 or size % 2:
        raise DataError(f"size must be an even integer >= 8, got {size}")
    if n < 2 or n % 2:
        raise DataError(f"n must be a positive even count, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.tile(np.array([0, 1], dtype=np.int64), n // 2)
    templates = np.stack([two_mode_template(size, 0), two_mode_template(size, 1)])
    images = templates[labels] + noise * rng.standard_normal((n, 1, size, size)).astype(np.float32)
    images = np.clip(images, -1.0, 1.0).astype(np.float32)
    return Dataset(images, labels, name=f"two_mode_{size}", num_classes=2)


def mode_of(images) -> np.ndarray:
    """Brute-force mode oracle: 0 if the left half is brighter on average, else 1."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    w = x.shape[-1] // 2
    left = x[..., :w].mean(axis=(1, 2, 3))
    right = x[..., w:].mean(axis=(1, 2, 3))
    return (right > left).astype(np.int64)


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = False):
    """Yield index arrays covering a seeded permutation of ``range(n)``."""
    order = rng.permutation(n)
    stop = n - (n % batch_size) if drop_last else n
    for i in range(0, stop, batch_size):
        yield order[i:i + batch_size]


def resolve_dataset(spec: str, labels_file=None) -> Dataset:
    """``synth:two_mode[:n=...][:size=...][:seed=...]`` or a PNG directory path."""
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if parts[1] != "two_mode":
            raise DataError(f"unknown synthetic dataset {parts[1]!r}")
        kw = {}
        for p in parts[2:]:
            k, _, v = p.partition("=")
            if k not in ("n", "size", "seed"):
                raise DataError(f"unknown synthetic dataset option {k!r}")
            kw[k] = int(v)
        return synth_two_mode(**kw)
    if labels_file is None and os.path.exists(os.path.join(spec, "labels.csv")):
        labels_file = os.path.join(spec, "labels.csv")
    return load_image_dir(spec, labels_file)
