"""Binary checkpoint container.

Layout (little-endian)::

    b"PDMC"  u32 version
    u32 header_len   header (UTF-8 JSON: config, step, variant, bank labels)
    u32 n_tensors
    n_tensors x [u32 name_len, name (UTF-8), u8 dtype, u32 ndim, u32 dims..., payload]

dtype codes: 0 float32, 1 float64, 2 int64, 3 uint8. Parameters and
optimizer moments are float32, the schedule betas float64 and the RNG state
uint8.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .schedule import NoiseSchedule
from .training import ModelState, PrototypeDiffusion, RunConfig, make_optimizer

MAGIC = b"PDMC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


def _named_tensors(state: ModelState) -> dict:
    tensors = {}
    for name, p in state.model.named_parameters():
        tensors["prototypes" if name == "prototypes.e" else name] = p.detach().numpy()
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, st in state.optimizer.state.items():
        base = names[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                tensors[f"optim.{base}.{key}"] = st[key].numpy()
        if "step" in st:
            tensors[f"optim.{base}.step"] = np.array([float(st["step"])], dtype=np.float32)
    tensors["schedule.beta"] = np.asarray(state.schedule.beta, dtype=np.float64)
    tensors["rng.state"] = state.generator.get_state().numpy()
    return tensors


def encode_tensors(tensors: dict, header: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(h)))
    buf.write(h)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            dt = _DTYPES[0]
        elif arr.dtype == np.float64:
            dt = _DTYPES[1]
        elif arr.dtype.kind in "iu" and arr.dtype.itemsize > 1:
            dt = _DTYPES[2]
        elif arr.dtype == np.uint8:
            dt = _DTYPES[3]
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def decode_tensors(data: bytes):
    """Parse a container; returns ``(header, {name: array})``."""
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    off = 8
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    try:
        for _ in range(n):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BI", data, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
            off += count * dt.itemsize
            tensors[name] = arr.copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    return header, tensors


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "config": state.config.to_dict(),
        "step": state.step,
        "labels": state.model.prototypes.labels,
        "in_channels": state.model.unet.stem.in_channels,
        "image_shape": list(state.image_shape),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tensors(_named_tensors(state), header))


def load_checkpoint(path) -> ModelState:
    header, tensors = decode_tensors(Path(path).read_bytes())
    cfg = RunConfig.from_dict(header["config"])
    model = PrototypeDiffusion(
        cfg.variant, K=cfg.K, D=cfg.D, T=cfg.T, in_channels=header["in_channels"],
        widths=cfg.widths, encoder_widths=cfg.encoder_widths, labels=header["labels"],
        heads=cfg.heads)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = "prototypes" if name == "prototypes.e" else name
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key}")
            src = torch.from_numpy(tensors[key])
            if src.shape != p.shape:
                raise CheckpointError(f"{key}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src)
    opt = make_optimizer(model, cfg.lr)
    for name, p in params.items():
        key = f"optim.{name}"
        if f"{key}.exp_avg" in tensors:
            opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{key}.step"][0])),
                "exp_avg": torch.from_numpy(tensors[f"{key}.exp_avg"]).clone(),
                "exp_avg_sq": torch.from_numpy(tensors[f"{key}.exp_avg_sq"]).clone(),
            }
    gen = torch.Generator()
    gen.set_state(torch.from_numpy(tensors["rng.state"]).clone())
    schedule = NoiseSchedule(tensors["schedule.beta"])
    return ModelState(cfg, model, opt, schedule, gen, step=int(header["step"]),
                      image_shape=tuple(header.get("image_shape", ())))


def dump(path) -> str:
    """Human-readable listing of a checkpoint's header and tensor table."""
    header, tensors = decode_tensors(Path(path).read_bytes())
    lines = [f"version {VERSION}", json.dumps(header, indent=2, sort_keys=True)]
    for name, arr in tensors.items():
        lines.append(f"{name}\t{arr.dtype}\t{list(arr.shape)}")
    return "\n".join(lines)
