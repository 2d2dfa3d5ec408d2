"""Checkpoint directories: ``params.bin`` + ``arch.json`` (+ optimizer/train state).

``params.bin`` holds a magic header, a record count, then per record: name
length (u32), UTF-8 name, ndim (u32), dims (u32 each) and little-endian
float32 data.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CAPARAM1"


class CheckpointError(RuntimeError):
    pass


def write_blobs(path, tensors: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(torch.as_tensor(value).detach().cpu().numpy(), dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_blobs(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a parameter blob file")
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def state_tensors(modules: dict) -> dict:
    """Flatten {prefix: module} into {prefix.param_name: tensor}."""
    out = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            out[f"{prefix}.{name}"] = value
    return out


def load_into(module: torch.nn.Module, tensors: dict, prefix: str):
    """Copy ``prefix.*`` tensors into ``module``, requiring exact name/shape agreement."""
    expected = module.state_dict()
    found = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names disagree for {prefix!r}: missing={missing} unexpected={extra}")
    for name, value in found.items():
        if tuple(value.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"shape mismatch for {prefix}.{name}: checkpoint {tuple(value.shape)} "
                f"vs model {tuple(expected[name].shape)}")
    module.load_state_dict({k: v.to(expected[k].dtype) for k, v in found.items()})


def has_prefix(tensors: dict, prefix: str) -> bool:
    return any(k.startswith(prefix + ".") for k in tensors)


def save(ckpt_dir, arch: dict, modules: dict, optimizer=None, param_names=None, train_state=None):
    """Write a checkpoint directory.

    ``param_names`` maps optimizer parameters (by identity) to their blob
    names so optimizer moments can be stored alongside.
    """
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_blobs(ckpt_dir / "params.bin", state_tensors(modules))
    (ckpt_dir / "arch.json").write_text(json.dumps(arch, indent=1, sort_keys=True) + "\n")
    if optimizer is not None:
        blobs = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = param_names[id(p)]
                blobs[f"exp_avg/{name}"] = st["exp_avg"]
                blobs[f"exp_avg_sq/{name}"] = st["exp_avg_sq"]
                blobs[f"step/{name}"] = torch.as_tensor(float(st["step"]))
        write_blobs(ckpt_dir / "optim.bin", blobs)
    if train_state is not None:
        (ckpt_dir / "train_state.json").write_text(json.dumps(train_state, sort_keys=True) + "\n")


def load(ckpt_dir):
    """Return (arch, tensors, optimizer blobs or None, train_state or None)."""
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / "params.bin").is_file() or not (ckpt_dir / "arch.json").is_file():
        raise CheckpointError(f"{ckpt_dir} is not a checkpoint directory (params.bin/arch.json missing)")
    arch = json.loads((ckpt_dir / "arch.json").read_text())
    tensors = read_blobs(ckpt_dir / "params.bin")
    optim = read_blobs(ckpt_dir / "optim.bin") if (ckpt_dir / "optim.bin").is_file() else None
    state = None
    if (ckpt_dir / "train_state.json").is_file():
        state = json.loads((ckpt_dir / "train_state.json").read_text())
    return arch, tensors, optim, state


def restore_optimizer(optimizer, blobs: dict, param_names):
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = param_names[id(p)]
            if f"exp_avg/{name}" not in blobs:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(blobs[f"step/{name}"])),
                "exp_avg": blobs[f"exp_avg/{name}"].to(p.dtype).clone(),
                "exp_avg_sq": blobs[f"exp_avg_sq/{name}"].to(p.dtype).clone(),
            }
