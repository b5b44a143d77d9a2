"""Self-describing checkpoint archives (format tag ``pynet-ckpt-v1``).

A checkpoint is a zip archive::

    manifest.json        format tag, PyNetConfig, trained_level, tensor index,
                         optimizer scalars, training progress
    history.json         TrainHistory records
    tensors/<name>.bin   raw little-endian float32 data, shape in the manifest

Optimizer moments are stored as tensors named ``optim/<param>/<slot>``.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError, ConfigMismatchError
from .model import PyNet, PyNetConfig

FORMAT_TAG = "pynet-ckpt-v1"
_DTYPE = "<f4"


@dataclass
class CheckpointData:
    model: PyNet
    history: dict
    optimizer: dict | None = None
    train_state: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().astype(_DTYPE, copy=False).tobytes()


def optimizer_state_by_name(model: PyNet, optimizer: torch.optim.Optimizer) -> dict:
    """Adam state keyed by parameter name instead of optimizer-internal ids."""
    names = {id(p): n for n, p in model.named_parameters()}
    state = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            state[names[id(p)]] = {
                "step": float(st["step"]),
                "exp_avg": st["exp_avg"],
                "exp_avg_sq": st["exp_avg_sq"],
            }
    group = optimizer.param_groups[0]
    return {
        "hyper": {"lr": group["lr"], "betas": list(group["betas"]), "eps": group["eps"]},
        "params": [names[id(p)] for g in optimizer.param_groups for p in g["params"]],
        "state": state,
    }


def restore_optimizer(model: PyNet, optimizer: torch.optim.Optimizer, saved: dict) -> None:
    by_name = dict(model.named_parameters())
    for name, st in saved["state"].items():
        p = by_name[name]
        optimizer.state[p] = {
            "step": torch.tensor(st["step"], dtype=torch.float32),
            "exp_avg": st["exp_avg"].clone(),
            "exp_avg_sq": st["exp_avg_sq"].clone(),
        }


def save_checkpoint(model: PyNet, history, path, optimizer: dict | None = None,
                    train_state: dict | None = None) -> Path:
    """Write a checkpoint atomically. ``optimizer`` comes from :func:`optimizer_state_by_name`."""
    path = Path(path)
    tensors: dict[str, torch.Tensor] = {
        f"param/{n}": p for n, p in model.named_parameters()
    }
    optim_meta = None
    if optimizer is not None:
        optim_meta = {"hyper": optimizer["hyper"], "params": optimizer["params"], "steps": {}}
        for name, st in optimizer["state"].items():
            optim_meta["steps"][name] = st["step"]
            tensors[f"optim/{name}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]

    index = {}
    for name, t in tensors.items():
        index[name] = {"shape": list(t.shape), "dtype": _DTYPE, "file": f"tensors/{name}.bin",
                       "nbytes": t.numel() * 4}
    manifest = {
        "format": FORMAT_TAG,
        "config": model.config.to_dict(),
        "trained_level": model.trained_level,
        "tensors": index,
        "optimizer": optim_meta,
        "train_state": train_state or {},
    }
    hist = history.to_dict() if hasattr(history, "to_dict") else (history or {})

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("history.json", json.dumps(hist))
        for name, t in tensors.items():
            zf.writestr(index[name]["file"], _tensor_bytes(t))
    os.replace(tmp, path)
    return path


def read_checkpoint(path, expected_config: PyNetConfig | None = None) -> CheckpointData:
    """Load every part of a checkpoint; nothing is returned unless all of it validates."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT_TAG:
                raise CheckpointFormatError(
                    f"{path}: format tag {manifest.get('format')!r}, expected {FORMAT_TAG!r}"
                )
            history = json.loads(zf.read("history.json"))
            arrays = {}
            for name, entry in manifest["tensors"].items():
                raw = zf.read(entry["file"])
                if entry["dtype"] != _DTYPE or len(raw) != entry["nbytes"]:
                    raise CheckpointFormatError(f"{path}: tensor {name} has bad size or dtype")
                arrays[name] = torch.from_numpy(
                    np.frombuffer(raw, dtype=_DTYPE).astype(np.float32).reshape(entry["shape"])
                )
    except CheckpointFormatError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, TypeError, OSError, EOFError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from exc

    config = PyNetConfig.from_dict(manifest["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(
            f"{path} was written for {config.to_dict()}, expected {expected_config.to_dict()}"
        )
    model = PyNet(config)
    params = dict(model.named_parameters())
    saved = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if saved.keys() != params.keys():
        raise CheckpointFormatError(f"{path}: parameter set does not match its config")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(saved[name].shape) != tuple(p.shape):
                raise CheckpointFormatError(f"{path}: shape mismatch for {name}")
            p.copy_(saved[name])
    model.trained_level = int(manifest["trained_level"])

    optimizer = None
    meta = manifest.get("optimizer")
    if meta is not None:
        state = {
            name: {
                "step": step,
                "exp_avg": arrays[f"optim/{name}/exp_avg"],
                "exp_avg_sq": arrays[f"optim/{name}/exp_avg_sq"],
            }
            for name, step in meta["steps"].items()
        }
        optimizer = {"hyper": meta["hyper"], "params": meta["params"], "state": state}
    return CheckpointData(model, history, optimizer, manifest.get("train_state", {}))


def load_checkpoint(path, expected_config: PyNetConfig | None = None):
    """Return ``(model, history)``."""
    data = read_checkpoint(path, expected_config)
    return data.model, data.history


def checkpoint_bytes(model: PyNet) -> bytes:
    """Serialized parameters only; handy for equality checks."""
    buf = io.BytesIO()
    for _, p in model.named_parameters():
        buf.write(_tensor_bytes(p))
    return buf.getvalue()
