"""Checkpoint archive: a zip of canonical config text plus named .npy tensors.

Layout:
    config.yaml            resolved run/model configuration
    meta.json              {"format": 1, "step": ..., ...}
    params/<name>.npy      parameter tensors under stable dotted names
    opt/m.<name>.npy       Adam first moments   (trainer checkpoints only)
    opt/v.<name>.npy       Adam second moments
    opt/step.<name>.npy    Adam per-parameter step counters

Stable names are the module paths with weight -> w and bias -> b, e.g.
"fpn.down.0.w", "proj.s2.w", "head.fc1.b", "recon.conv2.w".
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import yaml


class CheckpointError(ValueError):
    """Raised for malformed archives or architecture mismatches."""


def stable_parameter_names(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        out[name.replace(".weight", ".w").replace(".bias", ".b")] = p
    return out


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array)
    return buf.getvalue()


def save_checkpoint(
    path,
    config: dict,
    model: torch.nn.Module,
    step: int,
    optimizer: torch.optim.Optimizer | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    meta = {"format": 1, "step": int(step), **(extra_meta or {})}
    params = stable_parameter_names(model)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("config.yaml", yaml.safe_dump(config, sort_keys=True))
        zf.writestr("meta.json", json.dumps(meta, indent=2))
        for name, p in sorted(params.items()):
            zf.writestr(f"params/{name}.npy", _npy_bytes(p.detach().cpu().numpy()))
        if optimizer is not None:
            state = _adam_state_by_name(optimizer, params)
            for name, (m, v, steps) in sorted(state.items()):
                zf.writestr(f"opt/m.{name}.npy", _npy_bytes(m))
                zf.writestr(f"opt/v.{name}.npy", _npy_bytes(v))
                zf.writestr(f"opt/step.{name}.npy", _npy_bytes(steps))
    tmp.replace(path)


def _adam_state_by_name(optimizer, params: dict[str, torch.Tensor]):
    by_tensor = {id(p): name for name, p in params.items()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state or id(p) not in by_tensor:
                continue
            out[by_tensor[id(p)]] = (
                state["exp_avg"].cpu().numpy(),
                state["exp_avg_sq"].cpu().numpy(),
                np.asarray(state["step"].cpu().numpy() if torch.is_tensor(state["step"]) else state["step"]),
            )
    return out


def read_checkpoint(path) -> tuple[dict, dict, dict[str, np.ndarray], dict]:
    """Return (config, meta, params, opt_entries)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            config = yaml.safe_load(zf.read("config.yaml"))
            meta = json.loads(zf.read("meta.json"))
            params, opt = {}, {}
            for info in zf.infolist():
                if info.filename.startswith("params/"):
                    name = info.filename[len("params/"):-len(".npy")]
                    params[name] = np.load(io.BytesIO(zf.read(info)))
                elif info.filename.startswith("opt/"):
                    name = info.filename[len("opt/"):-len(".npy")]
                    opt[name] = np.load(io.BytesIO(zf.read(info)))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if meta.get("format") != 1:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')}")
    return config, meta, params, opt


def load_parameters(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    """Copy named arrays into the model; any name/shape mismatch is an error."""
    own = stable_parameter_names(model)
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise CheckpointError(
            f"architecture mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}"
        )
    with torch.no_grad():
        for name, p in own.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"architecture mismatch at {name}: checkpoint {arr.shape} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))


def load_adam_state(
    optimizer: torch.optim.Optimizer, model: torch.nn.Module, opt_entries: dict[str, np.ndarray]
) -> None:
    """Rehydrate Adam moments saved by save_checkpoint."""
    if not opt_entries:
        return
    for name, p in stable_parameter_names(model).items():
        key_m, key_v, key_s = f"m.{name}", f"v.{name}", f"step.{name}"
        if key_m not in opt_entries:
            continue
        optimizer.state[p] = {
            "step": torch.as_tensor(opt_entries[key_s].copy(), dtype=torch.float32),
            "exp_avg": torch.from_numpy(opt_entries[key_m].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(opt_entries[key_v].copy()).to(p.dtype),
        }
