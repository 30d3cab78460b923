"""Checkpoint container: named tensors in an npz-compatible zip plus a JSON
manifest.

The zip is written with fixed timestamps so identical tensors produce
bit-identical files; ``numpy.load`` can read them directly.  The manifest
records name/shape/dtype/sha256 per tensor, a config snapshot, the RNG state
and free-form metadata (e.g. the restorer's ``loss_mode_tag``); checksums are
verified on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    """Missing files or checksum mismatches."""


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.stem + ".manifest.json")


def _sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def tensor_checksums(tensors: Mapping[str, torch.Tensor]) -> dict[str, str]:
    return {k: _sha256(v.detach().cpu().numpy()) for k, v in sorted(tensors.items())}


def module_checksum(module: torch.nn.Module) -> str:
    """One digest over all parameters and buffers, order-stable."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    component: str,
    tensors: Mapping[str, torch.Tensor],
    config: Mapping[str, Any] | None = None,
    extra: Mapping[str, Any] | None = None,
    rng: Mapping[str, Any] | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in tensors.items()}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arrays[name], allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
            zf.writestr(info, buf.getvalue())
    manifest = {
        "component": component,
        "parameters": [
            {
                "name": k,
                "shape": list(arrays[k].shape),
                "dtype": str(arrays[k].dtype),
                "sha256": _sha256(arrays[k]),
            }
            for k in sorted(arrays)
        ],
        "config": dict(config or {}),
        "extra": dict(extra or {}),
        "rng": dict(rng or {}),
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Load tensors and manifest, verifying every checksum."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise CheckpointError(f"manifest {mpath} not found")
    manifest = json.loads(mpath.read_text())
    expected = {p["name"]: p["sha256"] for p in manifest["parameters"]}
    tensors: dict[str, torch.Tensor] = {}
    with zipfile.ZipFile(path, "r") as zf:
        for entry in zf.namelist():
            name = entry[:-4] if entry.endswith(".npy") else entry
            with zf.open(entry) as f:
                arr = np.lib.format.read_array(f, allow_pickle=False)
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name!r} in {path}")
            if _sha256(arr) != expected[name]:
                raise CheckpointError(f"checksum mismatch for {name!r} in {path}")
            tensors[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"tensors missing from {path}: {sorted(missing)}")
    return tensors, manifest


def save_module(
    path: str | Path,
    component: str,
    module: torch.nn.Module,
    config: Mapping[str, Any] | None = None,
    extra: Mapping[str, Any] | None = None,
    rng: Mapping[str, Any] | None = None,
) -> None:
    save_checkpoint(path, component, module.state_dict(), config, extra, rng)


def load_module(path: str | Path, module: torch.nn.Module) -> dict[str, Any]:
    """Restore a module in place; returns the manifest."""
    tensors, manifest = load_checkpoint(path)
    state = module.state_dict()
    converted = {}
    for k, v in tensors.items():
        if k not in state:
            raise CheckpointError(f"tensor {k!r} has no slot in the module")
        converted[k] = v.to(state[k].dtype)
    state.update(converted)
    module.load_state_dict(state)
    return manifest


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    """Flatten optimizer state into named tensors + a JSON-safe skeleton."""
    sd = opt.state_dict()
    tensors: dict[str, torch.Tensor] = {}
    skeleton: dict[str, Any] = {"param_groups": sd["param_groups"], "state_keys": {}}
    for pid, st in sd["state"].items():
        keys = []
        for k, v in st.items():
            if isinstance(v, torch.Tensor):
                tensors[f"opt.{pid}.{k}"] = v
                keys.append(k)
            else:
                tensors[f"opt.{pid}.{k}"] = torch.tensor(v)
                keys.append(k)
        skeleton["state_keys"][str(pid)] = keys
    return tensors, skeleton


def restore_optimizer(
    opt: torch.optim.Optimizer, tensors: Mapping[str, torch.Tensor], skeleton: dict
) -> None:
    state: dict[int, dict[str, Any]] = {}
    for pid_str, keys in skeleton["state_keys"].items():
        pid = int(pid_str)
        state[pid] = {k: tensors[f"opt.{pid}.{k}"] for k in keys}
    opt.load_state_dict({"state": state, "param_groups": skeleton["param_groups"]})
