"""Parameter checkpoints: a flat ``.npz`` of named float32 arrays plus a JSON manifest.

The manifest lists ``name -> shape`` and the resolved run config. Names are the
module paths of the parameters (``frm.levels.0.blocks.0.self_attn.q.weight`` and
so on), so a one-level ablation and an all-level run can load each other's
weights with ``partial=True``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import Config

FORMAT = "countocc-checkpoint/1"


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().to(torch.float32).cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(path, model: torch.nn.Module, cfg: Config, extra: dict | None = None) -> Path:
    path = Path(path).with_suffix(".npz")
    arrays = state_arrays(model)
    np.savez(path, **arrays)
    manifest = {"format": FORMAT, "config": cfg.to_dict(),
                "arrays": {k: list(v.shape) for k, v in sorted(arrays.items())}}
    if extra:
        manifest["extra"] = extra
    manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path).with_suffix(".npz")
    manifest = json.loads(manifest_path(path).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    for name, shape in manifest["arrays"].items():
        if name not in arrays:
            raise ValueError(f"{path}: array {name!r} listed in manifest but missing")
        if list(arrays[name].shape) != shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, manifest says {shape}")
    return arrays, manifest


def load_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], partial: bool = False) -> list[str]:
    """Copy arrays into ``module`` by name; returns the names that were loaded.

    With ``partial`` unknown or missing names are skipped, otherwise they raise.
    """
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    unknown = sorted(set(arrays) - set(state))
    if not partial and (missing or unknown):
        raise KeyError(f"checkpoint mismatch: missing {missing[:5]}, unknown {unknown[:5]}")
    loaded = []
    with torch.no_grad():
        for name, tensor in state.items():
            if name not in arrays:
                continue
            value = torch.from_numpy(arrays[name])
            if value.shape != tensor.shape:
                raise ValueError(f"{name}: shape {tuple(value.shape)} does not fit {tuple(tensor.shape)}")
            tensor.copy_(value.to(tensor.dtype))
            loaded.append(name)
    return loaded


def load_checkpoint(path, partial: bool = False, **overrides):
    """Rebuild the counting model described by a checkpoint; returns ``(model, config)``."""
    from .harness.train import build_model

    arrays, manifest = read_checkpoint(path)
    cfg = Config.from_dict(manifest["config"]).replace(**overrides)
    model = build_model(cfg)
    load_arrays(model, arrays, partial=partial)
    model.freeze_teacher(copy_to_student=False)
    model.eval()
    return model, cfg
