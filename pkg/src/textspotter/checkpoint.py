"""Checkpoint archives: one ``.npz`` mapping parameter names to arrays plus a JSON config block."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import Config, ModelConfig, config_from_dict

PARAM_PREFIX = "param/"
CONFIG_KEY = "config_json"
META_KEY = "meta_json"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: torch.nn.Module, config: Config, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {PARAM_PREFIX + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays[CONFIG_KEY] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    arrays[META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def model_config_diff(stored: ModelConfig, expected: ModelConfig) -> list[str]:
    a, b = stored.__dict__, expected.__dict__
    return [f"model.{k}: checkpoint={a[k]!r} expected={b[k]!r}" for k in sorted(a) if a[k] != b[k]]


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], Config, dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            params = {k[len(PARAM_PREFIX):]: data[k] for k in data.files if k.startswith(PARAM_PREFIX)}
            config = config_from_dict(json.loads(str(data[CONFIG_KEY])))
            meta = json.loads(str(data[META_KEY])) if META_KEY in data.files else {}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return params, config, meta


def load_checkpoint(path: str | Path, expected: Config | None = None):
    """Rebuild the model stored at ``path``.

    When ``expected`` is given, its model section must equal the stored one;
    otherwise loading is refused with the list of differing fields.
    """
    from .model.spotter import TextSpotter

    params, config, meta = read_checkpoint(path)
    if expected is not None:
        diff = model_config_diff(config.model, expected.model)
        if diff:
            raise CheckpointError("checkpoint/config mismatch: " + "; ".join(diff))
    model = TextSpotter(config.model)
    state = model.state_dict()
    missing = sorted(set(state) - set(params))
    extra = sorted(set(params) - set(state))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
    for k, v in params.items():
        if tuple(state[k].shape) != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: checkpoint={v.shape} model={tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    model.eval()
    return model, config, meta
