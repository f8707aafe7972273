"""
Model and adapter-only checkpoints.

A checkpoint is an `.npz` archive of named tensors plus a `__meta__` entry
holding JSON: format version, ModelConfig, trainable mask, vocabulary
reference and adapter config.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from app.core.exceptions import CheckpointError, MissingArtifactError
from app.models.parameters import Parameters, is_adapter_tensor
from app.schemas.adapter import adapter_config_from_dict
from app.schemas.model import ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "__meta__"


def base_fingerprint(params: Parameters) -> str:
    """Hash of every base (non-adapter) tensor."""
    names = sorted(k for k in params.tensors if not is_adapter_tensor(k))
    return params.fingerprint(names)


def _write(path: Path, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(tensors)
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)


def _read(path: Path, stage: str):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(stage, str(path))
    with np.load(path, allow_pickle=False) as data:
        if META_KEY not in data.files:
            raise CheckpointError(f"{path} is not a checkpoint (no metadata)")
        meta = json.loads(str(data[META_KEY]))
        tensors = {k: data[k].copy() for k in data.files if k != META_KEY}
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {meta.get('format_version')}, expected {FORMAT_VERSION}")
    return meta, tensors


def save_checkpoint(params: Parameters, path: Path, vocab_ref: Optional[Dict[str, str]] = None) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "model_config": params.config.model_dump(mode="json"),
        "trainable": {k: bool(v) for k, v in sorted(params.trainable.items())},
        "vocab": vocab_ref or {},
        "adapter": params.adapter.model_dump(mode="json") if params.adapter else None,
        "metadata": params.metadata,
    }
    _write(path, params.tensors, meta)
    logger.info(f"Saved checkpoint {path} ({len(params.tensors)} tensors)")


def load_checkpoint(path: Path, stage: str = "pretrain") -> Parameters:
    meta, tensors = _read(path, stage)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path} is an adapter-only checkpoint; load it onto a base with load_adapter")
    params = Parameters(
        config=ModelConfig(**meta["model_config"]),
        tensors=tensors,
        trainable=dict(meta["trainable"]),
        adapter=adapter_config_from_dict(meta.get("adapter")),
        metadata=dict(meta.get("metadata") or {}),
    )
    params.metadata.setdefault("vocab_fingerprint", (meta.get("vocab") or {}).get("fingerprint", ""))
    return params


def save_adapter(params: Parameters, path: Path) -> None:
    """
    Store only the adapter tensors with their config and the base fingerprint.
    """
    names = sorted(k for k in params.tensors if is_adapter_tensor(k))
    if params.adapter is None or not names:
        raise CheckpointError("no adapter attached; save the full model with save_checkpoint")
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "adapter",
        "model_config": params.config.model_dump(mode="json"),
        "adapter": params.adapter.model_dump(mode="json"),
        "base_fingerprint": base_fingerprint(params),
    }
    _write(path, {k: params.tensors[k] for k in names}, meta)
    logger.info(f"Saved {params.adapter.kind.value} adapter {path} ({len(names)} tensors)")


def load_adapter(path: Path, base: Parameters, stage: str = "adapt") -> Parameters:
    """
    A copy of `base` with the stored adapter attached (base frozen, adapter trainable).
    """
    meta, tensors = _read(path, stage)
    if meta.get("kind") != "adapter":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    if ModelConfig(**meta["model_config"]) != base.config:
        raise CheckpointError(f"{path} was trained on a different model configuration")
    if meta["base_fingerprint"] != base_fingerprint(base):
        raise CheckpointError(f"{path} was trained on a different base checkpoint")
    if base.adapter is not None:
        raise CheckpointError("base parameters already carry an adapter")
    params = base.copy()
    params.freeze_all()
    for name, value in tensors.items():
        params.add(name, value, trainable=True)
    params.adapter = adapter_config_from_dict(meta["adapter"])
    return params
