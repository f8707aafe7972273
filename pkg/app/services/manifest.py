"""
JSON manifests and content hashes that chain pipeline stages together.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict

from pydantic import BaseModel

from app.core.exceptions import ConfigHashMismatchError, MissingArtifactError

MANIFEST_FILE = "manifest.json"


def _plain(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """
    Short sha256 of the canonical JSON form of `obj`.
    """
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path: Path, data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path, stage: str) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(stage, str(path))
    return json.loads(path.read_text(encoding="utf-8"))


def read_manifest(directory: Path, stage: str) -> Dict[str, Any]:
    return read_json(Path(directory) / MANIFEST_FILE, stage)


def write_manifest(directory: Path, stage: str, stage_hash: str, seed: int, **fields: Any) -> Dict[str, Any]:
    manifest = {"stage": stage, "config_hash": stage_hash, "seed": seed, **fields}
    write_json(Path(directory) / MANIFEST_FILE, manifest)
    return manifest


def is_current(directory: Path, stage_hash: str) -> bool:
    """
    True when `directory` holds a finished stage produced under `stage_hash`.
    """
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        return False
    return json.loads(path.read_text(encoding="utf-8")).get("config_hash") == stage_hash


def require_hash(manifest: Dict[str, Any], expected: str, stage: str) -> None:
    found = manifest.get("config_hash")
    if found != expected:
        raise ConfigHashMismatchError(
            f"stage '{stage}' was produced under config hash {found}, current config gives {expected}; "
            f"re-run `{stage}` (or pass --force)"
        )
