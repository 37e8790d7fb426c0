"""Self-verifying JSON checkpoints.

The container is ``{"format", "version", "payload", "sha256"}`` where the
payload carries the experiment config and every named tensor as its shape
plus base64 of little-endian float64 bytes. The digest covers the payload
serialized with sorted keys, so any flipped byte is detected on load.
"""
import base64
import binascii
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from app.errors import CheckpointError, ConfigurationError
from app.models.experiment import ExperimentConfig, validated

logger = logging.getLogger(__name__)

FORMAT = "routed-attention-checkpoint"
VERSION = 1
_WIRE_DTYPE = np.dtype("<f8")


def _canonical(payload: Dict[str, Any]) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _encode_array(array: np.ndarray) -> Dict[str, Any]:
    data = np.ascontiguousarray(array, dtype=_WIRE_DTYPE)
    return {"shape": list(data.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode_array(name: str, entry: Any) -> np.ndarray:
    try:
        shape = tuple(int(extent) for extent in entry["shape"])
        raw = base64.b64decode(entry["data"], validate=True)
        return np.frombuffer(raw, dtype=_WIRE_DTYPE).reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise CheckpointError(f"tensor {name} is malformed: {exc}") from None


def save_checkpoint(
    path: Union[str, Path],
    config: ExperimentConfig,
    arrays: Mapping[str, np.ndarray],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": config.model_dump(mode="json"),
        "tensors": {name: _encode_array(array) for name, array in arrays.items()},
        "extra": extra or {},
    }
    document = {
        "format": FORMAT,
        "version": VERSION,
        "payload": payload,
        "sha256": hashlib.sha256(_canonical(payload)).hexdigest(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(document, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
    logger.debug(f"Saved checkpoint with {len(arrays)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ExperimentConfig, Dict[str, np.ndarray], Dict[str, Any]]:
    """Return (config, named arrays, extra); any corruption raises CheckpointError."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        document = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from None
    if not isinstance(document, dict) or document.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if document.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {document.get('version')!r}")
    payload = document.get("payload")
    if not isinstance(payload, dict) or hashlib.sha256(_canonical(payload)).hexdigest() != document.get("sha256"):
        raise CheckpointError(f"checkpoint {path} failed its integrity check")

    try:
        config = validated(ExperimentConfig, payload["config"])
    except (KeyError, ConfigurationError) as exc:
        raise CheckpointError(f"checkpoint {path} carries an invalid config: {exc}") from None
    tensors = payload.get("tensors")
    if not isinstance(tensors, dict):
        raise CheckpointError(f"checkpoint {path} has no tensor table")
    arrays = {name: _decode_array(name, entry) for name, entry in tensors.items()}
    return config, arrays, dict(payload.get("extra") or {})
