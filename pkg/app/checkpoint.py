from __future__ import annotations

import base64
import binascii
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPE = "<f8"

# frontend tensors have fixed geometry regardless of task
KNOWN_SHAPES: Dict[str, tuple[int, ...]] = {
    "frontend/cochlea.alpha": (129,),
    "frontend/cochlea.inhibition": (2,),
    "frontend/cochlea.tau": (),
    "frontend/cortex.scale": (40,),
    "frontend/cortex.rate": (40,),
}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Named float64 tensors (frontend/, backend/, adam/m/, adam/v/) plus run metadata."""

    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any]
    step: int
    seed: int
    version: int = FORMAT_VERSION
    extra: Dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        return {name[len(prefix) :]: value for name, value in self.tensors.items() if name.startswith(prefix)}

    def to_json(self) -> str:
        payload = {
            "format_version": self.version,
            "step": self.step,
            "seed": self.seed,
            "config": self.config,
            "extra": self.extra,
            "tensors": [_encode_tensor(name, value) for name, value in self.tensors.items()],
        }
        return json.dumps(payload, indent=2, ensure_ascii=True) + "\n"


def _encode_tensor(name: str, value: np.ndarray) -> dict[str, Any]:
    # asarray keeps 0-d tensors at shape ()
    array = np.asarray(value, dtype=DTYPE)
    return {
        "name": name,
        "shape": list(array.shape),
        "data": base64.b64encode(array.tobytes(order="C")).decode("ascii"),
    }


def _decode_tensor(item: Any) -> tuple[str, np.ndarray]:
    if not isinstance(item, dict) or not {"name", "shape", "data"} <= item.keys():
        raise CheckpointError("tensor entry must hold name, shape and data")
    name = str(item["name"])
    shape = item["shape"]
    if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise CheckpointError(f"tensor '{name}' has an invalid shape field: {shape!r}")
    try:
        raw = base64.b64decode(item["data"], validate=True)
    except (binascii.Error, TypeError, ValueError) as exc:
        raise CheckpointError(f"tensor '{name}' has corrupted base64 data") from exc
    expected = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 8 * expected:
        raise CheckpointError(
            f"tensor '{name}' holds {len(raw) // 8} values but its shape {tuple(shape)} needs {expected}"
        )
    known = KNOWN_SHAPES.get(name)
    if known is not None and tuple(shape) != known:
        raise CheckpointError(f"tensor '{name}' has shape {tuple(shape)}, expected {known}")
    return name, np.frombuffer(raw, dtype=DTYPE).reshape(shape).astype(np.float64)


def checkpoint_from_json(text: str) -> Checkpoint:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError("checkpoint root must be an object")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    for key in ("step", "seed", "config", "tensors"):
        if key not in payload:
            raise CheckpointError(f"checkpoint is missing '{key}'")

    tensors: Dict[str, np.ndarray] = {}
    for item in payload["tensors"]:
        name, value = _decode_tensor(item)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor '{name}'")
        tensors[name] = value
    return Checkpoint(
        tensors=tensors,
        config=payload["config"],
        step=int(payload["step"]),
        seed=int(payload["seed"]),
        version=version,
        extra=payload.get("extra", {}),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(ckpt.to_json(), encoding="utf-8")
    logger.info("checkpoint saved: %s (step %d, %d tensors)", file_path, ckpt.step, len(ckpt.tensors))
    return file_path


def load_checkpoint(path) -> Checkpoint:
    file_path = Path(path)
    if not file_path.exists():
        raise CheckpointError(f"checkpoint not found: {file_path}")
    ckpt = checkpoint_from_json(file_path.read_text(encoding="utf-8"))
    logger.debug("checkpoint loaded: %s (step %d)", file_path, ckpt.step)
    return ckpt
