"""
Named tensor archive for DualEncoderModel checkpoints.

Layout:
    line 1  magic "DENSITYCLIP-NTA/1"
    line 2  JSON preamble: vision config, text config (with vocabulary),
            free-form metadata and the tensor table [{name, shape, dtype}]
    rest    little-endian float32 payloads, concatenated in table order
"""

import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from src.autodiff.engine import parameter
from src.exceptions import DataError
from src.models.dual_encoder import (
    DualEncoderModel,
    TextEncoderConfig,
    VisionEncoderConfig,
    parameter_shapes,
)
from src.utils.io import atomic_write_bytes
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

MAGIC = b"DENSITYCLIP-NTA/1"
PAYLOAD_DTYPE = "<f4"
PREAMBLE_KEYS = ("vision", "text", "tensors")


def encode_checkpoint(model: DualEncoderModel, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    tensors = []
    payloads = []
    for name, node in model.params.items():
        tensors.append({"name": name, "shape": list(node.value.shape), "dtype": "float32"})
        payloads.append(np.ascontiguousarray(node.value, dtype=PAYLOAD_DTYPE).tobytes())

    preamble = {
        "vision": model.vision_config.model_dump(),
        "text": model.text_config.model_dump(),
        "metadata": metadata or {},
        "tensors": tensors,
    }
    header = MAGIC + b"\n" + json.dumps(preamble, sort_keys=True).encode("utf-8") + b"\n"
    return header + b"".join(payloads)


def decode_checkpoint(payload: bytes) -> Tuple[DualEncoderModel, Dict[str, Any]]:
    magic_end = payload.find(b"\n")
    if magic_end < 0 or payload[:magic_end] != MAGIC:
        raise DataError("not a DensityCLIP tensor archive (bad magic line)")
    preamble_end = payload.find(b"\n", magic_end + 1)
    if preamble_end < 0:
        raise DataError("tensor archive preamble is truncated")
    try:
        preamble = json.loads(payload[magic_end + 1:preamble_end])
    except ValueError as e:
        raise DataError(f"tensor archive preamble is not valid JSON: {e}") from e

    if not isinstance(preamble, dict):
        raise DataError("tensor archive preamble is not a JSON object")
    missing = [key for key in PREAMBLE_KEYS if key not in preamble]
    if missing:
        raise DataError(f"tensor archive preamble is missing {', '.join(missing)}")
    try:
        vision_config = VisionEncoderConfig.model_validate(preamble["vision"])
        text_config = TextEncoderConfig.model_validate(preamble["text"])
    except ValidationError as e:
        raise DataError(f"tensor archive preamble has an invalid encoder config: {e}") from None

    records = preamble["tensors"]
    if not isinstance(records, list) or not all(
        isinstance(r, dict) and {"name", "dtype", "shape"} <= r.keys() for r in records
    ):
        raise DataError("tensor archive preamble: every tensor needs a name, dtype and shape")

    offset = preamble_end + 1
    params = {}
    for record in records:
        if record["dtype"] != "float32":
            raise DataError(f"tensor {record['name']}: unsupported dtype {record['dtype']}")
        shape = tuple(record["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        size = count * 4
        if offset + size > len(payload):
            raise DataError(f"tensor {record['name']}: payload truncated")
        values = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=offset)
        params[record["name"]] = parameter(values.astype(np.float64).reshape(shape), record["name"])
        offset += size
    if offset != len(payload):
        raise DataError(f"tensor archive has {len(payload) - offset} trailing bytes")

    expected = parameter_shapes(vision_config, text_config)
    actual = {name: node.value.shape for name, node in params.items()}
    if actual != expected:
        mismatched = sorted(n for n in set(actual) | set(expected) if actual.get(n) != expected.get(n))
        raise DataError(f"tensor archive does not match the architecture: {', '.join(mismatched)}")

    return DualEncoderModel(vision_config, text_config, params), preamble.get("metadata", {})


def save_checkpoint(
    model: DualEncoderModel,
    path: Union[str, Path],
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint atomically.

    Args:
        model: Model to store (values are written as float32)
        path: Destination file
        metadata: JSON-serializable extras (fold, epoch, seed)

    Returns:
        Path written
    """
    path = atomic_write_bytes(path, encode_checkpoint(model, metadata))
    logger.info(f"Checkpoint written: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[DualEncoderModel, Dict[str, Any]]:
    """Read a checkpoint written by save_checkpoint."""
    model, metadata = decode_checkpoint(Path(path).read_bytes())
    logger.info(f"Checkpoint loaded: {path} ({len(model.params)} tensors)")
    return model, metadata
