"""
File helpers: atomic writes, digests and run-directory guards
"""

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Union

from src.exceptions import OutputExistsError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write bytes to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def file_digest(path: PathLike) -> str:
    """SHA-256 hex digest of a file's content."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def prepare_output_dir(path: PathLike, overwrite: bool) -> Path:
    """
    Create an empty output directory.

    An existing non-empty directory is refused, or emptied when overwrite is
    set, so no file from an earlier run survives into the new one.

    Args:
        path: Directory to create
        overwrite: Replace the content of an existing non-empty directory

    Returns:
        The directory path

    Raises:
        OutputExistsError: Directory has content and overwrite is False, or
            the path exists and is not a directory
    """
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise OutputExistsError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise OutputExistsError(f"{path} already exists and is not empty (use --overwrite)")
        logger.info(f"Clearing {path} before overwriting it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
