"""
Manifest data model: one ImageRecord per image, stored as JSON lines.

Image paths are relative to the directory holding the manifest file.
Source metadata (dataset name, seed, profile) lives in a sidecar
"<manifest>.meta.json" so every manifest line stays a plain record.
"""

import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Set, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from src.constants import DENSITY_CLASSES
from src.exceptions import ManifestError
from src.utils.io import atomic_write_json, atomic_write_text
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

Modality = Literal["s2D", "DM", "DBT"]
Density = Literal["A", "B", "C", "D"]


class ImageRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    patient_id: str
    study_id: str
    image_path: str
    modality: Modality
    density: Density
    site: str
    acquired_at: date

    @field_validator("patient_id", "study_id", "image_path", "site")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value or not value.strip():
            raise ValueError("must be a non-empty string")
        return value


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


@dataclass
class Manifest:
    records: List[ImageRecord]
    source: Dict[str, Any] = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self):
        seen: Set[str] = set()
        for i, record in enumerate(self.records, 1):
            if record.image_path in seen:
                raise ManifestError(f"duplicate image path {record.image_path!r}", i)
            seen.add(record.image_path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> ImageRecord:
        return self.records[index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.records == other.records and self.source == other.source

    def resolve(self, record: ImageRecord) -> Path:
        path = Path(record.image_path)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def densities(self) -> List[str]:
        return [r.density for r in self.records]

    def class_counts(self, classes: Sequence[str] = DENSITY_CLASSES) -> Dict[str, int]:
        counts = Counter(r.density for r in self.records)
        return {c: counts.get(c, 0) for c in classes}

    def patient_indices(self) -> Dict[str, List[int]]:
        groups: Dict[str, List[int]] = defaultdict(list)
        for i, record in enumerate(self.records):
            groups[record.patient_id].append(i)
        return dict(groups)

    def longitudinal_patients(self) -> Set[str]:
        """Patients with more than one study."""
        studies: Dict[str, Set[str]] = defaultdict(set)
        for record in self.records:
            studies[record.patient_id].add(record.study_id)
        return {patient for patient, ids in studies.items() if len(ids) > 1}

    def subset(self, indices: Iterable[int]) -> "Manifest":
        return Manifest([self.records[i] for i in indices], dict(self.source), self.root)

    def relocated(self, new_root: Union[str, Path]) -> "Manifest":
        """Same images, with paths rewritten relative to a new manifest directory."""
        new_root = Path(new_root)
        records = [
            record.model_copy(
                update={"image_path": Path(os.path.relpath(self.resolve(record), new_root)).as_posix()}
            )
            for record in self.records
        ]
        return Manifest(records, dict(self.source), new_root)


def filter_manifest(
    manifest: Manifest,
    modalities: Optional[Sequence[str]] = None,
    sites: Optional[Sequence[str]] = None,
) -> Manifest:
    """Keep records matching the given modalities and sites (None keeps all)."""
    keep = [
        i
        for i, r in enumerate(manifest.records)
        if (modalities is None or r.modality in modalities) and (sites is None or r.site in sites)
    ]
    filtered = manifest.subset(keep)
    filtered.source["filter"] = {"modalities": list(modalities or []), "sites": list(sites or [])}
    logger.info(f"Filtered manifest: {len(filtered)}/{len(manifest)} records kept")
    return filtered


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> Path:
    """
    Write a manifest as JSON lines plus its metadata sidecar.

    Args:
        manifest: Manifest to write
        path: Destination .jsonl file

    Returns:
        Path written
    """
    path = Path(path)
    lines = [record.model_dump_json() for record in manifest.records]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
    atomic_write_json(_meta_path(path), manifest.source)
    logger.info(f"Manifest written: {path} ({len(manifest)} records)")
    return path


def load_manifest(path: Union[str, Path]) -> Manifest:
    """
    Load a JSON-lines manifest.

    Raises:
        ManifestError: Malformed line, unknown enum value or duplicate path,
            with the offending line number
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    records: List[ImageRecord] = []
    seen: Set[str] = set()
    with open(path, "rb") as handle:
        for line_number, raw in enumerate(handle, 1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise ManifestError(f"not valid UTF-8 at byte {e.start}", line_number) from None
            if not line.strip():
                continue
            try:
                record = ImageRecord.model_validate_json(line)
            except ValidationError as e:
                problems = "; ".join(
                    f"{'.'.join(str(p) for p in err['loc']) or 'record'}: {err['msg']}" for err in e.errors()
                )
                raise ManifestError(problems, line_number) from None
            if record.image_path in seen:
                raise ManifestError(f"duplicate image path {record.image_path!r}", line_number)
            seen.add(record.image_path)
            records.append(record)

    meta = _meta_path(path)
    source = {}
    if meta.is_file():
        try:
            source = json.loads(meta.read_bytes())
        except ValueError as e:
            raise ManifestError(f"{meta.name} is not valid UTF-8 JSON: {e}") from None
    logger.info(f"Manifest loaded: {path} ({len(records)} records)")
    return Manifest(records, source, path.parent)
