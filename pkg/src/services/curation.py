"""
Dataset curation: undersampling to target class counts, inverse-frequency
class weights and the patient-aware stratified group k-fold splitter.
"""

import math
from collections import Counter
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator

from src.constants import DENSITY_CLASSES, FOLD_PROPORTION_TOLERANCE, REFERENCE_RATIOS
from src.data.manifest import Manifest
from src.exceptions import ConfigError, DataError, InsufficientDataError, LeakageError
from src.models.objective import ClassWeights
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


# ------------------------------------------------------------ undersampling


class UndersamplePlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    targets: Dict[str, int]
    seed: int = 0
    shortfall: Literal["take-all", "strict"] = "take-all"

    @field_validator("targets")
    @classmethod
    def _positive_targets(cls, targets: Dict[str, int]) -> Dict[str, int]:
        if not targets:
            raise ValueError("undersample plan has no targets")
        for name, count in targets.items():
            if count <= 0:
                raise ValueError(f"target for class {name} must be > 0, got {count}")
        return targets


def _select_grouped(
    manifest: Manifest, indices: List[int], count: int, rng: np.random.Generator
) -> List[int]:
    """Pick count images, whole patients first, then single images to fill the gap."""
    groups: Dict[str, List[int]] = {}
    for i in indices:
        groups.setdefault(manifest[i].patient_id, []).append(i)
    patients = sorted(groups)
    order = [patients[j] for j in rng.permutation(len(patients))]

    chosen: List[int] = []
    leftovers: List[int] = []
    for patient in order:
        members = sorted(groups[patient], key=lambda i: manifest[i].image_path)
        if len(chosen) + len(members) <= count:
            chosen.extend(members)
        else:
            leftovers.extend(members)
    chosen.extend(leftovers[: count - len(chosen)])
    return chosen


def undersample(manifest: Manifest, plan: UndersamplePlan) -> Manifest:
    """
    Reduce each planned class to min(target, available) images.

    Classes without a target are kept whole.

    Args:
        manifest: Source manifest
        plan: Per-class targets, seed and shortfall policy

    Returns:
        Manifest with the selected records in their original order

    Raises:
        InsufficientDataError: A target exceeds availability under the strict policy
    """
    by_class: Dict[str, List[int]] = {}
    for i, record in enumerate(manifest.records):
        by_class.setdefault(record.density, []).append(i)

    selected: Set[int] = set()
    for density, indices in by_class.items():
        if density not in plan.targets:
            selected.update(indices)

    for class_index, (density, target) in enumerate(sorted(plan.targets.items())):
        available = by_class.get(density, [])
        if target > len(available):
            if plan.shortfall == "strict":
                raise InsufficientDataError(
                    f"class {density}: target {target} exceeds the {len(available)} available images"
                )
            logger.warning(f"Class {density}: only {len(available)} of {target} images available, taking all")
        rng = np.random.default_rng([plan.seed, class_index])
        selected.update(_select_grouped(manifest, available, min(target, len(available)), rng))

    result = manifest.subset(sorted(selected))
    result.source["undersample"] = plan.model_dump()
    logger.info(f"Undersampled {len(manifest)} -> {len(result)} images: {result.class_counts()}")
    return result


def plan_from_minority(
    manifest: Manifest,
    ratios: Optional[Mapping[str, float]] = None,
    seed: int = 0,
    shortfall: Literal["take-all", "strict"] = "take-all",
) -> UndersamplePlan:
    """
    Anchor the plan on the scarcest class relative to its ratio: that class
    keeps every image, the others are scaled by their ratios.

    Raises:
        InsufficientDataError: A class named in ratios has no images
    """
    ratios = dict(REFERENCE_RATIOS if ratios is None else ratios)
    counts = manifest.class_counts(tuple(ratios))
    empty = [c for c, n in counts.items() if n == 0]
    if empty:
        raise InsufficientDataError(f"no images for class(es) {', '.join(empty)}")
    unit = min(counts[c] / ratios[c] for c in ratios)
    targets = {c: max(1, int(math.floor(unit * ratios[c] + 1e-9))) for c in ratios}
    return UndersamplePlan(targets=targets, seed=seed, shortfall=shortfall)


DEFAULT_RATIO_SWEEP: Tuple[Dict[str, float], ...] = (
    {"A": 1.0, "B": 1.0, "C": 1.0, "D": 1.0},
    {"A": 1.0, "B": 1.5, "C": 1.5, "D": 1.0},
    dict(REFERENCE_RATIOS),
    {"A": 1.5, "B": 2.5, "C": 2.5, "D": 1.0},
)


def sweep_ratios(
    manifest: Manifest,
    candidates: Sequence[Mapping[str, float]] = DEFAULT_RATIO_SWEEP,
    seed: int = 0,
) -> List[UndersamplePlan]:
    """Minority-anchored plans for a list of candidate class ratios."""
    plans = [plan_from_minority(manifest, ratios, seed) for ratios in candidates]
    for plan in plans:
        logger.info(f"Ratio sweep candidate: {plan.targets} (total {sum(plan.targets.values())})")
    return plans


# ------------------------------------------------------------ class weights


def class_weights(
    source: Union[Manifest, Mapping[str, int]],
    classes: Sequence[str] = DENSITY_CLASSES,
) -> ClassWeights:
    """
    Inverse-frequency weights w_c = (N / K) / n_c.

    Args:
        source: Manifest or class -> image count mapping
        classes: Classes to weight, in prompt order

    Returns:
        ClassWeights whose image-weighted mean is 1

    Raises:
        InsufficientDataError: A class has no images
    """
    counts = source.class_counts(classes) if isinstance(source, Manifest) else {c: source.get(c, 0) for c in classes}
    missing = [c for c in classes if counts[c] <= 0]
    if missing:
        raise InsufficientDataError(f"class weights need every class; missing {', '.join(missing)}")
    total = sum(counts[c] for c in classes)
    share = total / len(classes)
    return ClassWeights(classes=tuple(classes), values=tuple(share / counts[c] for c in classes))


# ------------------------------------------------------------ k-fold splitting


class FoldSplit(BaseModel):
    train_patients: List[str]
    val_patients: List[str]


class FoldAssignment(BaseModel):
    """Patient-level fold layout; record indices are derived against a manifest."""

    k: int = Field(ge=2)
    seed: int = 0
    folds: Dict[int, FoldSplit]
    longitudinal_patients: List[str] = Field(default_factory=list)

    def fold(self, index: int) -> FoldSplit:
        if index not in self.folds:
            raise DataError(f"fold {index} does not exist (k={self.k})")
        return self.folds[index]

    def fold_indices(self, manifest: Manifest, index: int) -> Tuple[List[int], List[int]]:
        """(train record indices, validation record indices) of one fold."""
        split = self.fold(index)
        train = set(split.train_patients)
        val = set(split.val_patients)
        train_idx = [i for i, r in enumerate(manifest.records) if r.patient_id in train]
        val_idx = [i for i, r in enumerate(manifest.records) if r.patient_id in val]
        return train_idx, val_idx

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        return cls.model_validate_json(text)


def _patient_class(manifest: Manifest, indices: List[int], classes: Sequence[str]) -> int:
    votes = Counter(classes.index(manifest[i].density) for i in indices)
    best = max(votes.values())
    return min(c for c, n in votes.items() if n == best)


def stratified_group_kfold(
    manifest: Manifest,
    k: int = 5,
    seed: int = 0,
    classes: Sequence[str] = DENSITY_CLASSES,
) -> FoldAssignment:
    """
    Split patients into k folds without splitting any patient.

    Longitudinal patients (more than one study) are placed in the training
    side of every fold. Single-exam patients are shuffled by seed, sorted by
    class then descending image count, and each goes to the fold holding the
    fewest images of its class (ties: fewest images overall, then lowest
    fold index).

    Args:
        manifest: Records to split
        k: Number of folds
        seed: Shuffle seed
        classes: Class order

    Returns:
        FoldAssignment

    Raises:
        ConfigError: k < 2
        InsufficientDataError: Fewer than k single-exam patients in a present class
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    groups = manifest.patient_indices()
    longitudinal = manifest.longitudinal_patients()
    single = sorted(p for p in groups if p not in longitudinal)

    patient_class = {p: _patient_class(manifest, groups[p], classes) for p in single}
    per_class = Counter(patient_class.values())
    short = [classes[c] for c, n in sorted(per_class.items()) if n < k]
    if short:
        raise InsufficientDataError(
            f"fewer than {k} single-exam patients in class(es) {', '.join(short)}: "
            + ", ".join(f"{classes[c]}={n}" for c, n in sorted(per_class.items()))
        )

    rng = np.random.default_rng(seed)
    shuffled = [single[j] for j in rng.permutation(len(single))]
    ordered = sorted(shuffled, key=lambda p: (patient_class[p], -len(groups[p])))

    class_load = np.zeros((k, len(classes)), dtype=np.int64)
    total_load = np.zeros(k, dtype=np.int64)
    members: List[List[str]] = [[] for _ in range(k)]
    for patient in ordered:
        c = patient_class[patient]
        target = min(range(k), key=lambda f: (class_load[f, c], total_load[f], f))
        members[target].append(patient)
        class_load[target, c] += len(groups[patient])
        total_load[target] += len(groups[patient])

    longitudinal_sorted = sorted(longitudinal)
    folds = {}
    for f in range(k):
        val = sorted(members[f])
        val_set = set(val)
        train = sorted([p for p in single if p not in val_set] + longitudinal_sorted)
        folds[f] = FoldSplit(train_patients=train, val_patients=val)

    assignment = FoldAssignment(k=k, seed=seed, folds=folds, longitudinal_patients=longitudinal_sorted)
    logger.info(
        f"Stratified group {k}-fold: {len(single)} single-exam patients, "
        f"{len(longitudinal)} longitudinal (train only), fold sizes {total_load.tolist()}"
    )
    return assignment


class FoldAudit(BaseModel):
    leaking_patients: Dict[int, List[str]]
    longitudinal_in_validation: List[str]
    uncovered_patients: List[str]
    repeated_patients: List[str]
    proportion_deviation: Dict[int, Dict[str, float]]
    max_deviation: float
    tolerance: float

    @computed_field
    @property
    def leakage_free(self) -> bool:
        return not (
            self.leaking_patients or self.longitudinal_in_validation or self.uncovered_patients or self.repeated_patients
        )

    @computed_field
    @property
    def balanced(self) -> bool:
        return self.max_deviation <= self.tolerance


def audit_folds(
    manifest: Manifest,
    assignment: FoldAssignment,
    tolerance: float = FOLD_PROPORTION_TOLERANCE,
    classes: Sequence[str] = DENSITY_CLASSES,
) -> FoldAudit:
    """
    Recount a fold assignment against its manifest.

    Proportions are relative deviations of each validation fold's class
    share from the class share over all single-exam images.
    """
    groups = manifest.patient_indices()
    longitudinal = manifest.longitudinal_patients()
    single = {p for p in groups if p not in longitudinal}

    leaking: Dict[int, List[str]] = {}
    seen: Counter = Counter()
    for f, split in assignment.folds.items():
        overlap = sorted(set(split.train_patients) & set(split.val_patients))
        if overlap:
            leaking[f] = overlap
        seen.update(split.val_patients)

    pool = [i for p in single for i in groups[p]]
    global_counts = Counter(manifest[i].density for i in pool)
    global_share = {c: global_counts[c] / len(pool) for c in classes if global_counts[c]} if pool else {}

    deviation: Dict[int, Dict[str, float]] = {}
    for f, split in assignment.folds.items():
        fold_images = [i for p in split.val_patients for i in groups.get(p, [])]
        counts = Counter(manifest[i].density for i in fold_images)
        deviation[f] = {
            c: (abs(counts[c] / len(fold_images) - share) / share if fold_images else 1.0)
            for c, share in global_share.items()
        }
    max_deviation = max((d for fold in deviation.values() for d in fold.values()), default=0.0)

    audit = FoldAudit(
        leaking_patients=leaking,
        longitudinal_in_validation=sorted(p for p in seen if p in longitudinal),
        uncovered_patients=sorted(p for p in single if seen[p] == 0),
        repeated_patients=sorted(p for p, n in seen.items() if n > 1),
        proportion_deviation=deviation,
        max_deviation=float(max_deviation),
        tolerance=tolerance,
    )
    if not audit.balanced:
        logger.warning(f"Fold class proportions deviate up to {audit.max_deviation:.1%} (tolerance {tolerance:.0%})")
    return audit


def check_fold_indices(
    manifest: Manifest,
    assignment: FoldAssignment,
    fold: int,
    train_indices: Sequence[int],
) -> None:
    """
    Raise LeakageError if any training index belongs to a validation
    patient of the fold.
    """
    val = set(assignment.fold(fold).val_patients)
    leaked = sorted({manifest[i].patient_id for i in train_indices if manifest[i].patient_id in val})
    if leaked:
        raise LeakageError(f"fold {fold}: {len(leaked)} validation patient(s) in training data: {', '.join(leaked[:5])}")
