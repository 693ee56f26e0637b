import json

import numpy as np
import pytest
from pydantic import ValidationError

from src.constants import FOLD_PROPORTION_TOLERANCE, REFERENCE_TARGETS
from src.data.manifest import Manifest
from src.exceptions import ConfigError, InsufficientDataError, LeakageError
from src.services.curation import (
    FoldAssignment,
    UndersamplePlan,
    audit_folds,
    check_fold_indices,
    class_weights,
    plan_from_minority,
    stratified_group_kfold,
    sweep_ratios,
    undersample,
)
from tests.conftest import make_record, random_manifest


def _class_manifest(counts):
    records = []
    for density, n in counts.items():
        for i in range(n):
            records.append(make_record(f"{density}{i:04d}", density=density))
    return Manifest(records, {"dataset": "counts"})


# ------------------------------------------------------------ undersampling


def test_undersample_hits_targets():
    manifest = random_manifest(1, patients=300)
    available = manifest.class_counts()
    targets = {"A": 40, "B": 60, "C": 60, "D": 30}
    result = undersample(manifest, UndersamplePlan(targets=targets, seed=3))
    assert result.class_counts() == {c: min(targets[c], available[c]) for c in targets}
    assert result.source["undersample"]["targets"] == targets


def test_undersample_is_deterministic_and_order_preserving():
    manifest = random_manifest(2, patients=200)
    plan = UndersamplePlan(targets={"B": 50}, seed=1)
    a = undersample(manifest, plan)
    b = undersample(manifest, plan)
    assert a == b
    positions = [manifest.records.index(r) for r in a]
    assert positions == sorted(positions)


def test_undersample_keeps_untargeted_classes():
    manifest = random_manifest(3, patients=200)
    result = undersample(manifest, UndersamplePlan(targets={"C": 10}))
    for density in "ABD":
        assert result.class_counts()[density] == manifest.class_counts()[density]


def test_undersample_shortfall_policies():
    manifest = _class_manifest({"A": 5, "B": 20})
    taken = undersample(manifest, UndersamplePlan(targets={"A": 10, "B": 10}))
    assert taken.class_counts()["A"] == 5
    with pytest.raises(InsufficientDataError):
        undersample(manifest, UndersamplePlan(targets={"A": 10}, shortfall="strict"))


def test_plan_rejects_non_positive_targets():
    with pytest.raises(ValidationError):
        UndersamplePlan(targets={"A": 0})
    with pytest.raises(ValidationError):
        UndersamplePlan(targets={})


def test_plan_from_minority_anchors_on_scarcest_class():
    manifest = _class_manifest({"A": 50, "B": 200, "C": 200, "D": 30})
    plan = plan_from_minority(manifest, seed=4)
    assert plan.targets == {"A": 40, "B": 60, "C": 60, "D": 30}
    assert plan.seed == 4


def test_plan_from_minority_needs_every_class():
    with pytest.raises(InsufficientDataError):
        plan_from_minority(_class_manifest({"A": 5, "B": 5, "C": 5}))


def test_sweep_ratios_scales_totals():
    manifest = _class_manifest({"A": 300, "B": 300, "C": 300, "D": 100})
    plans = sweep_ratios(manifest)
    assert plans[0].targets == {"A": 100, "B": 100, "C": 100, "D": 100}
    totals = [sum(p.targets.values()) for p in plans]
    assert totals == sorted(totals)


# ------------------------------------------------------------ class weights


def test_reference_class_weights():
    weights = class_weights(REFERENCE_TARGETS)
    assert weights.values == pytest.approx((1.1875, 19 / 24, 19 / 24, 19 / 12), rel=1e-12)
    assert weights.image_mean(REFERENCE_TARGETS) == pytest.approx(1.0, rel=1e-12)


def test_balanced_classes_get_unit_weights():
    weights = class_weights(_class_manifest({"A": 7, "B": 7, "C": 7, "D": 7}))
    assert weights.values == pytest.approx((1.0, 1.0, 1.0, 1.0))


def test_class_weights_need_every_class():
    with pytest.raises(InsufficientDataError):
        class_weights({"A": 10, "B": 10, "C": 10})


# ------------------------------------------------------------ k-fold splitting


@pytest.mark.parametrize("seed", range(4))
def test_folds_are_leakage_free_and_cover_every_patient(seed):
    manifest = random_manifest(seed, patients=400)
    assignment = stratified_group_kfold(manifest, k=5, seed=seed)
    longitudinal = manifest.longitudinal_patients()
    single = set(manifest.patient_indices()) - longitudinal

    validated = []
    for f in range(5):
        split = assignment.fold(f)
        assert not set(split.train_patients) & set(split.val_patients)
        assert not set(split.val_patients) & longitudinal
        assert longitudinal <= set(split.train_patients)
        validated.extend(split.val_patients)
    assert sorted(validated) == sorted(single)

    audit = audit_folds(manifest, assignment)
    assert audit.leakage_free
    assert audit.balanced


def test_fold_indices_partition_the_single_exam_images():
    manifest = random_manifest(5, patients=300)
    assignment = stratified_group_kfold(manifest, k=3, seed=5)
    train, val = assignment.fold_indices(manifest, 0)
    assert not set(train) & set(val)
    longitudinal_images = sum(
        len(idx) for p, idx in manifest.patient_indices().items() if p in manifest.longitudinal_patients()
    )
    assert len(train) + len(val) == len(manifest)
    assert len(train) >= longitudinal_images
    check_fold_indices(manifest, assignment, 0, train)


def test_split_is_deterministic_per_seed():
    manifest = random_manifest(6, patients=300)
    assert stratified_group_kfold(manifest, 5, seed=1) == stratified_group_kfold(manifest, 5, seed=1)
    assert stratified_group_kfold(manifest, 5, seed=1) != stratified_group_kfold(manifest, 5, seed=2)


def test_k_below_two_is_a_config_error():
    with pytest.raises(ConfigError):
        stratified_group_kfold(random_manifest(0, patients=50), k=1)


def test_too_few_patients_per_class_raises():
    manifest = _class_manifest({"A": 3, "B": 10, "C": 10, "D": 10})
    with pytest.raises(InsufficientDataError, match="A=3"):
        stratified_group_kfold(manifest, k=5)


def test_check_fold_indices_detects_leakage():
    manifest = random_manifest(7, patients=200)
    assignment = stratified_group_kfold(manifest, k=5, seed=0)
    _, val = assignment.fold_indices(manifest, 2)
    with pytest.raises(LeakageError):
        check_fold_indices(manifest, assignment, 2, val[:1])


def test_audit_flags_a_tampered_assignment():
    manifest = random_manifest(8, patients=200)
    assignment = stratified_group_kfold(manifest, k=4, seed=0)
    moved = assignment.folds[0].val_patients[0]
    assignment.folds[0].train_patients.append(moved)
    assignment.folds[1].val_patients.append(moved)
    audit = audit_folds(manifest, assignment)
    assert not audit.leakage_free
    assert audit.leaking_patients == {0: [moved], 1: [moved]}
    assert audit.repeated_patients == [moved]


def test_fold_assignment_json():
    manifest = random_manifest(9, patients=150)
    assignment = stratified_group_kfold(manifest, k=3, seed=2)
    text = assignment.to_json()
    assert json.loads(text)["k"] == 3
    assert FoldAssignment.from_json(text) == assignment


@pytest.mark.parametrize("patients", [300, 400, 500])
@pytest.mark.parametrize("seed", range(25))
def test_fold_class_shares_stay_within_tolerance(seed, patients):
    manifest = random_manifest(1000 + seed, patients=patients)
    audit = audit_folds(manifest, stratified_group_kfold(manifest, k=5, seed=seed))
    assert audit.leakage_free
    assert audit.balanced, f"max deviation {audit.max_deviation:.3f}"
    assert audit.max_deviation <= FOLD_PROPORTION_TOLERANCE


def test_audit_records_its_verdicts():
    manifest = random_manifest(8, patients=300)
    dumped = json.loads(audit_folds(manifest, stratified_group_kfold(manifest, k=5, seed=8)).model_dump_json())
    assert dumped["leakage_free"] is True
    assert dumped["balanced"] is True
    assert dumped["tolerance"] == FOLD_PROPORTION_TOLERANCE


def test_unbalanced_folds_are_reported():
    manifest = random_manifest(9, patients=300)
    audit = audit_folds(manifest, stratified_group_kfold(manifest, k=5, seed=9), tolerance=0.0)
    assert not audit.balanced
    assert audit.model_dump()["balanced"] is False


@pytest.mark.parametrize("seed", range(3))
def test_split_ignores_record_order(seed):
    manifest = random_manifest(seed, patients=300)
    order = np.random.default_rng(seed).permutation(len(manifest))
    shuffled = Manifest([manifest.records[i] for i in order], dict(manifest.source))
    original = stratified_group_kfold(manifest, k=5, seed=seed)
    permuted = stratified_group_kfold(shuffled, k=5, seed=seed)
    for f in range(5):
        assert set(original.fold(f).val_patients) == set(permuted.fold(f).val_patients)
        assert set(original.fold(f).train_patients) == set(permuted.fold(f).train_patients)
