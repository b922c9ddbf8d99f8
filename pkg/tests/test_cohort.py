import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohort import (
    CaseRecord, CohortManifest, build_manifest, holdout_split, load_splits, save_splits, stratified_folds,
)
from errors import CaseNotFoundError, InfeasibleSplitError
from imaging_io import LabelMap, Volume, save_case


def _manifest(n_pos: int, n_neg: int) -> CohortManifest:
    cases = [CaseRecord(id=f"c{i:03d}", image_path=None, label_path=None, has_flt=i < n_pos,
                        shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0)) for i in range(n_pos + n_neg)]
    return CohortManifest(cases=cases)


def test_five_folds_keep_flt_ratio():
    manifest = _manifest(68, 32)
    flt = {c.id for c in manifest.cases if c.has_flt}
    folds = stratified_folds(manifest, k=5, seed=0)
    assert len(folds) == 5
    for f in folds:
        pos = sum(cid in flt for cid in f.test)
        assert pos in (13, 14)
        assert len(f.test) - pos in (6, 7)
    all_test = [cid for f in folds for cid in f.test]
    assert sorted(all_test) == sorted(manifest.ids)


def test_each_fold_partitions_the_cohort():
    manifest = _manifest(68, 32)
    for f in stratified_folds(manifest, k=5, seed=3):
        roles = [set(f.train), set(f.validation), set(f.test)]
        assert sum(len(r) for r in roles) == len(manifest)
        assert set().union(*roles) == set(manifest.ids)
        assert not roles[0] & roles[1] and not roles[0] & roles[2] and not roles[1] & roles[2]


@settings(max_examples=40, deadline=None)
@given(n_pos=st.integers(0, 30), n_neg=st.integers(0, 30), k=st.integers(2, 6), seed=st.integers(0, 1000))
def test_folds_partition_property(n_pos, n_neg, k, seed):
    manifest = _manifest(n_pos, n_neg)
    if k > len(manifest):
        with pytest.raises(InfeasibleSplitError):
            stratified_folds(manifest, k, seed)
        return
    folds = stratified_folds(manifest, k, seed)
    tests = [cid for f in folds for cid in f.test]
    assert sorted(tests) == sorted(manifest.ids)
    sizes = [sum(c.has_flt for c in manifest.cases if c.id in set(f.test)) for f in folds]
    assert max(sizes) - min(sizes) <= 1


def test_folds_depend_only_on_seed():
    manifest = _manifest(20, 10)
    assert stratified_folds(manifest, 5, seed=11) == stratified_folds(manifest, 5, seed=11)


def test_holdout_split_counts_and_strata():
    manifest = _manifest(68, 32)
    split = holdout_split(manifest, 80, 10, 10, seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (80, 10, 10)
    flt = {c.id for c in manifest.cases if c.has_flt}
    assert sum(cid in flt for cid in split.test) == 7
    assert set(split.train) | set(split.validation) | set(split.test) == set(manifest.ids)


def test_holdout_split_must_partition():
    with pytest.raises(InfeasibleSplitError):
        holdout_split(_manifest(5, 5), 5, 2, 2)


def test_too_many_folds():
    with pytest.raises(InfeasibleSplitError):
        stratified_folds(_manifest(2, 1), k=5)


def test_splits_file_roundtrip(tmp_path):
    folds = stratified_folds(_manifest(10, 5), k=3, seed=2)
    path = save_splits(folds, tmp_path / "splits.json", mode="kfold", seed=2)
    assert load_splits(path) == folds


def test_manifest_roundtrip_and_lookup(tmp_path):
    manifest = _manifest(3, 2)
    manifest.save(tmp_path / "manifest.json")
    again = CohortManifest.load(tmp_path / "manifest.json")
    assert again.ids == manifest.ids
    assert again.flt_count == 3
    assert again.get("c001").has_flt
    with pytest.raises(CaseNotFoundError):
        again.get("missing")


def _case(case_id: str, flt: bool):
    label = np.zeros((6, 6, 6), dtype=np.uint8)
    label[2:4, 2:4, 2:4] = 3 if flt else 1
    volume = Volume.from_array(np.zeros((6, 6, 6), dtype=np.float32), id=case_id)
    return volume, LabelMap.like(volume, label)


def test_build_manifest_from_images_and_labels_dirs(tmp_path):
    for cid, flt in (("a", True), ("b", False)):
        save_case(*_case(cid, flt), tmp_path)
    orphan, _ = _case("c", False)
    save_case(orphan, None, tmp_path)

    manifest = build_manifest(tmp_path)
    assert manifest.ids == ["a", "b"]
    assert manifest.get("a").has_flt and not manifest.get("b").has_flt
    assert manifest.unlabeled == ["c"]


def test_build_manifest_from_flat_layout(tmp_path):
    import nibabel as nib

    volume, label = _case("x", True)
    nib.save(nib.Nifti1Image(volume.data, volume.affine), str(tmp_path / "007_image.nii.gz"))
    nib.save(nib.Nifti1Image(label.data, label.affine), str(tmp_path / "007_label.nii.gz"))
    manifest = build_manifest(tmp_path)
    assert manifest.ids == ["007"]
    assert manifest.flt_count == 1


def test_empty_directory_gives_empty_manifest(tmp_path):
    assert len(build_manifest(tmp_path)) == 0
