from __future__ import annotations
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from errors import CaseNotFoundError, ConfigError, InfeasibleSplitError
from imaging_io import IMAGES_DIR, LABELS_DIR, load_case
from utils import round_half_up, safe_case_id

log = logging.getLogger("tbadseg.cohort")

MANIFEST_SCHEMA_VERSION = 1
SPLITS_SCHEMA_VERSION = 1
FLT_CLASS = 3


@dataclass(frozen=True)
class CaseRecord:
    id: str
    image_path: str | None
    label_path: str | None
    has_flt: bool
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]

    @classmethod
    def from_dict(cls, d: dict) -> "CaseRecord":
        return cls(
            id=d["id"], image_path=d.get("image_path"), label_path=d.get("label_path"),
            has_flt=bool(d["has_flt"]), shape=tuple(d["shape"]), spacing=tuple(d["spacing"]),
        )


@dataclass
class CohortManifest:
    cases: list[CaseRecord] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)  # image ids with no label file

    def __len__(self) -> int:
        return len(self.cases)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cases]

    def get(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise CaseNotFoundError(f"{case_id} is not in the manifest")

    @property
    def flt_count(self) -> int:
        return sum(1 for c in self.cases if c.has_flt)

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "cases": [asdict(c) for c in self.cases],
            "unlabeled": list(self.unlabeled),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "CohortManifest":
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ConfigError(f"{path}: unsupported manifest schema {d.get('schema_version')}")
        return cls(cases=[CaseRecord.from_dict(c) for c in d["cases"]], unlabeled=list(d.get("unlabeled", [])))


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def role(self, name: str) -> tuple[str, ...]:
        if name in ("val", "validation"):
            return self.validation
        if name in ("train", "test"):
            return getattr(self, name)
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"fold_index": self.fold_index, "train": list(self.train),
                "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls(int(d["fold_index"]), tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))


def save_splits(splits: list[FoldSplit], path: str | Path, *, mode: str, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SPLITS_SCHEMA_VERSION, "mode": mode, "seed": seed, "folds": [s.to_dict() for s in splits]}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_splits(path: str | Path) -> list[FoldSplit]:
    d = json.loads(Path(path).read_text())
    if d.get("schema_version") != SPLITS_SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported splits schema {d.get('schema_version')}")
    return [FoldSplit.from_dict(f) for f in d["folds"]]


def _discover_pairs(data_dir: Path) -> list[tuple[str, Path, Path | None]]:
    pairs: list[tuple[str, Path, Path | None]] = []
    images_dir = data_dir / IMAGES_DIR
    if images_dir.is_dir():
        for img in sorted(images_dir.glob("*.nii*")):
            cid = safe_case_id(img.name)
            lab = next((p for p in (data_dir / LABELS_DIR / f"{cid}.nii.gz", data_dir / LABELS_DIR / f"{cid}.nii") if p.is_file()), None)
            pairs.append((cid, img, lab))
        return pairs
    # ImageTBAD style: <id>_image.nii.gz next to <id>_label.nii.gz
    for img in sorted(data_dir.glob("*_image.nii*")):
        stem = safe_case_id(img.name)[: -len("_image")]
        lab = next((p for p in data_dir.glob(f"{stem}_label.nii*")), None)
        pairs.append((stem, img, lab))
    return pairs


def build_manifest(data_dir: str | Path, *, label_remap: Mapping[int, int] | None = None) -> CohortManifest:
    data_dir = Path(data_dir)
    pairs = _discover_pairs(data_dir)
    if not pairs:
        log.warning("no images found under %s; manifest is empty", data_dir)
        return CohortManifest()

    cases: list[CaseRecord] = []
    unlabeled: list[str] = []
    for cid, img_path, lab_path in pairs:
        if lab_path is None:
            log.warning("%s has no label; excluded from supervised splits", cid)
            unlabeled.append(cid)
            continue
        volume, label = load_case(img_path, lab_path, case_id=cid, label_remap=label_remap)
        cases.append(CaseRecord(
            id=cid, image_path=str(img_path), label_path=str(lab_path),
            has_flt=bool(np.any(label.data == FLT_CLASS)), shape=volume.shape, spacing=volume.spacing,
        ))
    log.info("manifest: %d labelled cases (%d with FLT), %d unlabelled", len(cases), sum(c.has_flt for c in cases), len(unlabeled))
    return CohortManifest(cases=cases, unlabeled=unlabeled)


def _strata(manifest: CohortManifest, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    pos = sorted(c.id for c in manifest.cases if c.has_flt)
    neg = sorted(c.id for c in manifest.cases if not c.has_flt)
    return [pos[i] for i in rng.permutation(len(pos))], [neg[i] for i in rng.permutation(len(neg))]


def stratified_folds(manifest: CohortManifest, k: int = 5, seed: int = 0) -> list[FoldSplit]:
    if k < 2:
        raise InfeasibleSplitError("k must be >= 2")
    if k > len(manifest):
        raise InfeasibleSplitError(f"cannot make {k} folds from {len(manifest)} cases")
    pos, neg = _strata(manifest, np.random.default_rng(seed))
    buckets: list[list[str]] = [[] for _ in range(k)]
    for stratum in (pos, neg):
        for i, cid in enumerate(stratum):
            buckets[i % k].append(cid)

    folds = []
    for i in range(k):
        test = buckets[i]
        val = buckets[(i + 1) % k]
        train = [cid for j, b in enumerate(buckets) if j not in (i, (i + 1) % k) for cid in b]
        folds.append(FoldSplit(i, tuple(train), tuple(val), tuple(test)))
    return folds


def holdout_split(manifest: CohortManifest, n_train: int = 80, n_val: int = 10, n_test: int = 10,
                  seed: int = 0) -> FoldSplit:
    n = len(manifest)
    if n_train + n_val + n_test != n or min(n_train, n_val, n_test) < 0:
        raise InfeasibleSplitError(f"split {n_train}/{n_val}/{n_test} does not partition {n} cases")
    pos, neg = _strata(manifest, np.random.default_rng(seed))
    ratio = len(pos) / n if n else 0.0
    test_pos = min(len(pos), round_half_up(n_test * ratio))
    val_pos = min(len(pos) - test_pos, round_half_up(n_val * ratio))
    train_pos = len(pos) - test_pos - val_pos
    if train_pos > n_train or n_test - test_pos > len(neg) or n_val - val_pos > len(neg) - (n_test - test_pos):
        raise InfeasibleSplitError("stratified holdout split is infeasible for these counts")

    test = pos[:test_pos] + neg[: n_test - test_pos]
    val = pos[test_pos:test_pos + val_pos] + neg[n_test - test_pos: n_test - test_pos + n_val - val_pos]
    used = set(test) | set(val)
    train = [cid for cid in pos + neg if cid not in used]
    return FoldSplit(0, tuple(train), tuple(val), tuple(test))


def load_case_record(record: CaseRecord, label_remap: Mapping[int, int] | None = None):
    if record.image_path is None:
        raise CaseNotFoundError(f"{record.id} has no image on disk")
    return load_case(record.image_path, record.label_path, case_id=record.id, label_remap=label_remap)

