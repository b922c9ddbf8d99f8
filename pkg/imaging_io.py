"""NIfTI I/O for CTA volumes and TL/FL/FLT label maps.

Array index order is (x, y, z) exactly as stored on disk; every other module
inherits that convention.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import nibabel as nib
import numpy as np

from errors import AlignmentError, CaseNotFoundError, ContractError, CorruptLabelError, UnsupportedFormatError
from utils import safe_case_id

log = logging.getLogger("tbadseg.io")

LABEL_VALUES = (0, 1, 2, 3)  # background, TL, FL, FLT
IMAGES_DIR = "images"
LABELS_DIR = "labels"


def affine_from_spacing(spacing) -> np.ndarray:
    affine = np.eye(4)
    affine[:3, :3] = np.diag([float(s) for s in spacing])
    return affine


def spacing_from_affine(affine: np.ndarray) -> tuple[float, float, float]:
    norms = np.linalg.norm(np.asarray(affine, dtype=np.float64)[:3, :3], axis=0)
    return tuple(float(n) for n in norms)


def _check_grid(data: np.ndarray, spacing, affine: np.ndarray):
    if data.ndim != 3 or min(data.shape) < 1:
        raise UnsupportedFormatError(f"expected a 3D array, got shape {data.shape}")
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or not np.all(np.isfinite(sp)) or np.any(sp <= 0):
        raise ContractError(f"spacing must be 3 positive finite values, got {spacing}")
    if np.asarray(affine).shape != (4, 4):
        raise ContractError("affine must be 4x4")
    norms = np.asarray(spacing_from_affine(affine))
    if not np.allclose(norms, sp, rtol=1e-6, atol=0):
        raise ContractError(f"affine column norms {norms} disagree with spacing {sp}")


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(repr=False)
    id: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float32))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64))
        _check_grid(self.data, self.spacing, self.affine)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), id: str = "case", affine=None) -> "Volume":
        return cls(data=data, spacing=spacing, affine=affine_from_spacing(spacing) if affine is None else affine, id=id)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data=data, spacing=self.spacing, affine=self.affine, id=self.id)


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(repr=False)
    id: str = "case"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer) and not np.issubdtype(arr.dtype, np.bool_):
            raise CorruptLabelError(f"label map {self.id} must be integer-valued, got {arr.dtype}")
        extra = set(np.unique(arr).tolist()) - set(LABEL_VALUES)
        if extra:
            raise CorruptLabelError(f"label map {self.id} has values outside {LABEL_VALUES}: {sorted(extra)}")
        object.__setattr__(self, "data", arr.astype(np.uint8))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64))
        _check_grid(self.data, self.spacing, self.affine)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), id: str = "case", affine=None) -> "LabelMap":
        return cls(data=data, spacing=spacing, affine=affine_from_spacing(spacing) if affine is None else affine, id=id)

    @classmethod
    def like(cls, ref: Volume | "LabelMap", data: np.ndarray) -> "LabelMap":
        return cls(data=data, spacing=ref.spacing, affine=ref.affine, id=ref.id)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def check_aligned(self, volume: Volume | "LabelMap"):
        if self.shape != volume.shape:
            raise AlignmentError(f"label {self.id} shape {self.shape} != image shape {volume.shape}")
        if not np.allclose(self.spacing, volume.spacing, rtol=1e-6) or not np.allclose(self.affine, volume.affine, atol=1e-5):
            raise AlignmentError(f"label {self.id} grid does not match image {volume.id}")


def _load_nifti(path: Path):
    if not path.is_file():
        raise CaseNotFoundError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as e:
        raise UnsupportedFormatError(f"cannot read {path} as NIfTI: {e}") from e
    if len(img.shape) != 3:
        raise UnsupportedFormatError(f"{path} has shape {img.shape}; only single-channel 3D volumes are supported")
    affine = np.asarray(img.affine, dtype=np.float64)
    spacing = spacing_from_affine(affine)
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    if not np.allclose(zooms, spacing, rtol=1e-4):
        log.warning("%s: header zooms %s disagree with affine spacing %s; using the affine", path.name, zooms, spacing)
    return img, spacing, affine


def _apply_remap(raw: np.ndarray, remap: Mapping[int, int] | None, path: Path) -> np.ndarray:
    if not np.all(np.isfinite(raw)) or not np.all(np.mod(raw, 1) == 0):
        raise CorruptLabelError(f"{path} contains non-integer label values")
    labels = raw.astype(np.int64)
    if remap:
        out = np.zeros_like(labels)
        seen = np.zeros(labels.shape, dtype=bool)
        for src, dst in remap.items():
            hit = labels == int(src)
            out[hit] = int(dst)
            seen |= hit
        # values absent from the table pass through unchanged
        out[~seen] = labels[~seen]
        labels = out
    extra = set(np.unique(labels).tolist()) - set(LABEL_VALUES)
    if extra:
        raise CorruptLabelError(f"{path} has label values outside {LABEL_VALUES}: {sorted(extra)}")
    return labels.astype(np.uint8)


def load_case(image_path: str | Path, label_path: str | Path | None = None, *,
              case_id: str | None = None, label_remap: Mapping[int, int] | None = None) -> tuple[Volume, LabelMap | None]:
    image_path = Path(image_path)
    cid = case_id or safe_case_id(image_path.name)
    img, spacing, affine = _load_nifti(image_path)
    volume = Volume(data=img.get_fdata(dtype=np.float32), spacing=spacing, affine=affine, id=cid)
    if label_path is None:
        return volume, None

    label_path = Path(label_path)
    lab_img, lab_spacing, lab_affine = _load_nifti(label_path)
    if tuple(lab_img.shape) != volume.shape:
        raise AlignmentError(f"label {label_path.name} shape {lab_img.shape} != image shape {volume.shape}")
    raw = np.asanyarray(lab_img.dataobj)
    label = LabelMap(data=_apply_remap(raw, label_remap, label_path), spacing=lab_spacing, affine=lab_affine, id=cid)
    label.check_aligned(volume)
    return volume, label


def case_paths(directory: str | Path, case_id: str) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / IMAGES_DIR / f"{case_id}.nii.gz", directory / LABELS_DIR / f"{case_id}.nii.gz"


def save_case(volume: Volume, label: LabelMap | None, directory: str | Path) -> dict[str, Path]:
    if label is not None:
        label.check_aligned(volume)
    image_path, label_path = case_paths(directory, volume.id)
    image_path.parent.mkdir(parents=True, exist_ok=True)

    img = nib.Nifti1Image(volume.data.astype(np.float32), volume.affine)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(image_path))
    out = {"image": image_path}

    if label is not None:
        label_path.parent.mkdir(parents=True, exist_ok=True)
        lab = nib.Nifti1Image(label.data.astype(np.uint8), label.affine)
        lab.header.set_xyzt_units("mm")
        nib.save(lab, str(label_path))
        out["label"] = label_path
    return out


def save_label(label: LabelMap, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lab = nib.Nifti1Image(label.data.astype(np.uint8), label.affine)
    lab.header.set_xyzt_units("mm")
    nib.save(lab, str(path))
    return path
