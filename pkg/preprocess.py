from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from errors import ConfigError, ContractError, EmptyForegroundError, InvalidIntensityError, KindMismatchError, ShapeError
from imaging_io import LabelMap, Volume
from utils import as_triple

log = logging.getLogger("tbadseg.preprocess")


@dataclass(frozen=True)
class PreprocessConfig:
    hu_min: float = -500.0
    hu_max: float = 1000.0
    target_spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)
    crop_margin: int = 4
    foreground_threshold: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in as_triple(self.target_spacing, "target_spacing")))
        if not self.hu_min < self.hu_max:
            raise ConfigError(f"hu_min ({self.hu_min}) must be below hu_max ({self.hu_max})")
        if any(not math.isfinite(s) or s <= 0 for s in self.target_spacing):
            raise ConfigError(f"target_spacing must be positive, got {self.target_spacing}")
        if self.crop_margin < 0:
            raise ConfigError("crop_margin must be >= 0")
        if not 0.0 <= self.foreground_threshold <= 1.0:
            raise ConfigError("foreground_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class CropBox:
    start: tuple[int, int, int]
    stop: tuple[int, int, int]  # exclusive
    source_shape: tuple[int, int, int]
    source_affine: np.ndarray = field(repr=False, compare=False)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.start, self.stop))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.start, self.stop))

    def to_dict(self) -> dict:
        return {
            "start": list(self.start),
            "stop": list(self.stop),
            "source_shape": list(self.source_shape),
            "source_affine": np.asarray(self.source_affine).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CropBox":
        return cls(tuple(d["start"]), tuple(d["stop"]), tuple(d["source_shape"]), np.asarray(d["source_affine"], dtype=np.float64))


def clip_and_normalize(volume: Volume, cfg: PreprocessConfig) -> Volume:
    data = volume.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise InvalidIntensityError(f"{volume.id}: NaN or Inf voxels")
    out = (np.clip(data, cfg.hu_min, cfg.hu_max) - cfg.hu_min) / (cfg.hu_max - cfg.hu_min)
    return volume.with_data(out.astype(np.float32))


def to_hounsfield(volume: Volume, cfg: PreprocessConfig) -> Volume:
    data = volume.data.astype(np.float64) * (cfg.hu_max - cfg.hu_min) + cfg.hu_min
    return volume.with_data(data.astype(np.float32))


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    # round before ceil so 135 * 0.7 / 1.5 style products don't pick up an extra voxel
    return tuple(max(1, int(math.ceil(round(n * s / t, 6)))) for n, s, t in zip(shape, spacing, target_spacing))


def _resample_array(data: np.ndarray, spacing, target_spacing, out_shape, order: int) -> np.ndarray:
    # output voxel i sits at physical i * target; voxel 0 centres coincide
    scale = np.asarray(target_spacing, dtype=np.float64) / np.asarray(spacing, dtype=np.float64)
    return ndimage.affine_transform(
        data, matrix=scale, offset=0.0, output_shape=tuple(out_shape),
        order=order, mode="nearest", prefilter=False,
    )


def _rescaled_affine(affine: np.ndarray, spacing, target_spacing) -> np.ndarray:
    out = np.array(affine, dtype=np.float64, copy=True)
    out[:3, :3] = out[:3, :3] * (np.asarray(target_spacing) / np.asarray(spacing))[None, :]
    return out


def resample(obj: Volume | LabelMap, cfg: PreprocessConfig, kind: str = "image") -> Volume | LabelMap:
    if kind not in ("image", "label"):
        raise ContractError(f"kind must be 'image' or 'label', got {kind!r}")
    if kind == "label" and not (isinstance(obj, LabelMap) or np.issubdtype(obj.data.dtype, np.integer)):
        raise KindMismatchError(f"{obj.id}: nearest-neighbour label resampling requested on a float-valued grid")
    target = cfg.target_spacing
    out_shape = resampled_shape(obj.shape, obj.spacing, target)
    affine = _rescaled_affine(obj.affine, obj.spacing, target)
    if kind == "label":
        data = _resample_array(obj.data, obj.spacing, target, out_shape, order=0)
        return LabelMap(data=data, spacing=target, affine=affine, id=obj.id)
    data = _resample_array(obj.data.astype(np.float32), obj.spacing, target, out_shape, order=1)
    return Volume(data=data, spacing=target, affine=affine, id=obj.id)


def resample_to_reference(label: LabelMap, reference: Volume | LabelMap) -> LabelMap:
    """Nearest-neighbour resample of a label map onto another grid with the same origin."""
    data = _resample_array(label.data, label.spacing, reference.spacing, reference.shape, order=0)
    return LabelMap(data=data, spacing=reference.spacing, affine=reference.affine, id=label.id)


def crop_foreground(volume: Volume, label: LabelMap | None, cfg: PreprocessConfig) -> tuple[Volume, LabelMap | None, CropBox]:
    if label is not None:
        label.check_aligned(volume)
    mask = volume.data > cfg.foreground_threshold
    if not mask.any():
        raise EmptyForegroundError(f"{volume.id}: no voxel above {cfg.foreground_threshold}")
    idx = np.nonzero(mask)
    start = tuple(max(0, int(i.min()) - cfg.crop_margin) for i in idx)
    stop = tuple(min(n, int(i.max()) + 1 + cfg.crop_margin) for i, n in zip(idx, volume.shape))
    box = CropBox(start=start, stop=stop, source_shape=volume.shape, source_affine=volume.affine)

    affine = np.array(volume.affine, copy=True)
    affine[:3, 3] = (volume.affine @ np.array([*start, 1.0]))[:3]
    cropped = Volume(data=volume.data[box.slices], spacing=volume.spacing, affine=affine, id=volume.id)
    cropped_label = None
    if label is not None:
        cropped_label = LabelMap(data=label.data[box.slices], spacing=label.spacing, affine=affine, id=label.id)
    return cropped, cropped_label, box


def paste_back(label: LabelMap, box: CropBox) -> LabelMap:
    if label.shape != box.shape:
        raise ShapeError(f"label shape {label.shape} does not match crop box {box.shape}")
    canvas = np.zeros(box.source_shape, dtype=np.uint8)
    canvas[box.slices] = label.data
    return LabelMap(data=canvas, spacing=label.spacing, affine=box.source_affine, id=label.id)


@dataclass(frozen=True, eq=False)
class PreprocessedCase:
    volume: Volume
    label: LabelMap | None
    crop_box: CropBox
    source_spacing: tuple[float, float, float]
    source_shape: tuple[int, int, int]
    source_affine: np.ndarray = field(repr=False)


def preprocess_case(volume: Volume, label: LabelMap | None, cfg: PreprocessConfig) -> PreprocessedCase:
    """Window, resample and crop one case; the same chain runs at train and inference time."""
    normalized = clip_and_normalize(volume, cfg)
    resampled = resample(normalized, cfg, kind="image")
    resampled_label = resample(label, cfg, kind="label") if label is not None else None
    cropped, cropped_label, box = crop_foreground(resampled, resampled_label, cfg)
    log.debug("%s: %s -> %s (crop %s..%s)", volume.id, volume.shape, cropped.shape, box.start, box.stop)
    return PreprocessedCase(
        volume=cropped, label=cropped_label, crop_box=box,
        source_spacing=volume.spacing, source_shape=volume.shape, source_affine=volume.affine,
    )


def restore_prediction(label: LabelMap, case: PreprocessedCase) -> LabelMap:
    """Map a prediction on the cropped, resampled grid back onto the original image grid."""
    pasted = paste_back(label, case.crop_box)
    reference = LabelMap(
        data=np.zeros(case.source_shape, dtype=np.uint8),
        spacing=case.source_spacing, affine=case.source_affine, id=label.id,
    )
    return resample_to_reference(pasted, reference)
