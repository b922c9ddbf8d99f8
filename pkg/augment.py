from __future__ import annotations
import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, PatchTooLargeError
from imaging_io import LabelMap, Volume
from utils import as_triple

log = logging.getLogger("tbadseg.augment")

ROTATION_PLANES = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.2
    patch_size: tuple[int, int, int] = (96, 96, 96)
    flip_axes: tuple[int, ...] = (0, 1, 2)
    rotation_planes: tuple[tuple[int, int], ...] = ROTATION_PLANES
    intensity_shift_max: float = 0.1
    min_crop_fraction: float = 0.8
    bias_foreground: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in as_triple(self.patch_size, "patch_size")))
        object.__setattr__(self, "flip_axes", tuple(int(a) for a in self.flip_axes))
        object.__setattr__(self, "rotation_planes", tuple(tuple(int(a) for a in p) for p in self.rotation_planes))
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("augment probability must lie in [0, 1]")
        if any(p < 1 for p in self.patch_size):
            raise ConfigError("patch_size components must be >= 1")
        if self.intensity_shift_max < 0:
            raise ConfigError("intensity_shift_max must be >= 0")
        if not 0.0 < self.min_crop_fraction <= 1.0:
            raise ConfigError("min_crop_fraction must lie in (0, 1]")
        if any(a not in (0, 1, 2) for a in self.flip_axes):
            raise ConfigError("flip_axes must be drawn from {0, 1, 2}")
        if any(len(p) != 2 or p[0] == p[1] or p[0] not in (0, 1, 2) or p[1] not in (0, 1, 2) for p in self.rotation_planes):
            raise ConfigError("rotation_planes must be pairs of distinct axes")


@dataclass(frozen=True)
class TransformPlan:
    """Spatial + intensity transforms drawn for one sample; applying it is deterministic."""
    crop: tuple[tuple[int, int], ...] | None = None  # kept region per axis, rescaled back to the patch
    flips: tuple[int, ...] = ()
    rotation: tuple[tuple[int, int], int] | None = None  # (plane, quarter turns)
    shift: float | None = None

    @property
    def is_identity(self) -> bool:
        return self.crop is None and not self.flips and self.rotation is None and self.shift is None

    def apply(self, image: np.ndarray, label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # image is (C, x, y, z); label is (x, y, z); intensity shift hits channel 0 only
        image = np.array(image, copy=True)
        label = np.array(label, copy=True)
        if self.crop is not None:
            image, label = crop_and_rescale(image, label, self.crop)
        for axis in self.flips:
            image = np.flip(image, axis=axis + 1)
            label = np.flip(label, axis=axis)
        if self.rotation is not None:
            (a, b), k = self.rotation
            image = np.rot90(image, k=k, axes=(a + 1, b + 1))
            label = np.rot90(label, k=k, axes=(a, b))
        if self.shift is not None:
            image[0] = image[0] + self.shift
        image[0] = np.clip(image[0], 0.0, 1.0)
        return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(label, dtype=np.uint8)


def crop_and_rescale(image: np.ndarray, label: np.ndarray,
                     crop: tuple[tuple[int, int], ...]) -> tuple[np.ndarray, np.ndarray]:
    """Cut the crop region out and stretch it back to the input shape by nearest neighbour.

    Every output voxel copies one voxel of the region, in image and label alike.
    """
    idx = [start + ((np.arange(n) + 0.5) * (stop - start) / n).astype(np.intp)
           for (start, stop), n in zip(crop, label.shape)]
    grid = np.ix_(*idx)
    return np.array(image[(slice(None), *grid)]), np.array(label[grid])


def sample_plan(shape: tuple[int, int, int], cfg: AugmentConfig, rng: np.random.Generator) -> TransformPlan:
    if rng.random() >= cfg.probability:
        return TransformPlan()

    # independent coin per transform; an empty draw falls back to one transform
    picks = rng.random(4) < 0.5
    if not picks.any():
        picks[rng.integers(4)] = True
    crop = flips = rotation = shift = None

    if picks[0]:
        crop = []
        for n in shape:
            keep = max(1, int(np.ceil(n * rng.uniform(cfg.min_crop_fraction, 1.0))))
            start = int(rng.integers(0, n - keep + 1))
            crop.append((start, start + keep))
        crop = tuple(crop)
    if picks[1] and cfg.flip_axes:
        chosen = tuple(a for a in cfg.flip_axes if rng.random() < 0.5)
        flips = chosen or (int(rng.choice(cfg.flip_axes)),)
    if picks[2] and cfg.rotation_planes:
        plane = cfg.rotation_planes[int(rng.integers(len(cfg.rotation_planes)))]
        if shape[plane[0]] == shape[plane[1]]:
            k = int(rng.integers(1, 4))
        else:
            k = 2  # only the half turn keeps a non-square plane's shape
        rotation = (plane, k)
    if picks[3]:
        shift = float(rng.uniform(-cfg.intensity_shift_max, cfg.intensity_shift_max))
    return TransformPlan(crop=crop, flips=flips or (), rotation=rotation, shift=shift)


def _check_patch(shape, patch_size):
    if any(p > n for p, n in zip(patch_size, shape)):
        raise PatchTooLargeError(f"patch {tuple(patch_size)} does not fit volume {tuple(shape)}")


def patch_start(label: np.ndarray, patch_size, rng: np.random.Generator, bias_foreground: bool) -> tuple[int, int, int]:
    shape = label.shape
    _check_patch(shape, patch_size)
    hi = [n - p for n, p in zip(shape, patch_size)]
    if bias_foreground and rng.random() < 0.5:
        fg = np.flatnonzero(label)
        if fg.size:
            center = np.unravel_index(int(fg[rng.integers(fg.size)]), shape)
            return tuple(int(np.clip(c - p // 2, 0, h)) for c, p, h in zip(center, patch_size, hi))
    return tuple(int(rng.integers(0, h + 1)) for h in hi)


def extract_patch_arrays(image: np.ndarray, label: np.ndarray, patch_size, rng: np.random.Generator,
                         bias_foreground: bool = True) -> tuple[np.ndarray, np.ndarray]:
    start = patch_start(label, patch_size, rng, bias_foreground)
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_size))
    return image[(slice(None), *sl)], label[sl]


def extract_patch(volume: Volume, label: LabelMap, patch_size, rng: np.random.Generator,
                  bias_foreground: bool = True) -> tuple[Volume, LabelMap]:
    label.check_aligned(volume)
    patch_size = tuple(int(p) for p in as_triple(patch_size, "patch_size"))
    start = patch_start(label.data, patch_size, rng, bias_foreground)
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch_size))
    affine = np.array(volume.affine, copy=True)
    affine[:3, 3] = (volume.affine @ np.array([*start, 1.0]))[:3]
    return (
        Volume(data=volume.data[sl], spacing=volume.spacing, affine=affine, id=volume.id),
        LabelMap(data=label.data[sl], spacing=label.spacing, affine=affine, id=label.id),
    )


def pad_to_patch(image: np.ndarray, label: np.ndarray, patch_size) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad (C, x, y, z) / (x, y, z) arrays at the far end so a patch always fits."""
    pad = [(0, max(0, p - n)) for n, p in zip(label.shape, patch_size)]
    if not any(b for _, b in pad):
        return image, label
    return np.pad(image, [(0, 0), *pad]), np.pad(label, pad)


def augment_arrays(image: np.ndarray, label: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, TransformPlan]:
    patch_img, patch_lab = extract_patch_arrays(image, label, cfg.patch_size, rng, cfg.bias_foreground)
    plan = sample_plan(patch_lab.shape, cfg, rng)
    if plan.is_identity:
        return np.ascontiguousarray(patch_img, dtype=np.float32), np.ascontiguousarray(patch_lab, dtype=np.uint8), plan
    out_img, out_lab = plan.apply(patch_img, patch_lab)
    return out_img, out_lab, plan


def augment_sample(volume: Volume, label: LabelMap, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[Volume, LabelMap]:
    label.check_aligned(volume)
    out_img, out_lab, _ = augment_arrays(volume.data[None], label.data, cfg, rng)
    return (
        Volume.from_array(out_img[0], spacing=volume.spacing, id=volume.id),
        LabelMap.from_array(out_lab, spacing=label.spacing, id=label.id),
    )
