"""Synthetic dissected-aorta phantoms with exact TL/FL/FLT ground truth."""
from __future__ import annotations
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from cohort import CaseRecord, CohortManifest
from errors import PhantomSpecError
from imaging_io import LabelMap, Volume, save_case
from preprocess import PreprocessConfig, to_hounsfield
from utils import as_triple, round_half_up

log = logging.getLogger("tbadseg.phantom")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 1.5
    vessel_radius: float = 12.0  # mm
    # centerline runs along z: straight below bend_fraction, circular arc of arc_radius above it
    bend_fraction: float = 0.6
    arc_radius: float = 60.0  # mm
    arc_angle: float = 0.0  # direction of the arc in the x-y plane, radians
    septum_angle: float = 0.0  # radians
    septum_offset: float = -0.15  # fraction of radius; negative makes TL the smaller lumen
    flap_thickness: float = 1.5  # mm
    flt_present: bool = False
    flt_arc_fraction: float = 0.3
    lumen_intensity: float = 0.77
    fl_intensity: float = 0.70
    flt_intensity: float = 0.40
    background_intensity: float = 0.27
    flap_intensity: float = 0.45
    body_fraction: float = 0.9  # body ellipse diameter as a fraction of the in-plane extent
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in as_triple(self.shape, "shape")))
        if any(s < 8 for s in self.shape):
            raise PhantomSpecError(f"phantom shape {self.shape} is too small")
        if self.spacing <= 0 or self.vessel_radius <= 0:
            raise PhantomSpecError("spacing and vessel_radius must be positive")
        if self.flt_present and not 0.0 < self.flt_arc_fraction < 1.0:
            raise PhantomSpecError("flt_arc_fraction must lie in (0, 1) when FLT is present")
        if not -0.8 < self.septum_offset < 0.8:
            raise PhantomSpecError("septum_offset must lie in (-0.8, 0.8)")
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise_sigma must be >= 0")


def _centerline(spec: PhantomSpec) -> np.ndarray:
    """In-plane centre (mm) for every z slice."""
    nx, ny, nz = spec.shape
    z = np.arange(nz) * spec.spacing
    z_bend = spec.bend_fraction * (nz - 1) * spec.spacing
    rise = np.clip(z - z_bend, 0.0, None)
    if spec.arc_radius <= rise.max():
        raise PhantomSpecError("arc_radius is shorter than the curved segment")
    offset = spec.arc_radius - np.sqrt(spec.arc_radius ** 2 - rise ** 2)
    cx = (nx - 1) * spec.spacing / 2 + offset * math.cos(spec.arc_angle)
    cy = (ny - 1) * spec.spacing / 2 + offset * math.sin(spec.arc_angle)
    return np.stack([cx, cy], axis=1)


def _check_fits(spec: PhantomSpec, centers: np.ndarray):
    margin = spec.spacing
    extent = np.array(spec.shape[:2]) * spec.spacing
    lo = centers - spec.vessel_radius - margin
    hi = centers + spec.vessel_radius + margin
    if np.any(lo < 0) or np.any(hi > extent):
        raise PhantomSpecError(f"vessel of radius {spec.vessel_radius} mm leaves the {spec.shape} volume")


def generate_phantom(spec: PhantomSpec, case_id: str = "phantom") -> tuple[Volume, LabelMap, CaseRecord]:
    centers = _centerline(spec)
    _check_fits(spec, centers)
    nx, ny, nz = spec.shape
    rng = np.random.default_rng(spec.seed)

    gx, gy = np.meshgrid(np.arange(nx) * spec.spacing, np.arange(ny) * spec.spacing, indexing="ij")
    normal = np.array([math.cos(spec.septum_angle), math.sin(spec.septum_angle)])
    r = spec.vessel_radius
    label = np.zeros(spec.shape, dtype=np.uint8)
    flap = np.zeros(spec.shape, dtype=bool)

    for k in range(nz):
        dx = gx - centers[k, 0]
        dy = gy - centers[k, 1]
        rho = np.hypot(dx, dy)
        inside = rho <= r
        side = dx * normal[0] + dy * normal[1] - spec.septum_offset * r
        on_flap = inside & (np.abs(side) < spec.flap_thickness / 2)
        tl = inside & (side < 0) & ~on_flap
        fl = inside & (side > 0) & ~on_flap
        sl = label[:, :, k]
        sl[tl] = 1
        sl[fl] = 2
        flap[:, :, k] = on_flap
        if spec.flt_present and fl.any():
            # outer rim of the FL cross-section: a crescent holding flt_arc_fraction of its voxels
            cut = np.quantile(rho[fl], 1.0 - spec.flt_arc_fraction)
            sl[fl & (rho > cut)] = 3

    ex, ey = (nx - 1) * spec.spacing / 2, (ny - 1) * spec.spacing / 2
    ax, ay = spec.body_fraction * nx * spec.spacing / 2, spec.body_fraction * ny * spec.spacing / 2
    body2d = ((gx - ex) / ax) ** 2 + ((gy - ey) / ay) ** 2 <= 1.0
    body = np.repeat(body2d[:, :, None], nz, axis=2) | (label > 0) | flap

    means = np.zeros(spec.shape, dtype=np.float64)
    means[body] = spec.background_intensity
    means[flap] = spec.flap_intensity
    means[label == 1] = spec.lumen_intensity
    means[label == 2] = spec.fl_intensity
    means[label == 3] = spec.flt_intensity
    noise = rng.normal(0.0, spec.noise_sigma, size=spec.shape) if spec.noise_sigma > 0 else 0.0
    image = np.where(body, np.clip(means + noise, 0.0, 1.0), 0.0)

    volume = Volume.from_array(image.astype(np.float32), spacing=(spec.spacing,) * 3, id=case_id)
    labels = LabelMap.like(volume, label)
    record = CaseRecord(
        id=case_id, image_path=None, label_path=None, has_flt=bool((label == 3).any()),
        shape=volume.shape, spacing=volume.spacing,
    )
    return volume, labels, record


def random_spec(rng: np.random.Generator, flt_present: bool, shape=(64, 64, 64), spacing: float = 1.5) -> PhantomSpec:
    shape = tuple(int(s) for s in as_triple(shape, "shape"))
    half_extent = min(shape[:2]) * spacing / 2
    radius = float(rng.uniform(0.18, 0.26) * half_extent * 2 / 2.2)
    max_offset = max(0.0, half_extent - radius - 3 * spacing)
    curved = (1.0 - 0.6) * (shape[2] - 1) * spacing
    # pick an arc radius whose sagitta stays inside the free margin
    arc_radius = max(curved * 1.05, (curved ** 2 / (2 * max_offset) + max_offset / 2) if max_offset > 0 else curved * 10)
    return PhantomSpec(
        shape=shape,
        spacing=spacing,
        vessel_radius=radius,
        bend_fraction=0.6,
        arc_radius=float(arc_radius * rng.uniform(1.05, 1.5)),
        arc_angle=float(rng.uniform(0, 2 * math.pi)),
        septum_angle=float(rng.uniform(0, 2 * math.pi)),
        septum_offset=float(rng.uniform(-0.3, 0.0)),
        flt_present=flt_present,
        flt_arc_fraction=float(rng.uniform(0.25, 0.5)),
        noise_sigma=float(rng.uniform(0.02, 0.04)),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def generate_cohort(n: int, flt_fraction: float = 0.68, seed: int = 0, out_dir: str | Path | None = None, *,
                    shape=(64, 64, 64), spacing: float = 1.5,
                    preprocess: PreprocessConfig | None = None) -> CohortManifest:
    """Write n phantoms (images in HU) plus manifest.json under out_dir; exactly round(n * flt_fraction) carry FLT."""
    if n < 1:
        raise PhantomSpecError("cohort size must be >= 1")
    if not 0.0 <= flt_fraction <= 1.0:
        raise PhantomSpecError("flt_fraction must lie in [0, 1]")
    preprocess = preprocess or PreprocessConfig()
    n_flt = round_half_up(n * flt_fraction)
    order = np.random.default_rng(seed).permutation(n)
    flt_ids = set(order[:n_flt].tolist())
    children = np.random.SeedSequence(seed).spawn(n)

    records: list[CaseRecord] = []
    for i in range(n):
        case_id = f"phantom_{i:03d}"
        spec = random_spec(np.random.default_rng(children[i]), i in flt_ids, shape=shape, spacing=spacing)
        volume, label, record = generate_phantom(spec, case_id)
        if out_dir is not None:
            paths = save_case(to_hounsfield(volume, preprocess), label, out_dir)
            record = replace(record, image_path=str(paths["image"]), label_path=str(paths["label"]))
        records.append(record)

    manifest = CohortManifest(cases=records)
    if out_dir is not None:
        manifest.save(Path(out_dir) / "manifest.json")
    log.info("generated %d phantoms (%d with FLT)", n, n_flt)
    return manifest
