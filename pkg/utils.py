from __future__ import annotations
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import ConfigError

CLASS_NAMES = {1: "TL", 2: "FL", 3: "FLT"}


def safe_case_id(raw: str) -> str:
    cid = raw.strip()
    for suffix in (".nii.gz", ".nii"):
        if cid.endswith(suffix):
            cid = cid[: -len(suffix)]
    cid = re.sub(r"[^A-Za-z0-9_.-]", "_", cid)
    return cid or "case"


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    words = [int(seed)]
    for k in keys:
        # crc32 is stable across processes, unlike hash()
        words.append(zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(words))


def as_triple(value, name: str = "value") -> tuple:
    if np.isscalar(value):
        return (value, value, value)
    out = tuple(value)
    if len(out) != 3:
        raise ConfigError(f"{name} must have 3 components, got {len(out)}")
    return out


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class RunPaths:
    output_dir: Path
    run_id: str

    @property
    def root(self) -> Path:
        return Path(self.output_dir) / self.run_id

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def splits(self) -> Path:
        return self.root / "splits.json"

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def preprocessed(self) -> Path:
        return self.root / "preprocessed"

    @property
    def figures(self) -> Path:
        return self.root / "figures"

    def trained_folds(self) -> list[int]:
        return sorted(int(p.name.split("_", 1)[1]) for p in self.root.glob("fold_*") if p.is_dir())

    def fold(self, fold: int) -> Path:
        return self.root / f"fold_{fold}"

    def stage(self, fold: int, stage: str) -> Path:
        return self.fold(fold) / stage

    def phase(self, fold: int, phase: str) -> Path:
        return self.fold(fold) / phase
