from __future__ import annotations
import textwrap
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from imaging_io import LabelMap, Volume
from phantom import PhantomSpec, generate_phantom
from utils import derive_rng


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def phantom_case():
    """One 32^3 phantom with FLT; image normalised to [0, 1]."""
    spec = PhantomSpec(shape=(32, 32, 32), spacing=1.5, vessel_radius=8.0, arc_radius=60.0,
                       flt_present=True, flt_arc_fraction=0.35, seed=3)
    volume, label, _ = generate_phantom(spec, "phantom_t")
    return volume, label


def blocky_case(case_id: str, shape=(16, 16, 16), flt: bool = True) -> tuple[Volume, LabelMap]:
    """Axis-aligned TL / FL (/ FLT) slabs with matching intensities; easy to learn."""
    label = np.zeros(shape, dtype=np.uint8)
    label[4:12, 3:8, 2:14] = 1
    label[4:12, 8:13, 2:14] = 2
    if flt:
        label[4:12, 11:13, 2:14] = 3
    means = np.array([0.1, 0.9, 0.6, 0.35])
    noise = derive_rng(0, case_id).normal(0.0, 0.01, shape)
    image = np.clip(means[label] + noise, 0.0, 1.0).astype(np.float32)
    volume = Volume.from_array(image, spacing=(1.5, 1.5, 1.5), id=case_id)
    return volume, LabelMap.like(volume, label)


@pytest.fixture
def blocky_data() -> dict[str, tuple[Volume, LabelMap]]:
    return {f"b{i}": blocky_case(f"b{i}", flt=i % 2 == 0) for i in range(4)}


class FixedLogits(nn.Module):
    """Returns the same logits whatever the input; stands in for a trained segmenter."""

    def __init__(self, logits: np.ndarray):
        super().__init__()
        self.register_buffer("logits", torch.as_tensor(np.asarray(logits), dtype=torch.float64))
        self.calls = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return self.logits[None].expand(x.shape[0], *self.logits.shape)


class Recorder(nn.Module):
    """Zero logits over the input grid; keeps the last input it saw."""

    def __init__(self, out_classes: int = 4):
        super().__init__()
        self.out_classes = out_classes
        self.last_input: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.last_input = x.detach().clone()
        return torch.zeros((x.shape[0], self.out_classes, *x.shape[2:]), dtype=x.dtype)


class Exploding(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raise AssertionError("this model must not be called")


@pytest.fixture
def write_run_toml(tmp_path: Path):
    """Write a run file under tmp_path; body is TOML appended to the run header."""
    def write(body: str, run_id: str = "t", name: str = "run.toml") -> Path:
        header = f'run_id = "{run_id}"\noutput_dir = "{(tmp_path / "runs").as_posix()}"\nseed = 0\n'
        path = tmp_path / name
        path.write_text(header + textwrap.dedent(body))
        return path

    return write


@pytest.fixture
def cli_env(tmp_path: Path, monkeypatch):
    monkeypatch.setenv("TBAD_RUNS_DB", str(tmp_path / "ledger.db"))
    monkeypatch.setenv("TBAD_DETERMINISTIC", "0")
    monkeypatch.setenv("TBAD_LOG_LEVEL", "WARNING")
    monkeypatch.chdir(tmp_path)
    return tmp_path
