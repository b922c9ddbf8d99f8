"""Tri-planar label overlays and training-history curves."""
from __future__ import annotations
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from errors import ContractError  # noqa: E402
from imaging_io import LabelMap, Volume  # noqa: E402
from training import TrainingHistory  # noqa: E402

# TL green, FL yellow, FLT red
CLASS_COLORS = {1: (0.0, 0.8, 0.0), 2: (1.0, 0.9, 0.0), 3: (0.9, 0.0, 0.0)}
VIEWS = ("axial", "coronal", "sagittal")
_CMAP = ListedColormap([(0, 0, 0, 0)] + [(*CLASS_COLORS[k], 1.0) for k in (1, 2, 3)])


def mid_slices(data: np.ndarray) -> list[np.ndarray]:
    """Axial, coronal and sagittal mid-planes, oriented for display."""
    x, y, z = (n // 2 for n in data.shape)
    return [np.rot90(data[:, :, z]), np.rot90(data[:, y, :]), np.rot90(data[x, :, :])]


def build_overlay_figure(image: Volume, labels: Sequence[LabelMap], names: Sequence[str] | None = None,
                         alpha: float = 0.45):
    if not labels:
        raise ContractError("need at least one label map to overlay")
    names = list(names) if names is not None else [f"labels {i}" for i in range(len(labels))]
    if len(names) != len(labels):
        raise ContractError(f"{len(names)} names for {len(labels)} label maps")
    for lab in labels:
        lab.check_aligned(image)

    fig, axes = plt.subplots(len(labels), 3, figsize=(9, 3 * len(labels)), squeeze=False)
    planes = mid_slices(image.data)
    for row, (lab, name) in enumerate(zip(labels, names)):
        for col, (plane, mask) in enumerate(zip(planes, mid_slices(lab.data))):
            ax = axes[row, col]
            ax.imshow(plane, cmap="gray", vmin=0.0, vmax=1.0)
            ax.imshow(np.ma.masked_equal(mask, 0), cmap=_CMAP, vmin=0, vmax=3, alpha=alpha, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(VIEWS[col])
            if col == 0:
                ax.set_ylabel(name)
    fig.legend(handles=[Patch(color=CLASS_COLORS[k], label=n) for k, n in ((1, "TL"), (2, "FL"), (3, "FLT"))],
               loc="lower center", ncol=3, frameon=False)
    fig.tight_layout(rect=(0, 0.05, 1, 1))
    return fig


def render_overlay(image: Volume, labels: Sequence[LabelMap], out_path: str | Path,
                   names: Sequence[str] | None = None) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig = build_overlay_figure(image, labels, names)
    try:
        fig.savefig(out_path, dpi=100)
    finally:
        plt.close(fig)
    return out_path


def build_history_figure(histories: Sequence[tuple[str, TrainingHistory]]):
    if not histories:
        raise ContractError("need at least one history to plot")
    fig, (ax_loss, ax_dc) = plt.subplots(1, 2, figsize=(10, 4))
    for name, h in histories:
        epochs = [r.epoch for r in h.records]
        ax_loss.plot(epochs, [r.train_loss for r in h.records], label=name)
        dc = [r.val_mean_dice if r.val_mean_dice is not None else np.nan for r in h.records]
        ax_dc.plot(epochs, dc, label=name)
    ax_loss.set_title("training loss")
    ax_dc.set_title("validation DC")
    for ax in (ax_loss, ax_dc):
        ax.set_xlabel("epoch")
        ax.set_ylabel("value")
        ax.legend()
    fig.tight_layout()
    return fig


def plot_history(histories: Sequence[tuple[str, TrainingHistory]], out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig = build_history_figure(histories)
    try:
        fig.savefig(out_path, dpi=100)
    finally:
        plt.close(fig)
    return out_path
