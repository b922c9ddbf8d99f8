from __future__ import annotations
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from augment import AugmentConfig, augment_arrays, pad_to_patch
from cohort import FoldSplit
from errors import ConfigError, ContractError, DivergedTrainingError
from imaging_io import LabelMap, Volume
from losses import flt_presence_loss, get_loss
from metrics import classifier_metrics, dice_coefficient
from networks import build_network, load_checkpoint, save_checkpoint
from pipelines import PipelineConfig, StageSpec, flt_probability, predict_probs, stage_inputs, stage_target
from utils import derive_rng

log = logging.getLogger("tbadseg.training")

HISTORY_FILE = "history.json"
BEST_FILE = "best.json"
# class id holding FLT in each stage target's label space
_FLT_CLASS = {"full": 3, "flt": 1}


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_step_epochs: int = 30
    weight_decay: float = 1e-5
    batch_size: int = 1
    epochs_primary: int = 50
    epochs_cascade: int = 20
    loss: str = "dcel"
    optimizer: str = "adamw"
    include_background: bool = True
    seed: int = 0
    num_workers: int = 0
    device: str = "cpu"
    progress: bool = True

    def __post_init__(self):
        if min(self.initial_lr, self.lr_decay_factor, self.lr_step_epochs, self.batch_size) <= 0:
            raise ConfigError("initial_lr, lr_decay_factor, lr_step_epochs and batch_size must be positive")
        if self.weight_decay < 0 or self.epochs_primary < 1 or self.epochs_cascade < 1:
            raise ConfigError("weight_decay must be >= 0 and epoch counts >= 1")
        if self.loss not in ("dcel", "gdl", "dice", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.num_workers < 0:
            raise ConfigError("num_workers must be >= 0")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return cfg.initial_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_step_epochs)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    seconds: float
    val_mean_dice: float | None = None
    val_true_flt_dice: float | None = None
    val_accuracy: float | None = None  # classifier stages


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ContractError(f"epoch {record.epoch} after epoch {self.records[-1].epoch}")
        self.records.append(record)

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows: Sequence[dict]) -> "TrainingHistory":
        h = cls()
        for r in rows:
            h.append(EpochRecord(**r))
        return h

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"records": self.to_list()}, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainingHistory":
        return cls.from_list(json.loads(Path(path).read_text())["records"])


def selection_score(record: EpochRecord) -> float | None:
    scores = [s for s in (record.val_mean_dice, record.val_true_flt_dice) if s is not None]
    if scores:
        return sum(scores) / len(scores)
    return record.val_accuracy


def select_best(history: TrainingHistory) -> int:
    """Epoch with the highest (mean DC + True-FLT DC) / 2; earliest wins ties.

    Without any validation score the lowest training loss decides.
    """
    if not history.records:
        raise ContractError("cannot select from an empty history")
    scored = [(selection_score(r), r) for r in history.records]
    if all(s is None for s, _ in scored):
        return min(history.records, key=lambda r: r.train_loss).epoch
    best_score, best = -math.inf, None
    for s, r in scored:
        if s is not None and s > best_score:
            best_score, best = s, r
    return best.epoch


class PatchDataset(Dataset):
    """Random augmented patches, one per case per epoch; draws depend only on (seed, case, epoch)."""

    def __init__(self, items: Sequence[tuple[str, np.ndarray, np.ndarray]], augment: AugmentConfig, seed: int = 0):
        self.items = list(items)
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int):
        case_id, inputs, target = self.items[i]
        rng = derive_rng(self.seed, case_id, self.epoch)
        inputs, target = pad_to_patch(inputs, target, self.augment.patch_size)
        x, y, _ = augment_arrays(inputs, target, self.augment, rng)
        return torch.from_numpy(x), torch.from_numpy(y.astype(np.int64))


class VolumeDataset(Dataset):
    """Whole volumes zero-padded to a common shape, with the FLT-presence flag as target."""

    def __init__(self, items: Sequence[tuple[str, np.ndarray, bool]], augment: AugmentConfig, seed: int = 0):
        self.items = list(items)
        self.shape = tuple(max(x.shape[i + 1] for _, x, _ in self.items) for i in range(3))
        self.augment = replace(augment, patch_size=self.shape, bias_foreground=False)
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int):
        case_id, inputs, has_flt = self.items[i]
        rng = derive_rng(self.seed, case_id, self.epoch)
        blank = np.zeros(inputs.shape[1:], dtype=np.uint8)
        x, y = pad_to_patch(inputs, blank, self.shape)
        x, _, _ = augment_arrays(x, y, self.augment, rng)
        return torch.from_numpy(x), torch.tensor(float(has_flt))


@dataclass
class StageResult:
    stage: str
    checkpoints: list[Path]
    history: TrainingHistory
    best_epoch: int
    model: nn.Module


def materialize_inputs(spec: StageSpec, pipeline: PipelineConfig, data: Mapping[str, tuple[Volume, LabelMap]],
                       ids: Sequence[str], upstream: Mapping[str, nn.Module]) -> dict[str, np.ndarray]:
    """Network inputs per case; cascade stages see frozen upstream predictions."""
    missing = [n for n in spec.inputs if n not in upstream and n not in spec.oracle_inputs]
    if missing:
        raise ContractError(f"stage {spec.name}: upstream stage(s) {missing} not trained")
    for m in upstream.values():
        m.eval()
    return {cid: stage_inputs(spec, pipeline, data[cid][0], upstream, data[cid][1].data) for cid in ids}


def _stage_dir_epochs(stage_dir: Path) -> list[int]:
    return sorted(int(p.stem) for p in stage_dir.glob("*.ckpt") if p.stem.isdigit())


def clear_stage_dir(stage_dir: Path) -> int:
    """Remove checkpoints and pointers of an earlier run so a fresh run never inherits them."""
    stale = [stage_dir / f"{e}.ckpt" for e in _stage_dir_epochs(stage_dir)]
    stale += [p for p in (stage_dir / HISTORY_FILE, stage_dir / BEST_FILE) if p.is_file()]
    for p in stale:
        p.unlink()
    if stale:
        log.info("%s: removed %d file(s) of an earlier run", stage_dir, len(stale))
    return len(stale)


def resumable_epochs(stage_dir: Path) -> list[int]:
    """Checkpointed epochs, which must be 0..n-1 and agree with history.json."""
    done = _stage_dir_epochs(stage_dir)
    if not done:
        return done
    if done != list(range(len(done))):
        raise ContractError(f"{stage_dir}: checkpoints {done} are not a contiguous run from epoch 0")
    history_path = stage_dir / HISTORY_FILE
    if not history_path.is_file():
        raise ContractError(f"{stage_dir}: checkpoints without {HISTORY_FILE}")
    recorded = [r.epoch for r in TrainingHistory.load(history_path).records]
    if recorded != done:
        raise ContractError(f"{stage_dir}: {HISTORY_FILE} covers epochs {recorded}, checkpoints cover {done}")
    return done


def validate_segmenter(model: nn.Module, inputs: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray],
                       target: str, patch_size=None, overlap: float = 0.5) -> tuple[float | None, float | None]:
    """(mean DC over foreground classes, True-FLT DC) on whole volumes."""
    if not inputs:
        return None, None
    k = getattr(model, "out_classes", None)
    per_class: dict[int, list[float]] = {}
    flt_scores: list[float] = []
    flt_class = _FLT_CLASS.get(target)
    for cid, x in inputs.items():
        probs = predict_probs(x, model, patch_size, overlap)
        pred = np.argmax(probs, axis=0)
        gt = stage_target(labels[cid], target)
        for c in range(1, k or probs.shape[0]):
            per_class.setdefault(c, []).append(dice_coefficient(pred, gt, c))
        if flt_class is not None and (gt == flt_class).any():
            flt_scores.append(dice_coefficient(pred, gt, flt_class))
    mean_dc = float(np.mean([np.mean(v) for v in per_class.values()]))
    return mean_dc, (float(np.mean(flt_scores)) if flt_scores else None)


def validate_classifier(model: nn.Module, inputs: Mapping[str, np.ndarray],
                        labels: Mapping[str, bool], threshold: float = 0.5) -> float | None:
    if not inputs:
        return None
    flags = [flt_probability(x, model) >= threshold for x in inputs.values()]
    return classifier_metrics(flags, [labels[c] for c in inputs]).accuracy


def _optimizer(model: nn.Module, cfg: TrainConfig):
    cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
    opt = cls(model.parameters(), lr=cfg.initial_lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step_epochs, gamma=cfg.lr_decay_factor)
    return opt, sched


def train_stage(spec: StageSpec, fold: FoldSplit, cfg: TrainConfig, *, pipeline: PipelineConfig,
                data: Mapping[str, tuple[Volume, LabelMap]], augment: AugmentConfig, stage_dir: str | Path,
                upstream: Mapping[str, nn.Module] | None = None, epochs: int | None = None,
                resume: bool = False) -> StageResult:
    stage_dir = Path(stage_dir)
    stage_dir.mkdir(parents=True, exist_ok=True)
    upstream = upstream or {}
    device = torch.device(cfg.device)
    n_epochs = epochs or (cfg.epochs_cascade if spec.cascade else cfg.epochs_primary)

    train_in = materialize_inputs(spec, pipeline, data, fold.train, upstream)
    val_in = materialize_inputs(spec, pipeline, data, fold.validation, upstream)
    if not train_in:
        raise ContractError(f"fold {fold.fold_index} has no training cases")

    if spec.is_classifier:
        flags = {cid: bool((data[cid][1].data == 3).any()) for cid in (*fold.train, *fold.validation)}
        dataset: PatchDataset | VolumeDataset = VolumeDataset(
            [(cid, train_in[cid], flags[cid]) for cid in fold.train], augment, cfg.seed)
        loss_fn = flt_presence_loss
    else:
        targets = {cid: stage_target(data[cid][1].data, spec.target) for cid in (*fold.train, *fold.validation)}
        dataset = PatchDataset([(cid, train_in[cid], targets[cid]) for cid in fold.train], augment, cfg.seed)
        loss_fn = get_loss(spec.loss or cfg.loss, include_background=cfg.include_background)

    model = build_network(spec.network).to(device)
    opt, sched = _optimizer(model, cfg)
    history = TrainingHistory()
    checkpoints: list[Path] = []
    start = 0
    last_good: Path | None = None

    if not resume:
        clear_stage_dir(stage_dir)
    done = resumable_epochs(stage_dir) if resume else []
    if done:
        last_good = stage_dir / f"{done[-1]}.ckpt"
        payload = load_checkpoint(last_good, device)
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        sched.load_state_dict(payload["scheduler"])
        history = TrainingHistory.from_list(payload["history"])
        checkpoints = [stage_dir / f"{e}.ckpt" for e in done]
        start = payload["epoch"] + 1
        log.info("%s: resuming after epoch %d", spec.name, payload["epoch"])

    for epoch in range(start, n_epochs):
        t0 = time.perf_counter()
        torch.manual_seed(cfg.seed + epoch)
        dataset.set_epoch(epoch)
        loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, num_workers=cfg.num_workers,
                            generator=torch.Generator().manual_seed(cfg.seed + epoch))
        lr = opt.param_groups[0]["lr"]
        model.train()
        losses = []
        for x, y in tqdm(loader, desc=f"{spec.name} epoch {epoch}", leave=False, disable=not cfg.progress):
            x, y = x.to(device), y.to(device)
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model(x), y)
            if not torch.isfinite(loss):
                raise DivergedTrainingError(
                    f"{spec.name}: non-finite loss at epoch {epoch}",
                    str(last_good) if last_good is not None else None,
                )
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
        sched.step()

        if spec.is_classifier:
            acc = validate_classifier(model, val_in, flags)
            val_dc, val_flt = None, None
        else:
            acc = None
            val_dc, val_flt = validate_segmenter(model, val_in, targets, spec.target, pipeline.patch_size, pipeline.overlap)
        record = EpochRecord(
            epoch=epoch, train_loss=float(np.mean(losses)), lr=float(lr), seconds=time.perf_counter() - t0,
            val_mean_dice=val_dc, val_true_flt_dice=val_flt, val_accuracy=acc,
        )
        history.append(record)
        last_good = save_checkpoint(stage_dir / f"{epoch}.ckpt", model, epoch=epoch, optimizer=opt,
                                    scheduler=sched, history=history.to_list())
        checkpoints.append(last_good)
        history.save(stage_dir / HISTORY_FILE)
        write_best(stage_dir, history)
        log.info("%s epoch %d: loss %.4f val DC %s True-FLT DC %s acc %s lr %.1e (%.1fs)",
                 spec.name, epoch, record.train_loss, _fmt(val_dc), _fmt(val_flt), _fmt(acc), lr, record.seconds)

    best = select_best(history)
    payload = load_checkpoint(stage_dir / f"{best}.ckpt", device)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return StageResult(stage=spec.name, checkpoints=checkpoints, history=history, best_epoch=best, model=model)


def _fmt(x: float | None) -> str:
    return "-" if x is None else f"{x:.4f}"


def write_best(stage_dir: Path, history: TrainingHistory) -> Path:
    best = select_best(history)
    record = next(r for r in history.records if r.epoch == best)
    path = Path(stage_dir) / BEST_FILE
    path.write_text(json.dumps({"epoch": best, "checkpoint": f"{best}.ckpt", "score": selection_score(record)},
                               indent=2, sort_keys=True) + "\n")
    return path


def best_checkpoint(stage_dir: str | Path) -> Path:
    stage_dir = Path(stage_dir)
    pointer = stage_dir / BEST_FILE
    if not pointer.is_file():
        raise FileNotFoundError(f"{stage_dir}: no trained checkpoint (missing {BEST_FILE})")
    return stage_dir / json.loads(pointer.read_text())["checkpoint"]


def train_pipeline(pipeline: PipelineConfig, fold: FoldSplit, cfg: TrainConfig, *,
                   data: Mapping[str, tuple[Volume, LabelMap]], augment: AugmentConfig,
                   stage_dir_for, resume: bool = False, epochs: int | None = None) -> dict[str, StageResult]:
    """Train every stage, upstream first; stage_dir_for maps a stage name to its directory."""
    results: dict[str, StageResult] = {}
    for spec in pipeline.training_order():
        upstream = {n: results[n].model for n in spec.inputs if n in results}
        results[spec.name] = train_stage(
            spec, fold, cfg, pipeline=pipeline, data=data, augment=augment,
            stage_dir=stage_dir_for(spec.name), upstream=upstream, epochs=epochs, resume=resume,
        )
    return results
