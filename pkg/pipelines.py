"""Compose segmenters into single-step, sequential, multitask and ensemble pipelines.

Channel layouts fed to cascaded stages:
  sequential refine: [image, stage-1 aorta probability]
  multitask fusion ("foreground"): [image, FLT probability, TL+FL foreground probability]
  multitask fusion ("full"):       [image, FLT probability, bg/TL/FL probabilities]
"""
from __future__ import annotations
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from errors import ConfigError, ContractError
from imaging_io import LabelMap, Volume
from networks import ClassifierConfig, SegmenterConfig
from utils import as_triple

log = logging.getLogger("tbadseg.pipelines")

PIPELINE_KINDS = ("single_step", "sequential", "multitask", "ensemble")
STAGE_TARGETS = ("full", "aorta", "flt", "tlfl", "presence")
FUSION_MODES = {"foreground": 3, "full": 5}
NUM_CLASSES = 4
PROB_TOLERANCE = 1e-5


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    probs: np.ndarray  # (K, x, y, z), float64
    volume: Volume

    def __post_init__(self):
        if self.probs.ndim != 4 or self.probs.shape[1:] != self.volume.shape:
            raise ContractError(f"probabilities {self.probs.shape} do not cover grid {self.volume.shape}")
        if not np.allclose(self.probs.sum(axis=0), 1.0, atol=PROB_TOLERANCE):
            raise ContractError("class probabilities do not sum to 1")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> LabelMap:
        # np.argmax returns the first maximum, so ties go to the lower class index
        return LabelMap.like(self.volume, np.argmax(self.probs, axis=0).astype(np.uint8))

    def foreground(self) -> np.ndarray:
        return 1.0 - self.probs[0]


def derive_aorta_label(label: LabelMap) -> LabelMap:
    return LabelMap.like(label, stage_target(label.data, "aorta"))


def stage_target(label: np.ndarray, target: str) -> np.ndarray:
    """Voxel targets for one stage; tlfl folds FLT into FL."""
    label = np.asarray(label)
    if target == "full":
        return label.astype(np.uint8)
    if target == "aorta":
        return (label > 0).astype(np.uint8)
    if target == "flt":
        return (label == 3).astype(np.uint8)
    if target == "tlfl":
        return np.where(label == 3, 2, label).astype(np.uint8)
    raise ContractError(f"stage target {target!r} has no voxel labels")


def _model_device(model: nn.Module) -> torch.device:
    p = next(model.parameters(), None)
    return p.device if p is not None else torch.device("cpu")


@torch.no_grad()
def _softmax(model: nn.Module, array: np.ndarray) -> np.ndarray:
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))[None].to(_model_device(model))
    logits = model(x)[0]
    return torch.softmax(logits.double(), dim=0).cpu().numpy()


@torch.no_grad()
def flt_probability(image: Volume | np.ndarray, classifier: nn.Module) -> float:
    array = image.data[None] if isinstance(image, Volume) else np.asarray(image)
    classifier.eval()
    x = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))[None].to(_model_device(classifier))
    return float(torch.sigmoid(classifier(x).reshape(-1)[0].double()))


def _window_starts(n: int, p: int, step: int) -> list[int]:
    starts = list(range(0, n - p + 1, step))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def predict_probs(array: np.ndarray, segmenter: nn.Module, patch_size=None, overlap: float = 0.5) -> np.ndarray:
    """Softmax over a whole (C, x, y, z) array, by overlapping windows when patch_size is set."""
    if not 0.0 <= overlap < 1.0:
        raise ContractError(f"overlap must lie in [0, 1), got {overlap}")
    in_ch = getattr(segmenter, "in_channels", array.shape[0])
    if array.shape[0] != in_ch:
        raise ContractError(f"segmenter expects {in_ch} input channels, got {array.shape[0]}")
    shape = array.shape[1:]
    if patch_size is None:
        divisor = getattr(segmenter, "required_divisor", 1)
        padded = tuple(-(-n // divisor) * divisor for n in shape)
        pad = [(0, 0)] + [(0, q - n) for n, q in zip(shape, padded)]
        probs = _softmax(segmenter, np.pad(array, pad) if any(b for _, b in pad) else array)
        return probs[(slice(None), *(slice(0, n) for n in shape))]

    patch = tuple(int(p) for p in as_triple(patch_size, "patch_size"))
    padded = tuple(max(n, p) for n, p in zip(shape, patch))
    if padded != shape:
        array = np.pad(array, [(0, 0)] + [(0, q - n) for n, q in zip(shape, padded)])
    steps = [max(1, int(p * (1.0 - overlap))) for p in patch]
    starts = [_window_starts(n, p, s) for n, p, s in zip(padded, patch, steps)]
    total = None
    count = np.zeros(padded, dtype=np.float64)
    for a in starts[0]:
        for b in starts[1]:
            for c in starts[2]:
                sl = (slice(a, a + patch[0]), slice(b, b + patch[1]), slice(c, c + patch[2]))
                probs = _softmax(segmenter, array[(slice(None), *sl)])
                if total is None:
                    total = np.zeros((probs.shape[0], *padded), dtype=np.float64)
                total[(slice(None), *sl)] += probs
                count[sl] += 1.0
    out = total / count[None]
    return out[(slice(None), *(slice(0, n) for n in shape))]


def sliding_window_inference(image: Volume, segmenter: nn.Module, patch_size, overlap: float = 0.5,
                             channels: np.ndarray | None = None) -> ProbabilityMap:
    """channels, when given, is the full (C, x, y, z) network input on image's grid."""
    array = image.data[None] if channels is None else channels
    return ProbabilityMap(predict_probs(array, segmenter, patch_size, overlap), image)


def _expect(model: nn.Module, attr: str, value: int, role: str):
    got = getattr(model, attr, None)
    if got is not None and got != value:
        raise ContractError(f"{role}: expected {attr}={value}, got {got}")


def run_single_step(image: Volume, segmenter: nn.Module, *, patch_size=None,
                    overlap: float = 0.5) -> tuple[LabelMap, ProbabilityMap]:
    pm = sliding_window_inference(image, segmenter, patch_size, overlap)
    return pm.argmax(), pm


def sequential_inputs(image: Volume, aorta_probability: np.ndarray) -> np.ndarray:
    return np.stack([image.data, aorta_probability]).astype(np.float32)


def run_sequential(image: Volume, aorta_segmenter: nn.Module, refine_segmenter: nn.Module, *,
                   patch_size=None, overlap: float = 0.5,
                   aorta_channel: np.ndarray | None = None) -> tuple[LabelMap, ProbabilityMap]:
    _expect(aorta_segmenter, "out_classes", 2, "aorta stage")
    _expect(refine_segmenter, "in_channels", 2, "refine stage")
    if aorta_channel is None:
        aorta_channel = sliding_window_inference(image, aorta_segmenter, patch_size, overlap).probs[1]
    elif aorta_channel.shape != image.shape:
        raise ContractError(f"aorta channel {aorta_channel.shape} is not on grid {image.shape}")
    pm = sliding_window_inference(image, refine_segmenter, patch_size, overlap,
                                  channels=sequential_inputs(image, aorta_channel))
    return pm.argmax(), pm


def fusion_inputs(image: Volume, flt_prob: np.ndarray, tlfl_probs: np.ndarray, mode: str = "foreground") -> np.ndarray:
    if mode == "foreground":
        return np.stack([image.data, flt_prob, 1.0 - tlfl_probs[0]]).astype(np.float32)
    if mode == "full":
        return np.concatenate([image.data[None], flt_prob[None], tlfl_probs]).astype(np.float32)
    raise ContractError(f"unknown fusion channel mode {mode!r}")


@dataclass(frozen=True)
class MultitaskOptions:
    bypass_classifier: bool = True
    flt_probability_threshold: float = 0.5
    fusion_channels: str = "foreground"


def run_multitask(image: Volume, classifier: nn.Module | None, flt_segmenter: nn.Module, tlfl_segmenter: nn.Module,
                  fusion_segmenter: nn.Module, cfg: MultitaskOptions | "PipelineConfig" = MultitaskOptions(), *,
                  patch_size=None, overlap: float = 0.5, flt_channel: np.ndarray | None = None,
                  tlfl_channel: np.ndarray | None = None,
                  presence: float | None = None) -> tuple[LabelMap, ProbabilityMap]:
    """Classifier-gated FLT branch plus TL/FL branch, fused by a final segmenter.

    presence, when given, is a precomputed classifier probability; flt_channel
    and tlfl_channel replace the branch outputs (oracle experiments).
    """
    mode = cfg.fusion_channels
    if mode not in FUSION_MODES:
        raise ContractError(f"unknown fusion channel mode {mode!r}")
    _expect(flt_segmenter, "out_classes", 2, "FLT stage")
    _expect(tlfl_segmenter, "out_classes", 3, "TL/FL stage")
    _expect(fusion_segmenter, "in_channels", FUSION_MODES[mode], "fusion stage")
    _expect(fusion_segmenter, "out_classes", NUM_CLASSES, "fusion stage")

    gated = False
    if not cfg.bypass_classifier:
        if presence is None:
            if classifier is None:
                raise ContractError("classifier required when bypass_classifier is false")
            presence = flt_probability(image, classifier)
        gated = presence < cfg.flt_probability_threshold

    if gated:
        flt_prob = np.zeros(image.shape, dtype=np.float64)
    elif flt_channel is not None:
        if flt_channel.shape != image.shape:
            raise ContractError(f"FLT channel {flt_channel.shape} is not on grid {image.shape}")
        flt_prob = np.asarray(flt_channel, dtype=np.float64)
    else:
        flt_prob = sliding_window_inference(image, flt_segmenter, patch_size, overlap).probs[1]
    if tlfl_channel is not None:
        if tlfl_channel.shape != (3, *image.shape):
            raise ContractError(f"TL/FL channels {tlfl_channel.shape} are not on grid {image.shape}")
        tlfl = np.asarray(tlfl_channel, dtype=np.float64)
    else:
        tlfl = sliding_window_inference(image, tlfl_segmenter, patch_size, overlap).probs
    pm = sliding_window_inference(image, fusion_segmenter, patch_size, overlap,
                                  channels=fusion_inputs(image, flt_prob, tlfl, mode))
    return pm.argmax(), pm


def run_ensemble(image: Volume, members: Sequence[nn.Module], *, patch_size=None,
                 overlap: float = 0.5) -> tuple[LabelMap, ProbabilityMap]:
    if len(members) < 1:
        raise ContractError("ensemble needs at least one member")
    maps = [predict_probs(image.data[None], m, patch_size, overlap) for m in members]
    classes = {p.shape[0] for p in maps}
    if len(classes) != 1:
        raise ContractError(f"ensemble members disagree on class count: {sorted(classes)}")
    pm = ProbabilityMap(np.mean(np.stack(maps), axis=0), image)
    return pm.argmax(), pm


@dataclass(frozen=True)
class StageSpec:
    name: str
    network: SegmenterConfig | ClassifierConfig
    target: str = "full"
    inputs: tuple[str, ...] = ()
    cascade: bool = False
    loss: str | None = None  # overrides the train loss for this stage
    oracle_inputs: tuple[str, ...] = ()  # upstream stages replaced by ground truth
    checkpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "oracle_inputs", tuple(self.oracle_inputs))
        if not set(self.oracle_inputs) <= set(self.inputs):
            raise ConfigError(f"stage {self.name}: oracle inputs {self.oracle_inputs} are not among its inputs")
        if self.loss is not None and self.loss not in ("dcel", "gdl", "dice", "ce"):
            raise ConfigError(f"stage {self.name}: unknown loss {self.loss!r}")
        if self.target not in STAGE_TARGETS:
            raise ConfigError(f"stage {self.name}: unknown target {self.target!r}")
        if (self.target == "presence") != isinstance(self.network, ClassifierConfig):
            raise ConfigError(f"stage {self.name}: classifier networks pair with the presence target only")

    @property
    def is_classifier(self) -> bool:
        return self.target == "presence"


# (target, in_channels, out_classes, inputs, cascade) per required stage
_LAYOUT = {
    "single_step": {"segmenter": ("full", 1, 4, (), False)},
    "sequential": {"aorta": ("aorta", 1, 2, (), False), "refine": ("full", 2, 4, ("aorta",), True)},
    "multitask": {"flt": ("flt", 1, 2, (), False), "tlfl": ("tlfl", 1, 3, (), False),
                  "fusion": ("full", None, 4, ("flt", "tlfl"), True)},
}


@dataclass(frozen=True)
class PipelineConfig:
    kind: str
    stages: Mapping[str, StageSpec] = field(default_factory=dict)
    bypass_classifier: bool = True
    flt_probability_threshold: float = 0.5
    fusion_channels: str = "foreground"
    patch_size: tuple[int, int, int] | None = None
    overlap: float = 0.5

    def __post_init__(self):
        if self.kind not in PIPELINE_KINDS:
            raise ConfigError(f"unknown pipeline kind {self.kind!r}")
        if self.fusion_channels not in FUSION_MODES:
            raise ConfigError(f"fusion_channels must be one of {sorted(FUSION_MODES)}")
        if not 0.0 <= self.flt_probability_threshold <= 1.0:
            raise ConfigError("flt_probability_threshold must lie in [0, 1]")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must lie in [0, 1)")
        if self.patch_size is not None:
            object.__setattr__(self, "patch_size", tuple(int(p) for p in as_triple(self.patch_size, "patch_size")))
        for name, spec in self.stages.items():
            if name != spec.name:
                raise ConfigError(f"stage key {name!r} does not match its name {spec.name!r}")
        self._check_stages()

    def _check_stages(self):
        names = set(self.stages)
        if self.kind == "ensemble":
            if len(names) < 2:
                raise ConfigError("ensemble pipelines need at least 2 members")
            for spec in self.stages.values():
                self._check_net(spec, "full", 1, NUM_CLASSES)
            return
        layout = _LAYOUT[self.kind]
        allowed = set(layout) | ({"classifier"} if self.kind == "multitask" else set())
        missing = set(layout) - names
        if missing or names - allowed:
            raise ConfigError(f"{self.kind} pipeline needs stages {sorted(layout)}, got {sorted(names)}")
        for name, (target, in_ch, out, inputs, cascade) in layout.items():
            spec = self.stages[name]
            if in_ch is None:
                in_ch = FUSION_MODES[self.fusion_channels]
            self._check_net(spec, target, in_ch, out)
            if tuple(spec.inputs) != inputs or spec.cascade != cascade:
                raise ConfigError(f"stage {name}: expected inputs {inputs} and cascade={cascade}")
        if "classifier" in names and not self.stages["classifier"].is_classifier:
            raise ConfigError("classifier stage must use a classifier network")
        if not self.bypass_classifier and "classifier" not in names:
            raise ConfigError("bypass_classifier is false but no classifier stage is configured")

    @staticmethod
    def _check_net(spec: StageSpec, target: str, in_ch: int, out: int):
        net = spec.network
        if spec.target != target or not isinstance(net, SegmenterConfig):
            raise ConfigError(f"stage {spec.name}: expected a segmenter with target {target!r}")
        if net.in_channels != in_ch or net.out_classes != out:
            raise ConfigError(f"stage {spec.name}: expected {in_ch} input channels and {out} classes, "
                              f"got {net.in_channels} and {net.out_classes}")

    @property
    def multitask_options(self) -> MultitaskOptions:
        return MultitaskOptions(self.bypass_classifier, self.flt_probability_threshold, self.fusion_channels)

    def training_order(self) -> list[StageSpec]:
        """Stages with upstream stages first."""
        done: list[str] = []
        pending = dict(self.stages)
        while pending:
            ready = sorted(n for n, s in pending.items() if all(i in done for i in s.inputs))
            if not ready:
                raise ConfigError(f"stage inputs form a cycle: {sorted(pending)}")
            for n in ready:
                done.append(n)
                del pending[n]
        return [self.stages[n] for n in done]

    @classmethod
    def standard(cls, kind: str, segmenter: SegmenterConfig, *, classifier: ClassifierConfig | None = None,
                 members: Sequence[SegmenterConfig] = (), **options) -> "PipelineConfig":
        """Stage set for a kind, every segmenter derived from one base config."""
        def seg(name, target, in_ch, out, inputs=(), cascade=False, base=segmenter, seed_offset=0):
            net = replace(base, in_channels=in_ch, out_classes=out, seed=base.seed + seed_offset)
            return StageSpec(name=name, network=net, target=target, inputs=tuple(inputs), cascade=cascade)

        fusion = options.get("fusion_channels", "foreground")
        if kind == "ensemble":
            bases = list(members) or [segmenter, replace(segmenter, architecture="swin_unetr")]
            stages = [seg(f"{b.architecture}_{i}", "full", 1, NUM_CLASSES, base=b) for i, b in enumerate(bases)]
        elif kind == "multitask":
            stages = [seg("flt", "flt", 1, 2), seg("tlfl", "tlfl", 1, 3, seed_offset=1),
                      seg("fusion", "full", FUSION_MODES[fusion], NUM_CLASSES, ("flt", "tlfl"), True, seed_offset=2)]
            if classifier is not None:
                stages.append(StageSpec(name="classifier", network=classifier, target="presence"))
        elif kind == "sequential":
            stages = [seg("aorta", "aorta", 1, 2), seg("refine", "full", 2, NUM_CLASSES, ("aorta",), True, seed_offset=1)]
        elif kind == "single_step":
            stages = [seg("segmenter", "full", 1, NUM_CLASSES)]
        else:
            raise ConfigError(f"unknown pipeline kind {kind!r}")
        return cls(kind=kind, stages={s.name: s for s in stages}, **options)


def oracle_channel(stage: str, label: np.ndarray) -> np.ndarray:
    """Ground-truth stand-in for an upstream stage output."""
    label = np.asarray(label)
    if stage in ("aorta", "flt"):
        return stage_target(label, stage).astype(np.float64)
    if stage == "tlfl":
        return np.eye(3)[stage_target(label, "tlfl")].transpose(3, 0, 1, 2)
    raise ContractError(f"no oracle channel for stage {stage!r}")


def stage_inputs(spec: StageSpec, cfg: PipelineConfig, image: Volume, models: Mapping[str, nn.Module],
                 label: np.ndarray | None = None) -> np.ndarray:
    """Network input for one stage; cascade stages read frozen upstream outputs."""
    if not spec.cascade:
        return image.data[None].astype(np.float32)

    def upstream(name: str) -> np.ndarray:
        if name in spec.oracle_inputs:
            if label is None:
                raise ContractError(f"stage {spec.name} uses oracle inputs but no label was given")
            return oracle_channel(name, label)
        probs = sliding_window_inference(image, models[name], cfg.patch_size, cfg.overlap).probs
        return probs if name == "tlfl" else probs[1]

    if cfg.kind == "sequential":
        return sequential_inputs(image, upstream("aorta"))
    return fusion_inputs(image, upstream("flt"), upstream("tlfl"), cfg.fusion_channels)


@dataclass
class PipelinePrediction:
    label: LabelMap
    probs: ProbabilityMap
    seconds: float
    flt_probability: float | None = None


class SegmentationPipeline:
    def __init__(self, cfg: PipelineConfig, models: Mapping[str, nn.Module]):
        missing = set(cfg.stages) - set(models)
        if cfg.kind == "multitask" and cfg.bypass_classifier:
            missing.discard("classifier")
        if missing:
            raise ContractError(f"no trained model for stage(s) {sorted(missing)}")
        self.cfg = cfg
        self.models = dict(models)

    def oracle_channels(self, label: LabelMap | np.ndarray | None) -> dict[str, np.ndarray]:
        names = {n for s in self.cfg.stages.values() for n in s.oracle_inputs}
        if names and label is None:
            raise ContractError(f"stages {sorted(names)} are replaced by ground truth but no label was given")
        data = label.data if isinstance(label, LabelMap) else label
        return {n: oracle_channel(n, data) for n in names}

    def predict(self, image: Volume, truth: LabelMap | np.ndarray | None = None) -> PipelinePrediction:
        """truth is read only by stages configured with oracle inputs."""
        oracle = self.oracle_channels(truth)
        cfg, m = self.cfg, self.models
        kw = {"patch_size": cfg.patch_size, "overlap": cfg.overlap}
        presence = None
        start = time.perf_counter()
        if cfg.kind == "single_step":
            label, pm = run_single_step(image, m["segmenter"], **kw)
        elif cfg.kind == "sequential":
            label, pm = run_sequential(image, m["aorta"], m["refine"], aorta_channel=oracle.get("aorta"), **kw)
        elif cfg.kind == "multitask":
            classifier = m.get("classifier")
            if not cfg.bypass_classifier:
                presence = flt_probability(image, classifier)
            label, pm = run_multitask(image, classifier, m["flt"], m["tlfl"], m["fusion"], cfg.multitask_options,
                                      flt_channel=oracle.get("flt"), tlfl_channel=oracle.get("tlfl"),
                                      presence=presence, **kw)
        else:
            label, pm = run_ensemble(image, [m[n] for n in cfg.stages], **kw)
        seconds = time.perf_counter() - start
        log.debug("%s: %s pipeline in %.2fs", image.id, cfg.kind, seconds)
        return PipelinePrediction(label=label, probs=pm, seconds=seconds, flt_probability=presence)
