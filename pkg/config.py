from __future__ import annotations
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from augment import AugmentConfig
from errors import ConfigError
from networks import ClassifierConfig, SegmenterConfig
from pipelines import PipelineConfig
from preprocess import PreprocessConfig
from training import TrainConfig
from utils import RunPaths

RUN_FILE = "run.toml"


def _get_int(name: str, default: int) -> int:
    v = os.getenv(name, "").strip()
    return int(v) if v else default


def _get_str(name: str, default: str) -> str:
    return os.getenv(name, "").strip() or default


def _get_bool(name: str, default: bool) -> bool:
    v = os.getenv(name, "").strip().lower()
    return v in ("1", "true", "yes", "on") if v else default


@dataclass(frozen=True)
class Config:
    log_level: str
    device: str
    num_workers: int
    runs_db: str
    deterministic: bool


def load_config() -> Config:
    level = _get_str("TBAD_LOG_LEVEL", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"TBAD_LOG_LEVEL={level!r} is not a logging level")
    return Config(
        log_level=level,
        device=_get_str("TBAD_DEVICE", "cpu"),
        num_workers=_get_int("TBAD_NUM_WORKERS", 0),
        runs_db=_get_str("TBAD_RUNS_DB", "runs/ledger.db"),
        deterministic=_get_bool("TBAD_DETERMINISTIC", True),
    )


@dataclass(frozen=True)
class PhantomCohortConfig:
    n: int = 30
    flt_fraction: float = 0.68
    seed: int = 0
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.n < 1 or not 0.0 <= self.flt_fraction <= 1.0:
            raise ConfigError("phantom cohort needs n >= 1 and flt_fraction in [0, 1]")


@dataclass(frozen=True)
class DataConfig:
    dir: str | None = None
    phantom: PhantomCohortConfig | None = None
    label_remap: dict[int, int] | None = None

    def __post_init__(self):
        if (self.dir is None) == (self.phantom is None):
            raise ConfigError("[data] needs exactly one source: dir or [data.phantom]")


@dataclass(frozen=True)
class CohortConfig:
    mode: str = "holdout"
    k: int = 5
    n_train: int | None = None
    n_val: int | None = None
    n_test: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("holdout", "kfold"):
            raise ConfigError(f"cohort mode must be 'holdout' or 'kfold', got {self.mode!r}")
        if self.mode == "kfold" and self.k < 2:
            raise ConfigError("kfold needs k >= 2")

    def holdout_counts(self, n: int) -> tuple[int, int, int]:
        """Explicit counts, else 80/10/10 with the remainder going to training."""
        if None not in (self.n_train, self.n_val, self.n_test):
            return self.n_train, self.n_val, self.n_test
        n_val = self.n_val if self.n_val is not None else max(1, round(n * 0.1))
        n_test = self.n_test if self.n_test is not None else max(1, round(n * 0.1))
        return n - n_val - n_test, n_val, n_test


@dataclass(frozen=True)
class EvaluateConfig:
    hd_percentile: float | None = None
    phases: tuple[str, ...] = ("validation", "test")
    method: str | None = None  # label used in tables; defaults to the pipeline kind

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if any(p not in ("validation", "test") for p in self.phases):
            raise ConfigError(f"evaluate phases must be drawn from validation/test, got {self.phases}")
        if self.hd_percentile is not None and not 0.0 < self.hd_percentile <= 100.0:
            raise ConfigError("hd_percentile must lie in (0, 100]")


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    output_dir: str
    seed: int
    data: DataConfig
    preprocess: PreprocessConfig
    augment: AugmentConfig
    cohort: CohortConfig
    network: SegmenterConfig
    classifier: ClassifierConfig | None
    train: TrainConfig
    pipeline: PipelineConfig
    evaluate: EvaluateConfig
    source: str = field(default="", repr=False, compare=False)

    @property
    def paths(self) -> RunPaths:
        return RunPaths(Path(self.output_dir), self.run_id)

    @property
    def data_dir(self) -> Path:
        return Path(self.data.dir) if self.data.dir is not None else self.paths.data_dir

    @property
    def method(self) -> str:
        return self.evaluate.method or self.pipeline.kind


def _build(cls, section: dict[str, Any] | None, where: str, **extra):
    section = dict(section or {})
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"[{where}]: unknown key(s) {sorted(unknown)}")
    for k, v in section.items():
        if isinstance(v, list):
            section[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    try:
        return cls(**{**extra, **section})
    except TypeError as e:
        raise ConfigError(f"[{where}]: {e}") from None


_PIPELINE_OPTIONS = {"bypass_classifier", "flt_probability_threshold", "fusion_channels", "patch_size", "overlap"}
_STAGE_KEYS = {"loss", "oracle_inputs"}
_NETWORK_KEYS = {"architecture", "base_width", "depth", "window_size", "seed"}


def _pipeline(section: dict, network: SegmenterConfig, classifier: ClassifierConfig | None) -> PipelineConfig:
    section = dict(section or {})
    kind = section.pop("kind", "single_step")
    overrides = section.pop("stages", {})
    members = section.pop("members", None)
    bases = [replace(network, architecture=a, seed=network.seed + i) for i, a in enumerate(members or [])]
    unknown = set(section) - _PIPELINE_OPTIONS
    if unknown:
        raise ConfigError(f"[pipeline]: unknown key(s) {sorted(unknown)}")
    options = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    base = PipelineConfig.standard(kind, network, classifier=classifier, members=bases, **options)

    stages = dict(base.stages)
    for name, o in overrides.items():
        if name not in stages:
            raise ConfigError(f"[pipeline.stages.{name}]: no such stage in a {kind} pipeline")
        unknown = set(o) - _STAGE_KEYS - _NETWORK_KEYS
        if unknown:
            raise ConfigError(f"[pipeline.stages.{name}]: unknown key(s) {sorted(unknown)}")
        spec = stages[name]
        net_over = {k: v for k, v in o.items() if k in _NETWORK_KEYS}
        if net_over:
            spec = replace(spec, network=replace(spec.network, **net_over))
        if "loss" in o:
            spec = replace(spec, loss=o["loss"])
        if "oracle_inputs" in o:
            spec = replace(spec, oracle_inputs=tuple(o["oracle_inputs"]))
        stages[name] = spec
    return replace(base, stages=stages)


def parse_run_config(doc: dict[str, Any], *, source: str = "", env: Config | None = None) -> RunConfig:
    doc = dict(doc)
    known = {"run_id", "output_dir", "seed", "data", "preprocess", "augment", "cohort", "network",
             "classifier", "train", "pipeline", "evaluate"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    seed = int(doc.get("seed", 0))

    data = dict(doc.get("data", {}))
    phantom = data.pop("phantom", None)
    remap = data.pop("label_remap", None)
    data_cfg = _build(DataConfig, data, "data",
                      phantom=_build(PhantomCohortConfig, phantom, "data.phantom", seed=seed) if phantom is not None else None,
                      label_remap={int(k): int(v) for k, v in remap.items()} if remap else None)

    network = _build(SegmenterConfig, doc.get("network"), "network", seed=seed)
    classifier = _build(ClassifierConfig, doc["classifier"], "classifier", seed=seed) if "classifier" in doc else None
    train_defaults = {"seed": seed}
    if env is not None:
        train_defaults.update(device=env.device, num_workers=env.num_workers)
    return RunConfig(
        run_id=str(doc.get("run_id", "run")),
        output_dir=str(doc.get("output_dir", "runs")),
        seed=seed,
        data=data_cfg,
        preprocess=_build(PreprocessConfig, doc.get("preprocess"), "preprocess"),
        augment=_build(AugmentConfig, doc.get("augment"), "augment", seed=seed),
        cohort=_build(CohortConfig, doc.get("cohort"), "cohort", seed=seed),
        network=network,
        classifier=classifier,
        train=_build(TrainConfig, doc.get("train"), "train", **train_defaults),
        pipeline=_pipeline(doc.get("pipeline", {}), network, classifier),
        evaluate=_build(EvaluateConfig, doc.get("evaluate"), "evaluate"),
        source=source,
    )


def load_run_config(path: str | Path, env: Config | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"run file {path} not found")
    text = path.read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_run_config(doc, source=text, env=env)


def write_run_file(cfg: RunConfig) -> Path:
    """Copy the run file verbatim into the run directory."""
    out = cfg.paths.root / RUN_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cfg.source)
    return out
