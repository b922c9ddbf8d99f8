from __future__ import annotations
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from dotenv import load_dotenv

from cohort import CohortManifest, FoldSplit, build_manifest, holdout_split, load_case_record, load_splits, save_splits, \
    stratified_folds
from config import Config, RunConfig, load_config, load_run_config, write_run_file
from db import Database
from errors import CaseNotFoundError, ConfigError, TbadError
from formatters import classifier_frame, format_epochs, format_report, table1_frame, table2_frame, table3_frame, \
    write_csv, write_report_tables
from imaging_io import LabelMap, Volume, case_paths, load_case, save_case, save_label
from leaderboard import MethodLeaderboard
from metrics import AggregateReport, aggregate, evaluate_cohort, load_report
from networks import network_from_checkpoint
from phantom import generate_cohort
from pipelines import SegmentationPipeline
from plots import plot_history, render_overlay
from preprocess import CropBox, PreprocessedCase, clip_and_normalize, preprocess_case, restore_prediction
from training import HISTORY_FILE, TrainingHistory, best_checkpoint, train_pipeline
from utils import RunPaths

log = logging.getLogger("tbadseg")

CROPS_FILE = "crops.json"
METRICS_FILE = "metrics.json"
TIMINGS_FILE = "timings.json"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CaseNotFoundError(f"{path} not found; {hint}")
    return path


def _fold(cfg: RunConfig, index: int) -> FoldSplit:
    splits = load_splits(_require(cfg.paths.splits, "run `split` first"))
    if not 0 <= index < len(splits):
        raise ConfigError(f"fold {index} out of range; {cfg.run_id} has {len(splits)} fold(s)")
    return splits[index]


def _manifest(cfg: RunConfig) -> CohortManifest:
    return CohortManifest.load(_require(cfg.paths.manifest, "run `ingest` first"))


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------- preprocessed store ----------

def load_preprocessed(paths: RunPaths, ids: Sequence[str]) -> dict[str, tuple[Volume, LabelMap]]:
    out = {}
    for cid in ids:
        image_path, label_path = case_paths(paths.preprocessed, cid)
        volume, label = load_case(_require(image_path, "run `preprocess` first"), label_path, case_id=cid)
        out[cid] = (volume, label)
    return out


def load_crops(paths: RunPaths) -> dict[str, dict]:
    return json.loads(_require(paths.preprocessed / CROPS_FILE, "run `preprocess` first").read_text())


def restore_target(volume: Volume, entry: dict) -> PreprocessedCase:
    """Rebuild the bookkeeping that maps a prediction back onto its source grid."""
    return PreprocessedCase(
        volume=volume, label=None, crop_box=CropBox.from_dict(entry["crop_box"]),
        source_spacing=tuple(entry["source_spacing"]), source_shape=tuple(entry["source_shape"]),
        source_affine=np.asarray(entry["source_affine"], dtype=np.float64),
    )


def load_models(cfg: RunConfig, fold: int) -> dict[str, torch.nn.Module]:
    models = {}
    for name in cfg.pipeline.stages:
        if name == "classifier" and cfg.pipeline.bypass_classifier:
            continue
        models[name] = network_from_checkpoint(best_checkpoint(cfg.paths.stage(fold, name)),
                                               map_location=cfg.train.device)
    return models


# ---------- ledger ----------

async def _record_training(env: Config, cfg: RunConfig, fold: int, histories: dict[str, TrainingHistory]):
    async with Database(env.runs_db) as db:
        await db.record_run(run_id=cfg.run_id, fold=fold, method=cfg.method, pipeline=cfg.pipeline.kind,
                            config=cfg.source)
        for stage, history in histories.items():
            await db.record_history(run_id=cfg.run_id, fold=fold, stage=stage, history=history)


async def _record_evaluation(env: Config, cfg: RunConfig, fold: int, report: AggregateReport,
                             timings: dict[str, float]):
    async with Database(env.runs_db) as db:
        await db.record_run(run_id=cfg.run_id, fold=fold, method=cfg.method, pipeline=cfg.pipeline.kind,
                            config=cfg.source)
        await db.record_report(run_id=cfg.run_id, fold=fold, report=report, timings=timings)


async def _ledger_summary(env: Config, configs: Sequence[RunConfig], phase: str) -> str:
    """Method leaderboard, then each run's rank and the ledger's epochs of its primary stage."""
    async with Database(env.runs_db) as db:
        board = MethodLeaderboard(db, phase=phase)
        lines = [await board.update_once()]
        for c in configs:
            rank = board.rank_of(c.method)
            standing = f"rank {rank} on {phase}" if rank else f"unranked on {phase}"
            lines += ["", f"{c.run_id} ({c.method}): {standing}"]
            stage = primary_stage(c)
            for fold in c.paths.trained_folds():
                run = await db.get_run_config(c.run_id, fold)
                if run is None:
                    lines.append(f"  fold {fold}: not in the ledger")
                    continue
                if run["config"] != c.source:
                    log.warning("%s fold %d was recorded under a different run file", c.run_id, fold)
                lines.append(f"  fold {fold}: {run['pipeline']}")
                lines.append(format_epochs(await db.get_epochs(c.run_id, fold, stage), stage))
    return "\n".join(lines)


# ---------- commands ----------

def cmd_phantom(args, env: Config) -> int:
    manifest = generate_cohort(args.n, args.flt_fraction, args.seed, args.out,
                               shape=(args.size,) * 3, spacing=args.spacing)
    print(f"{len(manifest)} phantom(s), {manifest.flt_count} with FLT -> {args.out}")
    return 0


def cmd_ingest(cfg: RunConfig, args, env: Config) -> int:
    data_dir = cfg.data_dir
    if cfg.data.phantom is not None:
        p = cfg.data.phantom
        generate_cohort(p.n, p.flt_fraction, p.seed, data_dir, shape=p.shape, spacing=p.spacing,
                        preprocess=cfg.preprocess)
    elif not data_dir.is_dir():
        raise CaseNotFoundError(f"data directory {data_dir} does not exist")
    manifest = build_manifest(data_dir, label_remap=cfg.data.label_remap)
    manifest.save(cfg.paths.manifest)
    print(f"{len(manifest)} labelled case(s), {manifest.flt_count} with FLT -> {cfg.paths.manifest}")
    return 0


def cmd_preprocess(cfg: RunConfig, args, env: Config) -> int:
    manifest = _manifest(cfg)
    crops = {}
    for record in manifest.cases:
        volume, label = load_case_record(record, cfg.data.label_remap)
        case = preprocess_case(volume, label, cfg.preprocess)
        save_case(case.volume, case.label, cfg.paths.preprocessed)
        crops[record.id] = {
            "crop_box": case.crop_box.to_dict(),
            "source_spacing": list(case.source_spacing),
            "source_shape": list(case.source_shape),
            "source_affine": np.asarray(case.source_affine).tolist(),
        }
        log.info("preprocessed %s: %s -> %s", record.id, volume.shape, case.volume.shape)
    _write_json(cfg.paths.preprocessed / CROPS_FILE, crops)
    print(f"{len(crops)} case(s) -> {cfg.paths.preprocessed}")
    return 0


def cmd_split(cfg: RunConfig, args, env: Config) -> int:
    manifest = _manifest(cfg)
    c = cfg.cohort
    if c.mode == "kfold":
        splits = stratified_folds(manifest, c.k, c.seed)
    else:
        n_train, n_val, n_test = c.holdout_counts(len(manifest))
        splits = [holdout_split(manifest, n_train, n_val, n_test, c.seed)]
    save_splits(splits, cfg.paths.splits, mode=c.mode, seed=c.seed)
    for s in splits:
        print(f"fold {s.fold_index}: {len(s.train)} train / {len(s.validation)} val / {len(s.test)} test")
    return 0


def cmd_train(cfg: RunConfig, args, env: Config) -> int:
    fold = _fold(cfg, args.fold)
    data = load_preprocessed(cfg.paths, fold.train + fold.validation)
    results = train_pipeline(
        cfg.pipeline, fold, cfg.train, data=data, augment=cfg.augment,
        stage_dir_for=lambda name: cfg.paths.stage(fold.fold_index, name),
        resume=args.resume, epochs=args.epochs,
    )
    asyncio.run(_record_training(env, cfg, fold.fold_index, {n: r.history for n, r in results.items()}))
    for name, r in results.items():
        print(f"{name}: best epoch {r.best_epoch} -> {best_checkpoint(cfg.paths.stage(fold.fold_index, name))}")
    return 0


def evaluate_phase(cfg: RunConfig, pipeline: SegmentationPipeline, fold: FoldSplit, phase: str,
                   manifest: CohortManifest, crops: dict[str, dict]) -> tuple[AggregateReport, dict[str, float]]:
    """Predict every case of a phase, restore to the source grid and score against the source labels."""
    out_dir = cfg.paths.phase(fold.fold_index, phase)
    ids = fold.role(phase)
    data = load_preprocessed(cfg.paths, ids)
    predictions: dict[str, LabelMap | None] = {}
    truths: dict[str, LabelMap] = {}
    flags: dict[str, bool] = {}
    timings: dict[str, float] = {}
    for cid in ids:
        _, truth = load_case_record(manifest.get(cid), cfg.data.label_remap)
        truths[cid] = truth
        volume, label = data[cid]
        try:
            pred = pipeline.predict(volume, truth=label)
        except TbadError as e:
            log.warning("%s: prediction failed: %s", cid, e)
            predictions[cid] = None
            continue
        restored = restore_prediction(pred.label, restore_target(volume, crops[cid]))
        save_label(restored, out_dir / "predictions" / f"{cid}.nii.gz")
        predictions[cid] = restored
        timings[cid] = pred.seconds
        if pred.flt_probability is not None:
            flags[cid] = pred.flt_probability >= cfg.pipeline.flt_probability_threshold

    report = evaluate_cohort(predictions, truths, method=cfg.method, phase=phase,
                             hd_percentile=cfg.evaluate.hd_percentile,
                             classifier_flags=flags if flags else None)
    report.save(out_dir / METRICS_FILE)
    write_report_tables(report, out_dir)
    _write_json(out_dir / TIMINGS_FILE, timings)
    return report, timings


def cmd_evaluate(cfg: RunConfig, args, env: Config) -> int:
    fold = _fold(cfg, args.fold)
    manifest = _manifest(cfg)
    crops = load_crops(cfg.paths)
    pipeline = SegmentationPipeline(cfg.pipeline, load_models(cfg, fold.fold_index))
    phases = [args.phase] if args.phase else list(cfg.evaluate.phases)
    for phase in phases:
        report, timings = evaluate_phase(cfg, pipeline, fold, phase, manifest, crops)
        asyncio.run(_record_evaluation(env, cfg, fold.fold_index, report, timings))
        print(format_report(report))
    return 0


def collect_reports(cfg: RunConfig) -> dict[str, list[AggregateReport]]:
    """metrics.json of every evaluated fold, grouped by phase."""
    by_phase: dict[str, list[AggregateReport]] = {}
    for phase in cfg.evaluate.phases:
        for path in sorted(cfg.paths.root.glob(f"fold_*/{phase}/{METRICS_FILE}")):
            by_phase.setdefault(phase, []).append(load_report(path))
    return by_phase


def pool_reports(reports: Sequence[AggregateReport]) -> AggregateReport:
    """Fold reports of one method and phase merged into one, cases pooled."""
    if len(reports) == 1:
        return reports[0]
    first = reports[0]
    return aggregate([c for r in reports for c in r.cases], method=first.method, phase=first.phase,
                     failed=[f for r in reports for f in r.failed])


def primary_stage(cfg: RunConfig) -> str:
    order = [s for s in cfg.pipeline.training_order() if not s.is_classifier]
    return order[-1].name


def cmd_report(cfg: RunConfig, args, env: Config) -> int:
    configs = [cfg] + [load_run_config(p, env) for p in args.compare]
    out_dir = cfg.paths.root / "report"
    pooled: list[AggregateReport] = []
    classifiers = []
    losses = []
    histories = []
    for c in configs:
        by_phase = collect_reports(c)
        if not by_phase:
            log.warning("%s has no evaluated folds", c.run_id)
        for phase, reports in by_phase.items():
            pooled.append(pool_reports(reports))
            classifiers += [(f"{c.method} fold {i} {phase}", r.classifier)
                            for i, r in enumerate(reports) if r.classifier is not None]
        if "test" in by_phase:
            stage = c.pipeline.stages[primary_stage(c)]
            losses.append((stage.network.architecture, stage.loss or c.train.loss, pool_reports(by_phase["test"])))
        history_path = c.paths.stage(0, primary_stage(c)) / HISTORY_FILE
        if history_path.is_file():
            histories.append((f"{c.run_id} ({(c.pipeline.stages[primary_stage(c)].loss or c.train.loss).upper()})",
                              TrainingHistory.load(history_path)))

    if pooled:
        write_csv(table1_frame(pooled), out_dir / "table1.csv")
        write_csv(table2_frame(pooled), out_dir / "table2.csv")
        for r in pooled:
            print(format_report(r))
    if losses:
        write_csv(table3_frame(losses), out_dir / "table3.csv")
    if classifiers:
        write_csv(classifier_frame(classifiers), out_dir / "classifier.csv")
    if histories:
        plot_history(histories, cfg.paths.figures / "history.png")

    print()
    print(asyncio.run(_ledger_summary(env, configs, args.phase)))
    return 0


def cmd_visualize(cfg: RunConfig, args, env: Config) -> int:
    manifest = _manifest(cfg)
    record = manifest.get(args.case)
    image, truth = load_case_record(record, cfg.data.label_remap)
    labels, names = [truth], ["ground truth"]
    for c in [cfg] + [load_run_config(p, env) for p in args.compare]:
        pred_path = c.paths.phase(args.fold, args.phase) / "predictions" / f"{args.case}.nii.gz"
        if not pred_path.is_file():
            log.warning("%s: no %s prediction for %s", c.run_id, args.phase, args.case)
            continue
        _, pred = load_case(record.image_path, pred_path, case_id=args.case)
        labels.append(pred)
        names.append(c.method)
    out = render_overlay(clip_and_normalize(image, cfg.preprocess), labels,
                         cfg.paths.figures / f"{args.case}_fold{args.fold}_{args.phase}.png", names)
    print(out)
    return 0


# ---------- entry point ----------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbadseg", description="TBAD TL/FL/FLT segmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic phantom cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--flt-fraction", type=float, default=0.68)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=64, help="edge length of the cubic volume in voxels")
    p.add_argument("--spacing", type=float, default=1.5, help="isotropic voxel spacing in mm")
    p.set_defaults(handler=cmd_phantom, needs_config=False)

    def with_config(name: str, handler, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", type=Path, required=True)
        sp.set_defaults(handler=handler, needs_config=True)
        return sp

    with_config("ingest", cmd_ingest, "build manifest.json from the data source")
    with_config("preprocess", cmd_preprocess, "window, resample and crop every case")
    with_config("split", cmd_split, "write splits.json")

    p = with_config("train", cmd_train, "train every stage of the pipeline on one fold")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int, default=None, help="override the per-stage epoch count")

    p = with_config("evaluate", cmd_evaluate, "predict and score the validation/test phases of one fold")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--phase", choices=("validation", "test"), default=None)

    p = with_config("report", cmd_report, "emit comparison tables, history plot and the method leaderboard")
    p.add_argument("--compare", type=Path, nargs="*", default=[], help="further run files to include")
    p.add_argument("--phase", choices=("validation", "test"), default="test")

    p = with_config("visualize", cmd_visualize, "tri-planar overlay of ground truth and predictions")
    p.add_argument("--case", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--phase", choices=("validation", "test"), default="test")
    p.add_argument("--compare", type=Path, nargs="*", default=[])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        env = load_config()
    except TbadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=env.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if env.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)

    try:
        if not args.needs_config:
            return args.handler(args, env)
        cfg = load_run_config(args.config, env)
        write_run_file(cfg)
        return args.handler(cfg, args, env)
    except (TbadError, OSError) as e:
        log.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
