from __future__ import annotations
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from errors import ContractError, IneligibleCaseError
from imaging_io import LabelMap
from utils import CLASS_NAMES

log = logging.getLogger("tbadseg.metrics")

CLASS_IDS = (1, 2, 3)
FLT = 3
_FACE = ndimage.generate_binary_structure(3, 1)


def _arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = pred.data if isinstance(pred, LabelMap) else np.asarray(pred)
    g = gt.data if isinstance(gt, LabelMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise ContractError(f"prediction {p.shape} and ground truth {g.shape} are on different grids")
    if isinstance(pred, LabelMap) and isinstance(gt, LabelMap) and not np.allclose(pred.spacing, gt.spacing):
        raise ContractError(f"spacing differs: {pred.spacing} vs {gt.spacing}")
    return p, g


def dice_coefficient(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray, class_id: int) -> float:
    p, g = _arrays(pred, gt)
    pm, gm = p == class_id, g == class_id
    ps, gs = int(pm.sum()), int(gm.sum())
    if ps == 0 and gs == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pm, gm).sum()) / (ps + gs)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of mask with at least one face neighbour outside it (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def hausdorff_mm(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray, class_id: int,
                 spacing: Sequence[float] | None = None, percentile: float | None = None) -> float:
    p, g = _arrays(pred, gt)
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, LabelMap) else (1.0, 1.0, 1.0)
    pm, gm = p == class_id, g == class_id
    if not pm.any() or not gm.any():
        raise IneligibleCaseError(f"class {class_id} is empty in {'prediction' if not pm.any() else 'ground truth'}")
    scale = np.asarray(spacing, dtype=np.float64)
    bp = np.argwhere(boundary(pm)) * scale
    bg = np.argwhere(boundary(gm)) * scale
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    if percentile is None:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float  # population std (ddof=0)
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n}


def summarize(values: Iterable[float | None]) -> Stat | None:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return None
    arr = np.asarray(vals, dtype=np.float64)
    return Stat(float(arr.mean()), float(arr.std()), len(vals))


@dataclass
class CaseMetrics:
    case_id: str
    dice: dict[int, float]
    hd: dict[int, float | None]
    gt_has_flt: bool
    pred_has_flt: bool

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "dice": {CLASS_NAMES[k]: v for k, v in self.dice.items()},
            "hd_mm": {CLASS_NAMES[k]: v for k, v in self.hd.items()},
            "gt_has_flt": self.gt_has_flt,
            "pred_has_flt": self.pred_has_flt,
        }


def case_metrics(pred: LabelMap, gt: LabelMap, case_id: str | None = None, *,
                 hd_percentile: float | None = None) -> CaseMetrics:
    p, g = _arrays(pred, gt)
    spacing = gt.spacing if isinstance(gt, LabelMap) else (1.0, 1.0, 1.0)
    dice, hd = {}, {}
    for k in CLASS_IDS:
        dice[k] = dice_coefficient(p, g, k)
        try:
            hd[k] = hausdorff_mm(p, g, k, spacing, hd_percentile)
        except IneligibleCaseError:
            hd[k] = None
    return CaseMetrics(
        case_id=case_id or getattr(gt, "id", "case"),
        dice=dice, hd=hd,
        gt_has_flt=bool((g == FLT).any()), pred_has_flt=bool((p == FLT).any()),
    )


def true_flt_dice(cases: Sequence[CaseMetrics]) -> Stat | None:
    return summarize(c.dice[FLT] for c in cases if c.gt_has_flt)


@dataclass(frozen=True)
class ClassifierScores:
    precision: float | None
    recall: float | None
    f1: float | None
    accuracy: float | None
    n: int

    def as_tuple(self) -> tuple[float | None, float | None, float | None]:
        return self.precision, self.recall, self.f1

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "accuracy": self.accuracy, "n": self.n}


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def classifier_metrics(pred_flags: Sequence[bool], gt_flags: Sequence[bool]) -> ClassifierScores:
    if len(pred_flags) != len(gt_flags):
        raise ContractError(f"{len(pred_flags)} predictions for {len(gt_flags)} ground-truth flags")
    pairs = [(bool(p), bool(g)) for p, g in zip(pred_flags, gt_flags)]
    tp = sum(p and g for p, g in pairs)
    fp = sum(p and not g for p, g in pairs)
    fn = sum(g and not p for p, g in pairs)
    tn = len(pairs) - tp - fp - fn
    return ClassifierScores(
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        accuracy=_ratio(tp + tn, len(pairs)),
        n=len(pairs),
    )


@dataclass
class AggregateReport:
    method: str
    phase: str
    dice: dict[str, Stat | None]
    true_flt: Stat | None
    hd: dict[str, Stat | None]
    detection: ClassifierScores | None  # FLT presence read off the segmentation
    classifier: ClassifierScores | None = None
    cases: list[CaseMetrics] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    @property
    def mean_dice(self) -> float | None:
        vals = [s.mean for s in self.dice.values() if s is not None]
        return sum(vals) / len(vals) if vals else None

    def to_dict(self) -> dict:
        def stat(s):
            return s.to_dict() if s is not None else None

        return {
            "method": self.method,
            "phase": self.phase,
            "n_cases": len(self.cases),
            "n_failed": len(self.failed),
            "failed": list(self.failed),
            "dice": {k: stat(v) for k, v in self.dice.items()},
            "true_flt_dice": stat(self.true_flt),
            "hd_mm": {k: stat(v) for k, v in self.hd.items()},
            "detection": self.detection.to_dict() if self.detection else None,
            "classifier": self.classifier.to_dict() if self.classifier else None,
            "cases": [c.to_dict() for c in self.cases],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")
        return path


def aggregate(cases: Sequence[CaseMetrics], *, method: str = "", phase: str = "test",
              failed: Sequence[str] = (), classifier_flags: Mapping[str, bool] | None = None) -> AggregateReport:
    classifier = None
    if classifier_flags is not None:
        scored = [c for c in cases if c.case_id in classifier_flags]
        classifier = classifier_metrics([classifier_flags[c.case_id] for c in scored], [c.gt_has_flt for c in scored])
    return AggregateReport(
        method=method,
        phase=phase,
        dice={CLASS_NAMES[k]: summarize(c.dice[k] for c in cases) for k in CLASS_IDS},
        true_flt=true_flt_dice(cases),
        hd={CLASS_NAMES[k]: summarize(c.hd[k] for c in cases) for k in CLASS_IDS},
        detection=classifier_metrics([c.pred_has_flt for c in cases], [c.gt_has_flt for c in cases]) if cases else None,
        classifier=classifier,
        cases=list(cases),
        failed=list(failed),
    )


def evaluate_cohort(predictions: Mapping[str, LabelMap | None], ground_truths: Mapping[str, LabelMap],
                    manifest=None, *, method: str = "", phase: str = "test", hd_percentile: float | None = None,
                    classifier_flags: Mapping[str, bool] | None = None) -> AggregateReport:
    ids = [i for i in manifest.ids if i in ground_truths] if manifest is not None else sorted(ground_truths)
    cases, failed = [], []
    for cid in ids:
        pred = predictions.get(cid)
        if pred is None:
            failed.append(cid)
            continue
        cases.append(case_metrics(pred, ground_truths[cid], cid, hd_percentile=hd_percentile))
    if failed:
        log.warning("%d case(s) without prediction excluded: %s", len(failed), ", ".join(failed))
    report = aggregate(cases, method=method, phase=phase, failed=failed, classifier_flags=classifier_flags)
    if report.true_flt is None:
        log.info("no FLT-positive cases in %s cohort; True-FLT DC is absent", phase)
    return report


def report_from_dict(d: dict) -> AggregateReport:
    def stat(s):
        return Stat(s["mean"], s["std"], s["n"]) if s else None

    def scores(s):
        return ClassifierScores(**s) if s else None

    by_name = {v: k for k, v in CLASS_NAMES.items()}
    cases = [
        CaseMetrics(
            case_id=c["case_id"],
            dice={by_name[k]: v for k, v in c["dice"].items()},
            hd={by_name[k]: v for k, v in c["hd_mm"].items()},
            gt_has_flt=c["gt_has_flt"], pred_has_flt=c["pred_has_flt"],
        )
        for c in d.get("cases", [])
    ]
    return AggregateReport(
        method=d.get("method", ""), phase=d.get("phase", "test"),
        dice={k: stat(v) for k, v in d["dice"].items()},
        true_flt=stat(d.get("true_flt_dice")),
        hd={k: stat(v) for k, v in d["hd_mm"].items()},
        detection=scores(d.get("detection")), classifier=scores(d.get("classifier")),
        cases=cases, failed=list(d.get("failed", [])),
    )


def load_report(path: str | Path) -> AggregateReport:
    return report_from_dict(json.loads(Path(path).read_text()))
