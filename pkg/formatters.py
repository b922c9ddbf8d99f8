from __future__ import annotations
from pathlib import Path
from typing import Sequence

import pandas as pd

from metrics import AggregateReport, ClassifierScores, Stat

ABSENT = "-"


def fmt_stat(stat: Stat | None, digits: int = 2) -> str:
    if stat is None:
        return ABSENT
    return f"{stat.mean:.{digits}f} ± {stat.std:.{digits}f}"


def fmt_value(x: float | None, digits: int = 2) -> str:
    return ABSENT if x is None else f"{x:.{digits}f}"


def table1_frame(reports: Sequence[AggregateReport]) -> pd.DataFrame:
    """Dice table: one row per method and phase."""
    rows = [{
        "Method": r.method,
        "Phase": r.phase,
        "TL": fmt_stat(r.dice.get("TL")),
        "FL": fmt_stat(r.dice.get("FL")),
        "FLT": fmt_stat(r.dice.get("FLT")),
        "True FLT": fmt_stat(r.true_flt),
        "n": len(r.cases),
        "failed": len(r.failed),
    } for r in reports]
    return pd.DataFrame(rows, columns=["Method", "Phase", "TL", "FL", "FLT", "True FLT", "n", "failed"])


def table2_frame(reports: Sequence[AggregateReport]) -> pd.DataFrame:
    """Hausdorff table in mm; FLT HD counts only cases where both masks hold FLT."""
    rows = []
    for r in reports:
        row = {"Method": r.method, "Phase": r.phase}
        for name in ("TL", "FL", "FLT"):
            stat = r.hd.get(name)
            row[f"{name} HD"] = fmt_stat(stat)
            row[f"{name} n"] = stat.n if stat else 0
        rows.append(row)
    return pd.DataFrame(rows, columns=["Method", "Phase", "TL HD", "TL n", "FL HD", "FL n", "FLT HD", "FLT n"])


def table3_frame(entries: Sequence[tuple[str, str, AggregateReport]]) -> pd.DataFrame:
    """Loss comparison: (network, loss, report) per row."""
    rows = [{
        "Network": net,
        "Loss": loss.upper(),
        "TL": fmt_stat(r.dice.get("TL")),
        "FL": fmt_stat(r.dice.get("FL")),
        "FLT": fmt_stat(r.dice.get("FLT")),
        "True FLT": fmt_stat(r.true_flt),
    } for net, loss, r in entries]
    return pd.DataFrame(rows, columns=["Network", "Loss", "TL", "FL", "FLT", "True FLT"])


def classifier_frame(named: Sequence[tuple[str, ClassifierScores]]) -> pd.DataFrame:
    rows = [{
        "Model": name,
        "Precision": fmt_value(s.precision),
        "Recall": fmt_value(s.recall),
        "F1": fmt_value(s.f1),
        "Accuracy": fmt_value(s.accuracy),
        "n": s.n,
    } for name, s in named]
    return pd.DataFrame(rows, columns=["Model", "Precision", "Recall", "F1", "Accuracy", "n"])


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def write_report_tables(report: AggregateReport, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    return {
        "table1": write_csv(table1_frame([report]), directory / "table1.csv"),
        "table2": write_csv(table2_frame([report]), directory / "table2.csv"),
    }


def format_report(report: AggregateReport) -> str:
    lines = [
        f"{report.method} / {report.phase}: {len(report.cases)} case(s), {len(report.failed)} failed",
        f"  DC   TL {fmt_stat(report.dice.get('TL'))}   FL {fmt_stat(report.dice.get('FL'))}   "
        f"FLT {fmt_stat(report.dice.get('FLT'))}   True FLT {fmt_stat(report.true_flt)}",
        f"  HD   TL {fmt_stat(report.hd.get('TL'))}   FL {fmt_stat(report.hd.get('FL'))}   "
        f"FLT {fmt_stat(report.hd.get('FLT'))}",
    ]
    if report.classifier is not None:
        c = report.classifier
        lines.append(f"  FLT classifier  P {fmt_value(c.precision)}  R {fmt_value(c.recall)}  "
                     f"F1 {fmt_value(c.f1)}  Acc {fmt_value(c.accuracy)}")
    return "\n".join(lines)


def format_leaderboard(items: list[dict], phase: str) -> str:
    lines = [f"Methods ranked on {phase} DC (mean of TL, FL, True FLT)", ""]

    def row(rank: int, it: dict) -> str:
        return (f"{rank:>2}. {it['method']:<24} TL {fmt_value(it['tl'])}  FL {fmt_value(it['fl'])}  "
                f"True FLT {fmt_value(it['true_flt'])}  (n={it['n']})")

    for i, it in enumerate(items[:3], start=1):
        lines.append(row(i, it))
    if len(items) > 3:
        lines.append("──────────────")
        for i, it in enumerate(items[3:], start=4):
            lines.append(row(i, it))
    if not items:
        lines.append("no evaluated runs")
    return "\n".join(lines).strip()


def format_epochs(rows: list[dict], stage: str) -> str:
    """Per-epoch ledger rows of one stage; '-' where a metric does not apply."""
    if not rows:
        return f"    {stage}: no epochs recorded"
    lines = [f"    {stage}: {len(rows)} epoch(s)"]
    for r in rows:
        lines.append(f"      {r['epoch']:>3}  loss {r['train_loss']:.4f}  DC {fmt_value(r['val_mean_dice'], 3)}  "
                     f"True FLT {fmt_value(r['val_true_flt_dice'], 3)}  lr {r['lr']:.1e}")
    return "\n".join(lines)
