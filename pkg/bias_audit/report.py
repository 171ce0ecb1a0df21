"""
Module rendering audit reports.

Formats:
    structured: ``report.json``, the canonical document (sorted keys, so two
        emissions of one report are byte-identical).
    tabular: one CSV per report section with the usual column labels.
    plots: bar charts per section.

Grid runs additionally get a comparison table, grouped bar charts and
metric-agreement correlations across cells.
"""

import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from scipy import stats

from exceptions import ReportIOError
from schemas import AuditReport

logger = logging.getLogger(__name__)

STRUCTURED_FILE = "report.json"
FORMATS = ("structured", "tabular", "plots")

INTRINSIC_COLUMNS = {
    "SEAT-TEST": lambda r: r.intrinsic.seat and r.intrinsic.seat.test_statistic,
    "SEAT-EFFECT": lambda r: r.intrinsic.seat and r.intrinsic.seat.effect_size,
    "ATTR-LPBS": lambda r: r.intrinsic.attribute_lpbs and r.intrinsic.attribute_lpbs.score,
    "TARGET-LPBS": lambda r: r.intrinsic.target_lpbs and r.intrinsic.target_lpbs.score,
}
PROBE_COLUMNS = {
    "GENDER-ACC": lambda r: r.probe.gender_accuracy,
    "GENDER-ACC-OCC": lambda r: r.probe.gender_accuracy_per_occurrence,
    "STEREOTYPE-ACC": lambda r: r.probe.stereotype_accuracy,
    "CONF": lambda r: r.probe.mean_bias_confidence,
    "P-VALUE": lambda r: r.probe.randomization_p_value,
}
EXTRINSIC_FIELDS = {
    "TPRD": "tprd", "FPRD": "fprd", "ACC-F": "acc_f", "ACC-M": "acc_m", "CF": "cf",
    "CF-TPRD": "cf_tprd", "CF-FPRD": "cf_fprd", "CF-ACC-F": "cf_acc_f", "CF-ACC-M": "cf_acc_m",
}


def ensure_writable(directory) -> Path:
    """
    Creates the directory if needed and checks that files can be written into it.

    Raises:
        ReportIOError: If the directory cannot be created or written.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=directory):
            pass
    except OSError as e:
        raise ReportIOError(f"report directory {directory} is not writable: {e}")
    return directory


def atomic_write(path: Path, text: str) -> Path:
    """Writes ``text`` to a temporary file next to ``path`` and renames it into place."""
    path = Path(path)
    with tempfile.NamedTemporaryFile("w", encoding="utf-8", dir=path.parent, prefix=f".{path.name}.",
                                     suffix=".tmp", delete=False) as handle:
        handle.write(text)
        temporary = Path(handle.name)
    os.replace(temporary, path)
    return path


def structured_document(report: AuditReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_structured(report: AuditReport, output_dir) -> Path:
    return atomic_write(Path(output_dir) / STRUCTURED_FILE, structured_document(report))


def load_report(path) -> AuditReport:
    """
    Parses a structured report document.

    Raises:
        ReportIOError: If the file cannot be read.
    """
    try:
        return AuditReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ReportIOError(f"cannot read report {path}: {e}")


def _none_if_nan(value) -> Optional[float]:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return float(value)


def intrinsic_row(report: AuditReport) -> Optional[dict]:
    if report.intrinsic is None:
        return None
    row = {column: _none_if_nan(getter(report)) for column, getter in INTRINSIC_COLUMNS.items()}
    return row if any(value is not None for value in row.values()) else None


def probe_row(report: AuditReport) -> Optional[dict]:
    if report.probe is None:
        return None
    return {column: getter(report) for column, getter in PROBE_COLUMNS.items()}


def extrinsic_rows(report: AuditReport) -> Optional[tuple[dict, dict]]:
    if report.extrinsic is None:
        return None
    means = {column: getattr(report.extrinsic, field) for column, field in EXTRINSIC_FIELDS.items()}
    spreads = {column: report.extrinsic.std.get(field) for column, field in EXTRINSIC_FIELDS.items()}
    return means, spreads


def _write_csv(rows: list[dict], path: Path) -> Path:
    buffer = pd.DataFrame(rows).to_csv(index=False, lineterminator="\n")
    return atomic_write(path, buffer)


def write_tabular(report: AuditReport, output_dir) -> list[Path]:
    """One CSV per non-empty section; empty sections are left out."""
    output_dir = Path(output_dir)
    files = []
    row = intrinsic_row(report)
    if row:
        files.append(_write_csv([row], output_dir / "intrinsic.csv"))
    row = probe_row(report)
    if row:
        files.append(_write_csv([row], output_dir / "probe.csv"))
    rows = extrinsic_rows(report)
    if rows:
        means, spreads = rows
        files.append(_write_csv([means], output_dir / "extrinsic.csv"))
        files.append(_write_csv([spreads], output_dir / "extrinsic_std.csv"))
        if report.extrinsic.per_class_tprd:
            files.append(_write_csv(
                [{"CLASS": label, "TPR-GAP": gap} for label, gap in report.extrinsic.per_class_tprd.items()],
                output_dir / "extrinsic_per_class.csv",
            ))
    return files


def _bar_chart(path: Path, title: str, groups: dict[str, dict], errors: Optional[dict[str, dict]] = None) -> Path:
    """
    Grouped bar chart: one group of bars per metric, one bar per series.

    Missing values are drawn as empty slots.
    """
    metrics = list(next(iter(groups.values())))
    positions = np.arange(len(metrics))
    width = 0.8 / len(groups)
    figure = Figure(figsize=(max(6, 1.2 * len(metrics) * max(1, len(groups) / 2)), 4))
    axis = figure.add_subplot(1, 1, 1)
    for index, (series, values) in enumerate(groups.items()):
        heights = [values[m] if values[m] is not None else np.nan for m in metrics]
        yerr = None
        if errors and series in errors:
            yerr = [errors[series].get(m) if errors[series].get(m) is not None else 0 for m in metrics]
        axis.bar(positions + index * width - 0.4 + width / 2, heights, width, yerr=yerr, capsize=3, label=series)
    axis.set_xticks(positions)
    axis.set_xticklabels(metrics, rotation=30, ha="right")
    axis.axhline(0, color="black", linewidth=0.8)
    axis.set_title(title)
    axis.grid(True, axis="y", alpha=0.3)
    if len(groups) > 1:
        axis.legend(fontsize=8)
    figure.tight_layout()
    figure.savefig(path, dpi=150)
    return path


def _cell_label(report: AuditReport) -> str:
    return "/".join(report.provenance.cell.get(key, "-") for key in ("mitigation", "intervention"))


def write_plots(report: AuditReport, output_dir) -> list[Path]:
    output_dir = Path(output_dir)
    label = _cell_label(report)
    files = []
    row = intrinsic_row(report)
    if row:
        files.append(_bar_chart(output_dir / "intrinsic.png", "Intrinsic bias", {label: row}))
    row = probe_row(report)
    if row:
        files.append(_bar_chart(output_dir / "probe.png", "Gender information probe", {label: row}))
    rows = extrinsic_rows(report)
    if rows:
        means, spreads = rows
        files.append(_bar_chart(output_dir / "extrinsic.png", "Extrinsic bias", {label: means}, {label: spreads}))
    return files


def emit_report(report: AuditReport, formats: Iterable[str], output_dir) -> list[Path]:
    """
    Renders a report in the requested formats.

    Args:
        report (AuditReport): The report.
        formats (Iterable[str]): Any of ``structured``, ``tabular`` and ``plots``.
        output_dir: Target directory, created when missing.

    Returns:
        list[Path]: Every written file.

    Raises:
        ReportIOError: If the directory is not writable; checked before anything is written.
    """
    formats = set(formats)
    unknown = formats - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report format(s): {sorted(unknown)}")
    output_dir = ensure_writable(output_dir)
    files = []
    if "structured" in formats:
        files.append(write_structured(report, output_dir))
    if "tabular" in formats:
        files.extend(write_tabular(report, output_dir))
    if "plots" in formats:
        files.extend(write_plots(report, output_dir))
    logger.info("Wrote %d report file(s) to %s", len(files), output_dir)
    return files


def comparison_rows(reports: Sequence[AuditReport]) -> list[dict]:
    rows = []
    for report in reports:
        row = {
            "MITIGATION": report.provenance.cell.get("mitigation"),
            "INTERVENTION": report.provenance.cell.get("intervention"),
            "STATUS": "failed" if report.failed else "ok",
        }
        row.update(intrinsic_row(report) or dict.fromkeys(INTRINSIC_COLUMNS))
        row.update(probe_row(report) or dict.fromkeys(PROBE_COLUMNS))
        extrinsic = extrinsic_rows(report)
        row.update(extrinsic[0] if extrinsic else dict.fromkeys(EXTRINSIC_FIELDS))
        rows.append(row)
    return rows


def _correlation(rows: list[dict], first: str, second: str) -> Optional[dict]:
    pairs = [(row[first], row[second]) for row in rows if row[first] is not None and row[second] is not None]
    if len(pairs) < 3:
        return None
    x, y = np.array(pairs, dtype=np.float64).T
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        logger.warning("Constant %s or %s across cells; correlation skipped", first, second)
        return None
    result = stats.pearsonr(x, y)
    return {"r": float(result[0]), "p_value": float(result[1]), "n": len(pairs)}


def emit_comparison(reports: Sequence[AuditReport], output_dir) -> list[Path]:
    """
    Merged table, grouped bar charts and metric-agreement correlations of a grid.

    Correlations (TPRD against CF, SEAT effect size against attribute LPBS,
    probe bias accuracy against bias confidence) need at least three cells
    with both values.

    Returns:
        list[Path]: Every written file.
    """
    output_dir = ensure_writable(output_dir)
    rows = comparison_rows(reports)
    files = [_write_csv(rows, output_dir / "comparison.csv")]

    for name, columns in (("intrinsic", INTRINSIC_COLUMNS), ("probe", PROBE_COLUMNS), ("extrinsic", EXTRINSIC_FIELDS)):
        groups = {
            f"{row['MITIGATION']}/{row['INTERVENTION']}": {column: row[column] for column in columns}
            for row in rows
            if any(row[column] is not None for column in columns)
        }
        if groups:
            files.append(_bar_chart(output_dir / f"comparison_{name}.png", f"{name.capitalize()} metrics by cell", groups))

    if len(rows) >= 3:
        correlations = {
            "tprd_vs_cf": _correlation(rows, "TPRD", "CF"),
            "seat_effect_vs_attribute_lpbs": _correlation(rows, "SEAT-EFFECT", "ATTR-LPBS"),
            "bias_accuracy_vs_confidence": _correlation(rows, "STEREOTYPE-ACC", "CONF"),
        }
        files.append(atomic_write(output_dir / "correlations.json",
                                  json.dumps(correlations, indent=2, sort_keys=True) + "\n"))
    return files
