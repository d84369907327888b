"""
services/reports.py

Report Output
=============

Writes an EvalReport to disk:
- report.json: per-image rows, aggregates, per-group breakdown, ablation
- per_image.csv: one row per image (header only when empty)
- grid.png: contact sheet, rows = age groups, columns = gender x panels
"""

import logging
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

import db
from services.evaluation import ROW_COLUMNS, EvalReport
from services.synthetic_data import AGE_GROUPS, GENDER_CLASSES
from utils.render import contact_sheet

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
CSV_FILE = "per_image.csv"
GRID_FILE = "grid.png"


def grid_cells(report: EvalReport) -> Dict[Tuple[str, str], Dict[str, np.ndarray]]:
    """First image (lowest input id) per (age, gender) cell."""
    cells: Dict[Tuple[str, str], Dict[str, np.ndarray]] = {}
    for row in sorted(report.rows, key=lambda r: r["input_id"]):
        panels = report.panels.get(row["input_id"])
        key = (str(row["age"]), str(row["gender"]))
        if panels is not None and key not in cells:
            cells[key] = panels
    return cells


def emit_report(report: EvalReport, output_dir) -> Dict[str, Path]:
    """Write report.json, per_image.csv and grid.png; OSError on unwritable paths."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    paths = {
        "report": db.write_json(out / REPORT_FILE, report.to_dict()),
        "csv": db.write_csv(out / CSV_FILE, report.rows, ROW_COLUMNS),
    }
    sheet = contact_sheet(grid_cells(report), row_order=AGE_GROUPS, col_order=GENDER_CLASSES)
    paths["grid"] = out / GRID_FILE
    sheet.save(paths["grid"], format="PNG")

    logger.info(f"Report written to {out} ({len(report.rows)} images)")
    return paths
