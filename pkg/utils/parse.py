# utils/parse.py
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from errors import ArgumentError
from utils.normalize import normalize_label, normalize_token

logger = logging.getLogger(__name__)

# ----------------------------
# Label manifest (manual context labels)
# ----------------------------

LABEL_COLUMNS = ("id", "gender", "age", "race")


def parse_label_manifest(path: str | Path,
                         categories: Dict[str, Sequence[str]]) -> Tuple[Dict[int, Dict[str, str]], List[str]]:
    """Read a `id,gender,age,race` CSV.

    Returns (labels by id, problems). Values are normalized to canonical
    category spellings; rows with unknown categories or bad ids are reported in
    ``problems`` and skipped. A missing header column raises ArgumentError;
    unreadable files raise OSError.
    """
    labels: Dict[int, Dict[str, str]] = {}
    problems: List[str] = []
    with Path(path).open("r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        header = {normalize_token(h): h for h in (reader.fieldnames or [])}
        missing = [c for c in LABEL_COLUMNS if c not in header]
        if missing:
            raise ArgumentError(f"label manifest {path} lacks columns: {', '.join(missing)}")
        for line_no, row in enumerate(reader, start=2):
            raw_id = (row.get(header["id"]) or "").strip()
            try:
                entry_id = int(raw_id)
            except ValueError:
                problems.append(f"line {line_no}: bad id {raw_id!r}")
                continue
            values = {}
            for attr in ("gender", "age", "race"):
                value = normalize_label(attr, row.get(header[attr]) or "")
                if value not in categories[attr]:
                    problems.append(f"line {line_no}: {attr}={value!r} not in {list(categories[attr])}")
                    break
                values[attr] = value
            else:
                if entry_id in labels:
                    problems.append(f"line {line_no}: duplicate id {entry_id}")
                labels[entry_id] = values
    if problems:
        logger.warning(f"Label manifest {path}: {len(problems)} problem rows")
    return labels, problems
