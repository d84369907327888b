# utils/render.py
from __future__ import annotations

from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from utils.imageio import to_uint8

PANELS = ("input", "context", "stitched", "output")
_PAD = 2
_LABEL_W = 56
_HEADER_H = 14
_BACKGROUND = (255, 255, 255)
_EMPTY = (208, 208, 208)


def grid_layout(cells: Mapping[Tuple[str, str], Mapping[str, np.ndarray]],
                row_order: Sequence[str], col_order: Sequence[str]) -> Tuple[List[str], List[str]]:
    """Rows and gender columns actually present, in the preferred order (unknown labels last)."""
    rows = {r for r, _ in cells}
    cols = {c for _, c in cells}
    ordered_rows = [r for r in row_order if r in rows] + sorted(rows - set(row_order))
    ordered_cols = [c for c in col_order if c in cols] + sorted(cols - set(col_order))
    return ordered_rows, ordered_cols


def contact_sheet(cells: Mapping[Tuple[str, str], Mapping[str, np.ndarray]],
                  row_order: Sequence[str] = (), col_order: Sequence[str] = ()) -> Image.Image:
    """Grid with one row per age group and, per gender, the four pipeline panels.

    ``cells`` maps (age, gender) -> {panel name: ImageTensor}. Missing cells are
    left as gray tiles.
    """
    rows, cols = grid_layout(cells, row_order, col_order)
    if not rows:
        return Image.new("RGB", (_LABEL_W, _HEADER_H), _BACKGROUND)
    tile = next(iter(next(iter(cells.values())).values())).shape[0]
    n_cols = len(cols) * len(PANELS)
    width = _LABEL_W + n_cols * (tile + _PAD) + _PAD
    height = _HEADER_H + len(rows) * (tile + _PAD) + _PAD
    sheet = Image.new("RGB", (width, height), _BACKGROUND)
    draw = ImageDraw.Draw(sheet)

    for ci, gender in enumerate(cols):
        x = _LABEL_W + ci * len(PANELS) * (tile + _PAD) + _PAD
        draw.text((x, 1), f"gender {gender}", fill=(0, 0, 0))

    for ri, age in enumerate(rows):
        y = _HEADER_H + ri * (tile + _PAD) + _PAD
        draw.text((2, y + tile // 2 - 5), age, fill=(0, 0, 0))
        for ci, gender in enumerate(cols):
            panels: Dict[str, np.ndarray] = dict(cells.get((age, gender), {}))
            for pi, name in enumerate(PANELS):
                x = _LABEL_W + (ci * len(PANELS) + pi) * (tile + _PAD) + _PAD
                if name in panels:
                    sheet.paste(Image.fromarray(to_uint8(panels[name])), (x, y))
                else:
                    draw.rectangle([x, y, x + tile - 1, y + tile - 1], fill=_EMPTY)
    return sheet
