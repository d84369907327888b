"""Dental region geometry: the landmark-anchored rectangle used at inference time
and the mask-source rules used while training encoders."""

from __future__ import annotations

import logging
from typing import Callable, Tuple

import numpy as np

from errors import ArgumentError, ConfigurationError
from services.synthetic_data import CorpusArrays
from utils.image_core import (
    LEFT_MOUTH,
    RIGHT_MOUTH,
    LandmarkSet,
    RegionMask,
    RegionSpec,
    check_landmarks,
    feather_mask,
    make_region_mask,
)

logger = logging.getLogger(__name__)

DEFAULT_MARGINS = (0.25, 0.60)
MASK_SOURCES = ("dental_region", "landmarks")

MaskSource = Callable[[CorpusArrays, int], RegionMask]


def derive_dental_mask(landmarks: LandmarkSet, margins: Tuple[float, float] = DEFAULT_MARGINS,
                       resolution: int = 64, feather_radius: float = 2.0) -> Tuple[RegionSpec, RegionMask]:
    """Rectangle around the mouth corners, widened by ``h * span`` on each side and
    reaching ``v * span`` above and below the corners' midline, clamped to the frame;
    mask is its feathered indicator.

    ``span`` is the distance between the two mouth corners. Both corners always stay
    inside, even for a steeply tilted mouth and a small ``v``. A zero-height box keeps
    one pixel row.
    """
    pts = check_landmarks(landmarks, resolution, resolution)
    h, v = (float(m) for m in margins)
    if h < 0 or v < 0:
        raise ArgumentError(f"dental margins must be >= 0, got {margins}")
    corners = pts[[LEFT_MOUTH, RIGHT_MOUTH]]
    span = float(np.hypot(*(corners[1] - corners[0])))
    if span < 1e-9:
        raise ArgumentError("degenerate landmarks: mouth corners coincide (zero mouth span)")
    x_min, y_min = corners.min(axis=0)
    x_max, y_max = corners.max(axis=0)
    y_mid = float(corners[:, 1].mean())
    top = min(y_mid - v * span, y_min)
    bottom = max(y_mid + v * span, y_max)
    region = RegionSpec.covering(x_min - h * span, top, x_max + h * span, bottom, resolution, resolution)
    mask = feather_mask(make_region_mask(region, resolution, resolution), feather_radius)
    return region, mask


def mask_source_rule(name: str, resolution: int, margins: Tuple[float, float] = DEFAULT_MARGINS,
                     feather_radius: float = 2.0) -> MaskSource:
    """Rule mapping (corpus arrays, entry index) -> training RegionMask.

    ``dental_region`` uses the renderer's ground-truth region; ``landmarks`` applies
    the inference-time geometry to the ground-truth landmarks.
    """
    if name == "dental_region":
        def from_region(arrays: CorpusArrays, index: int) -> RegionMask:
            if arrays.dental_regions is None:
                raise ArgumentError("corpus carries no dental regions")
            region = arrays.dental_regions[index]
            return feather_mask(make_region_mask(region, resolution, resolution), feather_radius)
        return from_region
    if name == "landmarks":
        def from_landmarks(arrays: CorpusArrays, index: int) -> RegionMask:
            if arrays.landmarks is None:
                raise ArgumentError("corpus carries no landmarks")
            return derive_dental_mask(arrays.landmarks[index], margins, resolution, feather_radius)[1]
        return from_landmarks
    raise ConfigurationError(f"unknown mask source {name!r}; expected one of {MASK_SOURCES}")
