"""Pixel algebra shared by every stage: regions, masks, stitching, masked metrics
and landmark-based similarity alignment.

Conventions
-----------
- ImageTensor: ``np.ndarray`` of shape (H, W, 3), values in [-1, 1].
- RegionMask: ``np.ndarray`` of shape (H, W), weights in [0, 1].
- LandmarkSet: ``np.ndarray`` of shape (5, 2), (x, y) pixel coordinates in the
  order of ``LANDMARK_NAMES``. Pixel centres sit on integer coordinates.

All functions are pure; inputs are never modified in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from errors import ArgumentError, NumericalError

ImageTensor = np.ndarray
RegionMask = np.ndarray
LandmarkSet = np.ndarray

LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "left_mouth", "right_mouth")
LEFT_MOUTH, RIGHT_MOUTH = 3, 4

# Peak-to-peak range of [-1, 1] is 2, so MAX^2 = 4.
_PSNR_PEAK_SQ = 4.0
PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class RegionSpec:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    def validate(self, height: int, width: int) -> "RegionSpec":
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ArgumentError(
                f"region {self.as_list()} is not a valid rectangle inside {width}x{height}"
            )
        return self

    def contains_point(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def contains(self, other: "RegionSpec") -> bool:
        return (
            self.x0 <= other.x0 and self.y0 <= other.y0
            and other.x1 <= self.x1 and other.y1 <= self.y1
        )

    def intersection_area(self, other: "RegionSpec") -> int:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(w, 0) * max(h, 0)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, values) -> "RegionSpec":
        x0, y0, x1, y1 = (int(v) for v in values)
        return cls(x0, y0, x1, y1)

    @classmethod
    def covering(cls, x_min: float, y_min: float, x_max: float, y_max: float,
                 height: int, width: int) -> "RegionSpec":
        """Smallest rectangle holding every pixel whose centre lies in the box.

        A degenerate (zero-width or zero-height) box still keeps one
        column/row. The result is clamped to the image.
        """
        x0 = max(int(math.floor(x_min)), 0)
        y0 = max(int(math.floor(y_min)), 0)
        x1 = min(int(math.floor(x_max)) + 1, width)
        y1 = min(int(math.floor(y_max)) + 1, height)
        x0 = min(x0, width - 1)
        y0 = min(y0, height - 1)
        return cls(x0, y0, max(x1, x0 + 1), max(y1, y0 + 1))


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = scale * R(rotation) @ p + (tx, ty), image coordinates (y down)."""

    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ArgumentError(f"similarity scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @property
    def translation(self) -> tuple[float, float]:
        return (self.tx, self.ty)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array(
            [[self.scale * c, -self.scale * s, self.tx],
             [self.scale * s, self.scale * c, self.ty]],
            dtype=np.float64,
        )

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x, y = pts[:, 0], pts[:, 1]
        out = np.empty_like(pts)
        out[:, 0] = self.scale * (c * x - s * y) + self.tx
        out[:, 1] = self.scale * (s * x + c * y) + self.ty
        return out

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx = -inv_scale * (c * self.tx - s * self.ty)
        ty = -inv_scale * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_scale, -self.rotation, tx, ty)

    def as_dict(self) -> dict:
        return {"scale": self.scale, "rotation": self.rotation, "tx": self.tx, "ty": self.ty}


# ----------------------------
# Validation helpers
# ----------------------------

def check_image(image: ImageTensor, name: str = "image") -> ImageTensor:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] <= 0 or arr.shape[1] <= 0:
        raise ArgumentError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    return arr


def check_landmarks(points: LandmarkSet, height: int, width: int) -> LandmarkSet:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (5, 2):
        raise ArgumentError(f"landmarks must have shape (5, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ArgumentError("landmarks contain non-finite values")
    if (pts[:, 0].min() < 0 or pts[:, 0].max() > width - 1
            or pts[:, 1].min() < 0 or pts[:, 1].max() > height - 1):
        raise ArgumentError("landmarks fall outside the image bounds")
    return pts


def _check_same_hw(*arrays) -> None:
    shapes = {tuple(np.shape(a)[:2]) for a in arrays}
    if len(shapes) != 1:
        raise ArgumentError(f"spatial dimensions differ: {sorted(shapes)}")


# ----------------------------
# Masks and stitching
# ----------------------------

def make_region_mask(region: RegionSpec, height: int, width: int) -> RegionMask:
    region.validate(height, width)
    mask = np.zeros((height, width), dtype=np.float32)
    mask[region.y0:region.y1, region.x0:region.x1] = 1.0
    return mask


def feather_mask(mask: RegionMask, radius: float) -> RegionMask:
    """Soften a mask outward with a linear ramp of width ``radius`` pixels.

    Each pixel takes max over neighbours q within Euclidean distance ``radius``
    of ``mask[q] * (1 - d / (radius + 1))``. Weights inside the support are
    kept; the ramp reaches zero one pixel beyond ``radius``.
    """
    if radius < 0:
        raise ArgumentError(f"feather radius must be >= 0, got {radius}")
    src = np.asarray(mask)
    if radius == 0:
        return src.copy()
    r = int(math.ceil(radius))
    h, w = src.shape
    padded = np.pad(src.astype(np.float64), r, mode="constant")
    out = src.astype(np.float64).copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d = math.hypot(dx, dy)
            if d == 0 or d > radius:
                continue
            shifted = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            np.maximum(out, shifted * (1.0 - d / (radius + 1.0)), out=out)
    return out.astype(src.dtype if np.issubdtype(src.dtype, np.floating) else np.float32)


def stitch(target: ImageTensor, context: ImageTensor, mask: RegionMask) -> ImageTensor:
    """out = mask * target + (1 - mask) * context, per pixel and channel."""
    target = check_image(target, "target")
    context = check_image(context, "context")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ArgumentError(f"mask must be 2-D, got shape {mask.shape}")
    _check_same_hw(target, context, mask)
    m = mask[..., None]
    return m * target + (1 - m) * context


def mse(a: ImageTensor, b: ImageTensor) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def masked_mse(a: ImageTensor, b: ImageTensor, mask: RegionMask) -> float:
    """sum(mask * (a - b)^2) / (channels * sum(mask))."""
    a = check_image(a, "a").astype(np.float64)
    b = check_image(b, "b").astype(np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    _check_same_hw(a, mask)
    total = float(mask.sum())
    if total <= 0:
        raise ArgumentError("mask is identically zero; masked mean is undefined")
    err = np.sum(mask[..., None] * (a - b) ** 2)
    return float(err / (a.shape[2] * total))


def psnr_from_mse(value: float) -> float:
    if value <= 0:
        return PSNR_CAP_DB
    return float(min(10.0 * math.log10(_PSNR_PEAK_SQ / value), PSNR_CAP_DB))


def masked_psnr(a: ImageTensor, b: ImageTensor, mask: RegionMask) -> float:
    return psnr_from_mse(masked_mse(a, b, mask))


# ----------------------------
# Alignment
# ----------------------------

def estimate_similarity_transform(detected: LandmarkSet, canonical: LandmarkSet) -> SimilarityTransform:
    """Least-squares similarity mapping ``detected`` onto ``canonical``.

    Closed-form orthogonal Procrustes with scale (Umeyama), reflections excluded.
    """
    src = np.asarray(detected, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(canonical, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 2:
        raise ArgumentError(f"landmark sets must match and hold >= 2 points: {src.shape} vs {dst.shape}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    s_c = src - mu_s
    d_c = dst - mu_d
    var_s = float(np.mean(np.sum(s_c ** 2, axis=1)))
    if var_s < 1e-12 or float(np.mean(np.sum(d_c ** 2, axis=1))) < 1e-12:
        raise NumericalError(
            "degenerate landmarks: all points coincide, similarity transform is undefined"
        )

    cov = d_c.T @ s_c / src.shape[0]
    u, sig, vt = np.linalg.svd(cov)
    sign = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = float(np.sum(sig * sign) / var_s)
    t = mu_d - scale * rot @ mu_s
    return SimilarityTransform(
        scale=scale,
        rotation=float(math.atan2(rot[1, 0], rot[0, 0])),
        tx=float(t[0]),
        ty=float(t[1]),
    )


def warp_image(image: ImageTensor, transform: SimilarityTransform,
               out_height: int, out_width: int) -> ImageTensor:
    """Resample ``image`` into an (out_height, out_width) frame.

    ``transform`` maps source coordinates to output coordinates. Bilinear
    sampling; output pixels whose source falls outside the image are -1.
    """
    src = check_image(image).astype(np.float64)
    h, w = src.shape[:2]
    ys, xs = np.mgrid[0:out_height, 0:out_width]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    pts = transform.inverse().apply(grid)
    px, py = pts[:, 0], pts[:, 1]

    eps = 1e-9
    valid = (px >= -eps) & (px <= w - 1 + eps) & (py >= -eps) & (py <= h - 1 + eps)
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]

    val = (
        (1 - fx) * (1 - fy) * src[y0, x0]
        + fx * (1 - fy) * src[y0, x1]
        + (1 - fx) * fy * src[y1, x0]
        + fx * fy * src[y1, x1]
    )
    val[~valid] = -1.0
    out = np.clip(val, -1.0, 1.0).reshape(out_height, out_width, 3)
    return out.astype(np.float32)


def transform_region(region: RegionSpec, transform: SimilarityTransform,
                     height: int, width: int) -> RegionSpec:
    """Axis-aligned box around the transformed corners, clamped to the frame."""
    corners = np.array(
        [[region.x0, region.y0], [region.x1 - 1, region.y0],
         [region.x0, region.y1 - 1], [region.x1 - 1, region.y1 - 1]],
        dtype=np.float64,
    )
    pts = transform.apply(corners)
    return RegionSpec.covering(pts[:, 0].min(), pts[:, 1].min(),
                               pts[:, 0].max(), pts[:, 1].max(), height, width)


def jitter_transform(rng: np.random.Generator, size: int, scale: float, rotation_deg: float,
                     shift: float) -> SimilarityTransform:
    """Random similarity about the frame centre: scale in [1/(1+scale), 1+scale],
    rotation within +-rotation_deg, translation within +-shift * size pixels."""
    s = float(np.exp(rng.uniform(-math.log1p(scale), math.log1p(scale)))) if scale > 0 else 1.0
    theta = math.radians(float(rng.uniform(-rotation_deg, rotation_deg))) if rotation_deg > 0 else 0.0
    dx, dy = (rng.uniform(-shift, shift, 2) * size) if shift > 0 else (0.0, 0.0)
    c = (size - 1) / 2.0
    about_centre = SimilarityTransform(s, theta, 0.0, 0.0).apply([[c, c]])[0]
    return SimilarityTransform(s, theta, c - about_centre[0] + float(dx), c - about_centre[1] + float(dy))
