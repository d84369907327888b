"""Procedural face-sprite corpora with exact ground truth.

Every face is drawn with Pillow from a `FaceSpec`; landmarks, the dental
region and the head box come straight from the drawing geometry, so every
downstream stage can be checked against an oracle.

Visual analogs of the demographic axes:
- age: head size, eye size, hair cap/fringe, forehead wrinkle lines, gray hair
- gender: eye spacing and brow shape (straight/thick vs arched/thin)
- race: skin tone band
Dental axes: jaw width (lower face outline and mouth width), lip thickness,
tooth count and the gap between teeth (visible only when smiling).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw

import db
from errors import ArgumentError, ConfigurationError
from services.config import SUPPORTED_RESOLUTIONS
from utils.image_core import (
    RegionSpec,
    estimate_similarity_transform,
    transform_region,
    warp_image,
)
from utils.imageio import from_uint8, load_png, save_png
from utils.training import derive_seed, progress

logger = logging.getLogger(__name__)

AGE_GROUPS = ("Child", "Teenager", "Adult", "Senior")
GENDER_CLASSES = ("A", "B")
DEFAULT_RACE_CLASSES = 3
FACE_DISTRIBUTIONS = ("base", "clinic")
TEXTURE_DISTRIBUTION = "texture"

# Clinic-style dental parameters (applied by shift_distribution).
CLINIC_MIN_TOOTH_GAP = 0.12
CLINIC_MIN_LIP_THICKNESS = 0.04

TOOTH_COLOR = (238, 236, 228)
TOOTH_TOLERANCE = 12
_MOUTH_COLOR = (70, 22, 28)
_LIP_COLOR = (172, 68, 78)
_EYE_COLOR = (28, 26, 36)
_HAIR_COLOR = (62, 42, 30)
_GRAY_HAIR = (168, 168, 172)
_SKIN_LIGHT = np.array([236, 202, 174], dtype=np.float64)
_SKIN_DARK = np.array([100, 66, 46], dtype=np.float64)
# Per-channel skin jitter around the race tone.
SKIN_JITTER = 3.0

_AGE_SCALE = {"Child": 0.80, "Teenager": 0.90, "Adult": 1.0, "Senior": 1.0}
# Hair cap chord angles (Pillow degrees, clockwise from 3 o'clock).
_HAIR_CHORD = {"Child": (229, 311), "Teenager": (200, 340), "Adult": (229, 311), "Senior": (229, 311)}
_WRINKLES = {"Child": (), "Teenager": (), "Adult": (-0.50,), "Senior": (-0.62, -0.50, -0.38)}
_EYE_SPACING = {"A": 0.36, "B": 0.46}


# ----------------------------
# Types
# ----------------------------

@dataclass(frozen=True)
class FaceSpec:
    identity_seed: int
    gender_class: str
    age_group: str
    race_class: int
    smiling: bool
    jaw_width: float
    lip_thickness: float
    tooth_count: int
    tooth_gap: float

    def validate(self, race_classes: int = DEFAULT_RACE_CLASSES) -> "FaceSpec":
        problems = []
        if self.identity_seed < 0:
            problems.append("identity_seed must be >= 0")
        if self.gender_class not in GENDER_CLASSES:
            problems.append(f"gender_class {self.gender_class!r} not in {GENDER_CLASSES}")
        if self.age_group not in AGE_GROUPS:
            problems.append(f"age_group {self.age_group!r} not in {AGE_GROUPS}")
        if not 0 <= self.race_class < race_classes:
            problems.append(f"race_class {self.race_class} outside 0..{race_classes - 1}")
        if not 0.5 <= self.jaw_width <= 1.0:
            problems.append(f"jaw_width {self.jaw_width} outside [0.5, 1.0]")
        if not 0.02 <= self.lip_thickness <= 0.08:
            problems.append(f"lip_thickness {self.lip_thickness} outside [0.02, 0.08]")
        if not 4 <= self.tooth_count <= 8:
            problems.append(f"tooth_count {self.tooth_count} outside [4, 8]")
        if not 0.0 <= self.tooth_gap <= 0.3:
            problems.append(f"tooth_gap {self.tooth_gap} outside [0, 0.3]")
        if problems:
            raise ArgumentError("invalid FaceSpec: " + "; ".join(problems))
        return self

    def attribute(self, name: str) -> str:
        """Label for an attribute classifier: gender, age or race."""
        if name == "gender":
            return self.gender_class
        if name == "age":
            return self.age_group
        if name == "race":
            return str(self.race_class)
        raise ArgumentError(f"unknown attribute {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FaceSpec":
        return cls(
            identity_seed=int(data["identity_seed"]),
            gender_class=str(data["gender_class"]),
            age_group=str(data["age_group"]),
            race_class=int(data["race_class"]),
            smiling=bool(data["smiling"]),
            jaw_width=float(data["jaw_width"]),
            lip_thickness=float(data["lip_thickness"]),
            tooth_count=int(data["tooth_count"]),
            tooth_gap=float(data["tooth_gap"]),
        )


@dataclass(frozen=True)
class RenderedFace:
    image: np.ndarray
    landmarks: np.ndarray
    dental_region: RegionSpec
    face_box: RegionSpec
    labels: FaceSpec


@dataclass(frozen=True)
class CorpusEntry:
    file: str
    labels: Optional[FaceSpec] = None
    landmarks: Optional[np.ndarray] = None
    dental_region: Optional[RegionSpec] = None
    face_box: Optional[RegionSpec] = None

    def to_dict(self) -> dict:
        return {
            "file": self.file,
            "labels": self.labels.to_dict() if self.labels else None,
            "landmarks": ([[round(float(x), 6), round(float(y), 6)] for x, y in self.landmarks]
                          if self.landmarks is not None else None),
            "dental_region": self.dental_region.as_list() if self.dental_region else None,
            "face_box": self.face_box.as_list() if self.face_box else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusEntry":
        return cls(
            file=data["file"],
            labels=FaceSpec.from_dict(data["labels"]) if data.get("labels") else None,
            landmarks=(np.asarray(data["landmarks"], dtype=np.float64)
                       if data.get("landmarks") is not None else None),
            dental_region=RegionSpec.from_list(data["dental_region"]) if data.get("dental_region") else None,
            face_box=RegionSpec.from_list(data["face_box"]) if data.get("face_box") else None,
        )


@dataclass
class CorpusManifest:
    seed: int
    count: int
    resolution: int
    distribution_name: str
    entries: List[CorpusEntry]
    race_classes: int = DEFAULT_RACE_CLASSES
    root: Path = field(default=Path("."), compare=False)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def image_path(self, entry: CorpusEntry) -> Path:
        return self.root / entry.file

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "count": self.count,
            "resolution": self.resolution,
            "distribution_name": self.distribution_name,
            "race_classes": self.race_classes,
            "entries": [e.to_dict() for e in self.entries],
        }

    def fingerprint(self) -> str:
        return db.sha256_hex(db.canonical_json(self.to_dict()).encode("utf-8"))

    def has_landmarks(self) -> bool:
        return bool(self.entries) and all(e.landmarks is not None for e in self.entries)


@dataclass
class CorpusArrays:
    """Corpus pixels and ground truth loaded into memory (optionally aligned)."""

    images: np.ndarray
    labels: List[Optional[FaceSpec]]
    landmarks: Optional[np.ndarray] = None
    dental_regions: Optional[List[RegionSpec]] = None
    face_boxes: Optional[List[RegionSpec]] = None


# ----------------------------
# Sampling
# ----------------------------

def _check_distribution(distribution: str) -> None:
    if distribution not in FACE_DISTRIBUTIONS:
        raise ConfigurationError(
            f"unknown distribution {distribution!r}; expected one of {FACE_DISTRIBUTIONS}"
        )


def _check_resolution(resolution: int) -> None:
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ConfigurationError(
            f"unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS}"
        )


def face_spec_from_seed(identity_seed: int, distribution: str = "base",
                        race_classes: int = DEFAULT_RACE_CLASSES) -> FaceSpec:
    """The FaceSpec for an identity seed. Base and clinic specs of one seed share
    every field except the dental ones."""
    _check_distribution(distribution)
    rng = np.random.default_rng(int(identity_seed))
    gender = GENDER_CLASSES[int(rng.integers(len(GENDER_CLASSES)))]
    age = AGE_GROUPS[int(rng.integers(len(AGE_GROUPS)))]
    race = int(rng.integers(race_classes))
    smiling = bool(rng.random() < 0.5)
    jaw = float(rng.uniform(0.5, 1.0))
    lip = float(rng.uniform(0.02, 0.08))
    teeth = int(rng.integers(4, 9))
    u = float(rng.random())
    # base skews toward tight teeth, clinic toward gapped teeth (inverse-CDF shaping)
    gap = 0.3 * (u ** 2.5 if distribution == "base" else u ** 0.6)
    if distribution == "clinic":
        lip = max(lip, float(rng.uniform(0.03, 0.08)))
    return FaceSpec(
        identity_seed=int(identity_seed),
        gender_class=gender,
        age_group=age,
        race_class=race,
        smiling=smiling,
        jaw_width=jaw,
        lip_thickness=lip,
        tooth_count=teeth,
        tooth_gap=float(min(gap, 0.3)),
    )


def sample_face_spec(rng: np.random.Generator, distribution: str = "base",
                     race_classes: int = DEFAULT_RACE_CLASSES) -> FaceSpec:
    _check_distribution(distribution)
    identity_seed = int(rng.integers(0, 2 ** 31 - 1))
    return face_spec_from_seed(identity_seed, distribution, race_classes)


def shift_distribution(base_spec: FaceSpec) -> FaceSpec:
    """Clamp dental parameters into the clinic range; idempotent."""
    return replace(
        base_spec,
        tooth_gap=max(base_spec.tooth_gap, CLINIC_MIN_TOOTH_GAP),
        lip_thickness=max(base_spec.lip_thickness, CLINIC_MIN_LIP_THICKNESS),
    )


# ----------------------------
# Rendering
# ----------------------------

def skin_color(race_class: int, race_classes: int = DEFAULT_RACE_CLASSES) -> np.ndarray:
    t = race_class / max(race_classes - 1, 1)
    return (1 - t) * _SKIN_LIGHT + t * _SKIN_DARK


def _rgb(values) -> tuple:
    return tuple(int(np.clip(round(float(v)), 0, 255)) for v in values)


def _geometry(spec: FaceSpec, resolution: int, offset=(0, 0), eye_spacing: float | None = None):
    r = float(resolution)
    s = _AGE_SCALE[spec.age_group]
    cx = r / 2 + offset[0]
    cy = 0.48 * r + offset[1]
    a = 0.30 * r * s
    b = 0.40 * r * s
    e = _EYE_SPACING[spec.gender_class] if eye_spacing is None else eye_spacing
    mw = 0.75 * spec.jaw_width * a
    y_e = cy - 0.05 * b
    y_m = cy + 0.45 * b
    landmarks = np.array(
        [[cx - e * a, y_e], [cx + e * a, y_e], [cx, cy + 0.2 * b],
         [cx - mw, y_m], [cx + mw, y_m]],
        dtype=np.float64,
    )
    return {"cx": cx, "cy": cy, "a": a, "b": b, "e": e, "mw": mw, "y_e": y_e, "y_m": y_m,
            "lt": max(spec.lip_thickness * r, 1.0), "landmarks": landmarks}


def canonical_landmarks(resolution: int) -> np.ndarray:
    """Landmarks of the canonical frame: an adult face with mean eye spacing and
    mid jaw width, centred. Mouth corners are symmetric about the midline."""
    ref = FaceSpec(0, "A", "Adult", 0, False, 0.75, 0.05, 6, 0.0)
    spacing = float(np.mean(list(_EYE_SPACING.values())))
    return _geometry(ref, resolution, eye_spacing=spacing)["landmarks"]


def render_face(spec: FaceSpec, resolution: int = 64, offset: tuple[int, int] = (0, 0),
                race_classes: int = DEFAULT_RACE_CLASSES) -> RenderedFace:
    """Draw one face sprite. Pure function of (spec, resolution, offset)."""
    _check_resolution(resolution)
    spec.validate(race_classes)
    g = _geometry(spec, resolution, offset)
    cx, cy, a, b, mw, y_m, lt = g["cx"], g["cy"], g["a"], g["b"], g["mw"], g["y_m"], g["lt"]

    look = np.random.default_rng([spec.identity_seed, 1])
    bg = _rgb(look.integers(110, 200, 3))
    skin = skin_color(spec.race_class, race_classes) + look.uniform(-SKIN_JITTER, SKIN_JITTER, 3)
    skin_rgb = _rgb(skin)
    shade = _rgb(skin * 0.78)
    hair = _GRAY_HAIR if spec.age_group == "Senior" else _rgb(np.array(_HAIR_COLOR) + look.uniform(-8, 8, 3))

    img = Image.new("RGB", (resolution, resolution), bg)
    draw = ImageDraw.Draw(img)

    # head: upper ellipse + jaw polygon shaped by jaw_width
    head_box = [cx - a, cy - b, cx + a, cy + b]
    draw.pieslice(head_box, 180, 360, fill=skin_rgb)
    jaw_x = a * (0.6 + 0.4 * spec.jaw_width)
    chin_x = 0.3 * spec.jaw_width * a
    draw.polygon(
        [(cx - a, cy), (cx + a, cy), (cx + jaw_x, cy + 0.8 * b), (cx + chin_x, cy + b),
         (cx - chin_x, cy + b), (cx - jaw_x, cy + 0.8 * b)],
        fill=skin_rgb,
    )
    start, end = _HAIR_CHORD[spec.age_group]
    draw.chord(head_box, start, end, fill=hair)

    for dy in _WRINKLES[spec.age_group]:
        y = cy + dy * b
        draw.line([(cx - 0.35 * a, y), (cx + 0.35 * a, y)], fill=shade, width=1)

    # eyes and brows
    eye_r = max((0.13 if spec.age_group == "Child" else 0.09) * a, 1.0)
    for ex, ey in g["landmarks"][:2]:
        draw.ellipse([ex - eye_r, ey - eye_r, ex + eye_r, ey + eye_r], fill=_EYE_COLOR)
        by = ey - 0.2 * b
        brow = _rgb(np.array(hair) * 0.8)
        if spec.gender_class == "A":
            draw.line([(ex - 0.16 * a, by), (ex + 0.16 * a, by)], fill=brow, width=max(int(round(0.06 * a)), 1))
        else:
            draw.arc([ex - 0.16 * a, by - 0.04 * b, ex + 0.16 * a, by + 0.10 * b], 200, 340, fill=brow, width=1)

    # nose
    draw.polygon([(cx, cy + 0.05 * b), (cx - 0.08 * a, cy + 0.24 * b), (cx + 0.08 * a, cy + 0.24 * b)], fill=shade)

    # mouth
    if spec.smiling:
        hm = 0.35 * mw
        draw.ellipse([cx - mw, y_m - hm - lt, cx + mw, y_m + hm + lt], fill=_LIP_COLOR)
        inner_w = max(mw - lt, 1.0)
        draw.ellipse([cx - inner_w, y_m - hm, cx + inner_w, y_m + hm], fill=_MOUTH_COLOR)
        span = 1.8 * inner_w
        gaps = spec.tooth_gap * 2 * mw
        gaps = min(gaps, 0.6 * span)
        tooth_w = (span - gaps) / spec.tooth_count
        gap_w = gaps / max(spec.tooth_count - 1, 1)
        x = cx - span / 2
        top, bottom = y_m - 0.8 * hm, y_m + 0.1 * hm
        for _ in range(spec.tooth_count):
            draw.rectangle([x, top, max(x + tooth_w - 1, x), bottom], fill=TOOTH_COLOR)
            x += tooth_w + gap_w
    else:
        draw.ellipse([cx - mw, y_m - lt / 2 - 0.5, cx + mw, y_m + lt / 2 + 0.5], fill=_LIP_COLOR)
        draw.line([(cx - mw, y_m), (cx + mw, y_m)], fill=_MOUTH_COLOR, width=1)

    vh = 0.35 * mw + lt + 1.0
    dental = RegionSpec.covering(cx - 1.15 * mw, y_m - vh, cx + 1.15 * mw, y_m + vh, resolution, resolution)
    face_box = RegionSpec.covering(cx - a, cy - b, cx + a, cy + b, resolution, resolution)
    image = from_uint8(np.asarray(img, dtype=np.uint8))
    return RenderedFace(image=image, landmarks=g["landmarks"], dental_region=dental,
                        face_box=face_box, labels=spec)


def render_texture(seed: int, resolution: int = 64) -> np.ndarray:
    """A face-free procedural image: uniform gray, uniform noise, stripes, blobs or a gradient."""
    _check_resolution(resolution)
    rng = np.random.default_rng(int(seed))
    kind = int(seed) % 5
    if kind == 0:
        level = int(rng.integers(40, 216))
        arr = np.full((resolution, resolution, 3), level, dtype=np.uint8)
    elif kind == 1:
        arr = rng.integers(0, 256, (resolution, resolution, 3)).astype(np.uint8)
    elif kind == 2:
        period = int(rng.integers(3, 12))
        c1, c2 = rng.integers(0, 256, 3), rng.integers(0, 256, 3)
        coords = np.arange(resolution)
        band = ((coords[:, None] + (coords[None, :] if rng.random() < 0.5 else 0)) // period) % 2
        band = np.broadcast_to(band, (resolution, resolution))
        arr = np.where(band[..., None] == 1, c1, c2).astype(np.uint8)
    elif kind == 3:
        img = Image.new("RGB", (resolution, resolution), _rgb(rng.integers(0, 256, 3)))
        draw = ImageDraw.Draw(img)
        for _ in range(int(rng.integers(3, 9))):
            x0, y0 = rng.uniform(0, resolution, 2)
            w, h = rng.uniform(resolution * 0.05, resolution * 0.4, 2)
            draw.ellipse([x0, y0, x0 + w, y0 + h], fill=_rgb(rng.integers(0, 256, 3)))
        arr = np.asarray(img, dtype=np.uint8)
    else:
        c1, c2 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
        t = np.linspace(0, 1, resolution)[None, :, None]
        arr = np.broadcast_to((1 - t) * c1 + t * c2, (resolution, resolution, 3)).round().astype(np.uint8)
    return from_uint8(arr)


# ----------------------------
# Corpora
# ----------------------------

def _face_entry(index: int, seed: int, distribution: str, resolution: int, out: Path,
                race_classes: int) -> CorpusEntry:
    rng = np.random.default_rng(derive_seed(seed, index))
    spec = sample_face_spec(rng, distribution, race_classes)
    face = render_face(spec, resolution, race_classes=race_classes)
    name = f"face_{index:06}.png"
    save_png(face.image, out / name)
    return CorpusEntry(file=name, labels=spec, landmarks=face.landmarks,
                       dental_region=face.dental_region, face_box=face.face_box)


def _write_corpus(entries_fn, count: int, seed: int, distribution: str, resolution: int,
                  output_path, workers: int, race_classes: int) -> CorpusManifest:
    out = Path(output_path)
    out.mkdir(parents=True, exist_ok=True)
    # per-entry seeds derive from (seed, index), so sharding never changes bytes
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(progress(pool.map(entries_fn, range(count)), total=count, desc=distribution))
    else:
        entries = [entries_fn(i) for i in progress(range(count), total=count, desc=distribution)]
    manifest = CorpusManifest(seed=seed, count=count, resolution=resolution,
                              distribution_name=distribution, entries=entries,
                              race_classes=race_classes, root=out)
    db.write_json(manifest.manifest_path, manifest.to_dict())
    logger.info(f"Wrote {count} {distribution} images ({resolution}px) to {out}")
    return manifest


def generate_dataset(count: int, seed: int, distribution: str, resolution: int, output_path,
                     workers: int = 1, race_classes: int = DEFAULT_RACE_CLASSES) -> CorpusManifest:
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    _check_distribution(distribution)
    _check_resolution(resolution)
    out = Path(output_path)
    return _write_corpus(
        lambda i: _face_entry(i, seed, distribution, resolution, out, race_classes),
        count, seed, distribution, resolution, out, workers, race_classes,
    )


def generate_negatives(count: int, seed: int, resolution: int, output_path,
                       workers: int = 1) -> CorpusManifest:
    """Face-free texture corpus for detector training (entries carry no landmarks)."""
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    _check_resolution(resolution)
    out = Path(output_path)

    def make(index: int) -> CorpusEntry:
        name = f"texture_{index:06}.png"
        save_png(render_texture(derive_seed(seed, index) * 5 + index % 5, resolution), out / name)
        return CorpusEntry(file=name)

    return _write_corpus(make, count, seed, TEXTURE_DISTRIBUTION, resolution, out, workers,
                         DEFAULT_RACE_CLASSES)


def load_manifest(path) -> CorpusManifest:
    """Read a corpus manifest (directory or manifest.json path) and check its files."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {manifest_path}")
    data = db.read_json(manifest_path)
    manifest = CorpusManifest(
        seed=int(data["seed"]),
        count=int(data["count"]),
        resolution=int(data["resolution"]),
        distribution_name=str(data["distribution_name"]),
        entries=[CorpusEntry.from_dict(e) for e in data["entries"]],
        race_classes=int(data.get("race_classes", DEFAULT_RACE_CLASSES)),
        root=manifest_path.parent,
    )
    if len(manifest.entries) != manifest.count:
        raise ArgumentError(f"manifest lists {len(manifest.entries)} entries but count={manifest.count}")
    missing = [e.file for e in manifest.entries if not manifest.image_path(e).exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} corpus files missing, e.g. {missing[0]}")
    return manifest


def load_corpus(manifest: CorpusManifest, aligned: bool = False) -> CorpusArrays:
    """Load corpus pixels; with ``aligned`` each face is warped onto the canonical
    frame using its ground-truth landmarks (regions and landmarks follow)."""
    images = np.stack([load_png(manifest.image_path(e)) for e in manifest.entries]).astype(np.float32)
    labels = [e.labels for e in manifest.entries]
    if not manifest.has_landmarks():
        return CorpusArrays(images=images, labels=labels)
    res = manifest.resolution
    landmarks = np.stack([e.landmarks for e in manifest.entries])
    dental = [e.dental_region for e in manifest.entries]
    boxes = [e.face_box for e in manifest.entries]
    if aligned:
        template = canonical_landmarks(res)
        for i in range(len(images)):
            t = estimate_similarity_transform(landmarks[i], template)
            images[i] = warp_image(images[i], t, res, res)
            landmarks[i] = t.apply(landmarks[i])
            dental[i] = transform_region(dental[i], t, res, res)
            if boxes[i] is not None:
                boxes[i] = transform_region(boxes[i], t, res, res)
    return CorpusArrays(images=images, labels=labels, landmarks=landmarks,
                        dental_regions=dental, face_boxes=boxes)


# ----------------------------
# Sprite analysis
# ----------------------------

def tooth_pixel_mask(image: np.ndarray, tolerance: int = TOOTH_TOLERANCE) -> np.ndarray:
    """Pixels whose 8-bit colour lies within ``tolerance`` of the tooth colour."""
    px = np.rint((np.clip(image, -1, 1) + 1.0) * 127.5)
    return np.all(np.abs(px - np.array(TOOTH_COLOR)) <= tolerance, axis=-1)


def tooth_gap_proxy(image: np.ndarray, region: RegionSpec, tolerance: int = 30) -> float:
    """Fraction of non-tooth pixels between the outermost teeth on the fullest tooth row.

    Returns 0.0 when no teeth are visible in the region.
    """
    teeth = tooth_pixel_mask(image, tolerance)[region.y0:region.y1, region.x0:region.x1]
    if not teeth.any():
        return 0.0
    row = teeth[int(np.argmax(teeth.sum(axis=1)))]
    cols = np.flatnonzero(row)
    span = row[cols[0]:cols[-1] + 1]
    return float(1.0 - span.mean())
