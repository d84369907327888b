"""Face presence, box and 5-point landmarks from one multi-head network, plus
alignment of detected faces onto the canonical template.

Box and landmark heads predict coordinates normalized to [0, 1] (sigmoid);
`detect` scales them back to pixels and clamps to the frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import db
from errors import ArgumentError, NonFiniteLossError, PreconditionError
from services.config import DetectorTrainConfig
from services.synthetic_data import CorpusManifest, canonical_landmarks, load_corpus
from utils.image_core import (
    LEFT_MOUTH,
    RIGHT_MOUTH,
    ImageTensor,
    LandmarkSet,
    RegionSpec,
    SimilarityTransform,
    check_image,
    estimate_similarity_transform,
    jitter_transform,
    transform_region,
    warp_image,
)
from utils.layers import LRELU_SLOPE, ConvTrunk
from utils.training import (
    all_finite,
    derive_seed,
    diagnostics_dir,
    gradients,
    log_history_row,
    progress,
    seed_everything,
    to_nchw,
    torch_generator,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "detector"
HISTORY_COLUMNS = ["step", "presence_loss", "box_loss", "landmark_loss", "total"]
COORD_SCALE = 10.0


@dataclass(frozen=True)
class CanonicalTemplate:
    resolution: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (5, 2):
            raise ArgumentError(f"template must hold 5 points, got {pts.shape}")

    @classmethod
    def for_resolution(cls, resolution: int) -> "CanonicalTemplate":
        return cls(resolution, canonical_landmarks(resolution))

    @property
    def mouth_midline(self) -> float:
        return float((self.points[LEFT_MOUTH, 0] + self.points[RIGHT_MOUTH, 0]) / 2)

    def as_list(self) -> list:
        return [[float(x), float(y)] for x, y in self.points]


@dataclass(frozen=True)
class DetectionResult:
    face_present: bool
    confidence: float
    bbox: Optional[RegionSpec] = None
    landmarks: Optional[LandmarkSet] = None

    def summary(self) -> dict:
        return {
            "face_present": self.face_present,
            "confidence": self.confidence,
            "bbox": self.bbox.as_list() if self.bbox else None,
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks] if self.landmarks is not None else None,
        }


class Detector(nn.Module):
    """Residual trunk with presence (1), box (4) and landmark (10) heads."""

    def __init__(self, resolution: int, channels: int = 16, hidden: int = 64):
        super().__init__()
        self.resolution = resolution
        self.trunk = ConvTrunk(resolution, channels, residual=True)
        self.fc = nn.Linear(self.trunk.out_features, hidden)
        self.presence = nn.Linear(hidden, 1)
        self.box = nn.Linear(hidden, 4)
        self.landmarks = nn.Linear(hidden, 10)

    def forward(self, x: torch.Tensor):
        h = F.leaky_relu(self.fc(self.trunk(x)), LRELU_SLOPE)
        return self.presence(h).squeeze(1), torch.sigmoid(self.box(h)), torch.sigmoid(self.landmarks(h))


@dataclass
class DetectorCheckpoint:
    config: DetectorTrainConfig
    detector: Detector
    template: CanonicalTemplate
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return self.detector.resolution

    def fingerprint(self) -> str:
        return db.sha256_hex(db.modules_checksum({"detector": self.detector}).encode("utf-8"),
                             db.canonical_json(self.template.as_list()).encode("utf-8"))

    def save(self, path: str | Path) -> Path:
        manifest = {
            "config": self.config.model_dump(mode="json"),
            "resolution": self.resolution,
            "step": self.step,
            "template": self.template.as_list(),
            "metrics": self.metrics,
            "fingerprint": self.fingerprint(),
        }
        return db.save_checkpoint(path, CHECKPOINT_KIND, {"detector": self.detector}, manifest,
                                  self.history, HISTORY_COLUMNS)

    @classmethod
    def load(cls, path: str | Path) -> "DetectorCheckpoint":
        archive = db.load_checkpoint(path, CHECKPOINT_KIND)
        m = archive.manifest
        config = DetectorTrainConfig(**m["config"])
        res = int(m["resolution"])
        detector = Detector(res, config.channels, config.hidden)
        db.load_module_arrays(detector, "detector", archive.arrays)
        return cls(config=config, detector=detector,
                   template=CanonicalTemplate(res, np.asarray(m["template"], dtype=np.float64)),
                   step=int(m["step"]), history=db.archive_history(archive), metrics=dict(m.get("metrics", {})))


# ----------------------------
# Training
# ----------------------------

def _split(count: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(count)
    n_hold = int(round(count * fraction)) if count > 1 else 0
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def _targets(landmarks: np.ndarray, box: RegionSpec, res: int) -> np.ndarray:
    """[x0, y0, x1, y1, x_1, y_1, ..., x_5, y_5] normalized by the frame size."""
    b = np.array([box.x0, box.y0, box.x1, box.y1], dtype=np.float64) / res
    lm = np.asarray(landmarks, dtype=np.float64).ravel() / (res - 1)
    return np.concatenate([b, lm])


def _jittered(image, landmarks, box, config: DetectorTrainConfig, rng: np.random.Generator, res: int):
    t = jitter_transform(rng, res, config.jitter_scale, config.jitter_rotation_deg, config.jitter_shift)
    if landmarks is not None:
        moved = t.apply(landmarks)
        if moved.min() < 0 or moved.max() > res - 1:
            return image, landmarks, box
        return warp_image(image, t, res, res), moved, transform_region(box, t, res, res)
    return warp_image(image, t, res, res), None, None


def detection_loss(presence_logits, boxes, points, labels, targets):
    """BCE presence loss plus smooth-L1 losses on COORD_SCALE-scaled coordinates of positives."""
    presence = F.binary_cross_entropy_with_logits(presence_logits, labels)
    pos = labels > 0.5
    if bool(pos.any()):
        box = F.smooth_l1_loss(boxes[pos] * COORD_SCALE, targets[pos, :4] * COORD_SCALE)
        lm = F.smooth_l1_loss(points[pos] * COORD_SCALE, targets[pos, 4:] * COORD_SCALE)
    else:
        box = lm = presence.new_zeros(())
    return presence, box, lm


def train_detector(corpus: CorpusManifest, negatives: CorpusManifest,
                   config: DetectorTrainConfig) -> DetectorCheckpoint:
    if not corpus.entries or not negatives.entries:
        raise ArgumentError("detector training needs non-empty face and negative corpora")
    if not corpus.has_landmarks():
        raise ArgumentError("face corpus carries no landmarks")
    if negatives.resolution != corpus.resolution:
        raise ArgumentError("face and negative corpora differ in resolution")
    res = corpus.resolution

    seed_everything(config.seed)
    torch.manual_seed(config.seed)
    ckpt = DetectorCheckpoint(config=config, detector=Detector(res, config.channels, config.hidden),
                              template=CanonicalTemplate.for_resolution(res))
    faces = load_corpus(corpus)
    negs = load_corpus(negatives)
    rng = np.random.default_rng(derive_seed(config.seed, 3))
    pos_train, pos_hold = _split(len(faces.images), config.holdout_fraction, rng)
    neg_train, neg_hold = _split(len(negs.images), config.holdout_fraction, rng)
    gen = torch_generator(derive_seed(config.seed, 4))
    opt = torch.optim.Adam(ckpt.detector.parameters(), lr=config.lr)
    n_pos = config.batch_size // 2
    n_neg = config.batch_size - n_pos

    logger.info(f"Training detector on {len(pos_train)} faces + {len(neg_train)} negatives for {config.steps} steps")
    for _ in progress(range(config.steps), total=config.steps, desc="detector"):
        pi = pos_train[torch.randint(len(pos_train), (n_pos,), generator=gen).numpy()]
        ni = neg_train[torch.randint(len(neg_train), (n_neg,), generator=gen).numpy()]
        images, targets = [], []
        for i in pi:
            img, lm, box = _jittered(faces.images[i], faces.landmarks[i], faces.face_boxes[i], config, rng, res)
            images.append(img)
            targets.append(_targets(lm, box, res))
        for i in ni:
            img, _, _ = _jittered(negs.images[i], None, None, config, rng, res)
            images.append(img)
            targets.append(np.zeros(14))
        labels = torch.cat([torch.ones(n_pos), torch.zeros(n_neg)])
        logits, boxes, points = ckpt.detector(to_nchw(np.stack(images)))
        presence, box, lm = detection_loss(logits, boxes, points, labels,
                                           torch.from_numpy(np.stack(targets).astype(np.float32)))
        total = presence + box + lm
        opt.zero_grad(set_to_none=True)
        if all_finite(total):
            total.backward()
        row = {"step": ckpt.step + 1, "presence_loss": float(presence), "box_loss": float(box),
               "landmark_loss": float(lm), "total": float(total)}
        if not all_finite(total, *gradients(ckpt.detector.parameters())):
            path = diagnostics_dir() / f"detector_nonfinite_step{row['step']:06}.zip"
            ckpt.save(path)
            logger.error(f"[detector] non-finite loss at step {row['step']}: {row}; diagnostic checkpoint {path}")
            raise NonFiniteLossError(f"non-finite detector loss at step {row['step']}", checkpoint_path=str(path))
        opt.step()
        ckpt.step += 1
        ckpt.history.append(row)
        log_history_row("detector", row, config.log_every)

    if len(pos_hold) and len(neg_hold):
        ckpt.metrics = evaluate_detector(ckpt, faces.images[pos_hold], faces.landmarks[pos_hold],
                                         negs.images[neg_hold])
        logger.info(f"Detector held-out metrics: {ckpt.metrics}")
    return ckpt


def evaluate_detector(ckpt: DetectorCheckpoint, faces: np.ndarray, landmarks: np.ndarray,
                      negatives: np.ndarray, threshold: float = 0.5) -> Dict[str, float]:
    """Presence accuracy over faces + negatives and mean landmark error (px) on faces."""
    correct = 0
    errors = []
    for img, lm in zip(faces, landmarks):
        result = detect(img, ckpt, threshold)
        correct += int(result.face_present)
        if result.face_present:
            errors.append(float(np.mean(np.linalg.norm(result.landmarks - lm, axis=1))))
    for img in negatives:
        correct += int(not detect(img, ckpt, threshold).face_present)
    total = len(faces) + len(negatives)
    return {
        "presence_accuracy": correct / total if total else 0.0,
        "landmark_error_px": float(np.mean(errors)) if errors else float("nan"),
        "heldout_faces": float(len(faces)),
        "heldout_negatives": float(len(negatives)),
    }


# ----------------------------
# Inference
# ----------------------------

@torch.no_grad()
def detect(image: ImageTensor, ckpt: DetectorCheckpoint, threshold: float = 0.5) -> DetectionResult:
    """Single-face detection; absence is a result, not an error."""
    if not 0.0 < threshold < 1.0:
        raise ArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    img = check_image(image)
    res = ckpt.resolution
    if img.shape[:2] != (res, res):
        raise ArgumentError(f"detector expects {res}x{res} images, got {img.shape[:2]}")
    logit, box, points = ckpt.detector(to_nchw(img))
    confidence = float(torch.sigmoid(logit)[0])
    if confidence < threshold:
        return DetectionResult(face_present=False, confidence=confidence)
    b = box[0].double().numpy() * res
    bbox = RegionSpec.covering(min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]), res, res)
    landmarks = np.clip(points[0].double().numpy().reshape(5, 2) * (res - 1), 0.0, res - 1)
    return DetectionResult(face_present=True, confidence=confidence, bbox=bbox, landmarks=landmarks)


def align_face(image: ImageTensor, detection: DetectionResult,
               template: CanonicalTemplate) -> Tuple[ImageTensor, SimilarityTransform]:
    """Warp the detected face so its landmarks land on the template."""
    if not detection.face_present or detection.landmarks is None:
        raise PreconditionError("no face to align")
    transform = estimate_similarity_transform(detection.landmarks, template.points)
    res = template.resolution
    return warp_image(image, transform, res, res), transform
