"""
services/pipeline.py

De-identification Pipeline
==========================

Wires the trained artifacts into the end-to-end flow:
- Artifact loading and cross-checking (fingerprints, resolutions)
- Single-image de-identification: detect, align, classify, match a context
  identity, derive the dental mask, stitch and invert
- Batch runs with per-item fault isolation and on-disk run records

Outputs stay in the GAN's aligned frame; nothing is pasted back into the
original photograph.
"""

from __future__ import annotations

import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

import db
from errors import ConfigurationError, DeidError, NoFaceError
from services.config import ATTRIBUTE_NAMES, PipelineConfig
from services.dental_mask import derive_dental_mask
from services.face_detect import DetectorCheckpoint, align_face, detect
from services.gan import GanCheckpoint
from services.identity_match import AttributeLabels, ClassifierCheckpoint, ContextDB, classify_attributes
from services.inversion import EncoderCheckpoint, check_compatible, merge_and_invert, reconstruct
from services.synthetic_data import CorpusManifest, FaceSpec, load_manifest
from utils.image_core import ImageTensor
from utils.imageio import load_png, save_png
from utils.metrics import increment_metric, list_timings, timed

logger = logging.getLogger(__name__)

STAGE_TIMINGS = ("detect_ms", "align_ms", "classify_ms", "match_ms", "invert_ms")
ITEM_IMAGES = ("input", "context", "stitched", "output", "reconstruction")
RECORDS_FILE = "records.jsonl"
SUMMARY_FILE = "summary.json"


# ============================================================================
# Artifacts
# ============================================================================

@dataclass
class PipelineArtifacts:
    """Every checkpoint a run needs, loaded once and read-only afterwards."""

    config: PipelineConfig
    gan: GanCheckpoint
    encoder: EncoderCheckpoint
    detector: DetectorCheckpoint
    classifiers: Dict[str, ClassifierCheckpoint]
    context_db: ContextDB

    @property
    def resolution(self) -> int:
        return self.gan.resolution

    def fingerprints(self) -> Dict[str, str]:
        out = {
            "gan": self.gan.fingerprint(),
            "encoder": self.encoder.fingerprint(),
            "detector": self.detector.fingerprint(),
            "context_db": self.context_db.fingerprint(),
        }
        for attr in ATTRIBUTE_NAMES:
            out[f"classifier_{attr}"] = self.classifiers[attr].fingerprint()
        return out


def _require_file(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise ConfigurationError(f"{what} not found: {path}")
    return Path(path)


def validate_artifacts(artifacts: PipelineArtifacts) -> PipelineArtifacts:
    """Cross-check fingerprints and resolutions; raises ConfigurationError."""
    gan = artifacts.gan
    check_compatible(artifacts.encoder, gan)
    if artifacts.context_db.gan_fingerprint != gan.fingerprint():
        raise ConfigurationError("context DB was generated by a different GAN checkpoint")
    res = gan.resolution
    sizes = {"detector": artifacts.detector.resolution, "context DB": artifacts.context_db.resolution}
    for attr in ATTRIBUTE_NAMES:
        clf = artifacts.classifiers.get(attr)
        if clf is None:
            raise ConfigurationError(f"missing {attr} classifier")
        if clf.attribute != attr:
            raise ConfigurationError(f"checkpoint given for {attr} classifies {clf.attribute}")
        sizes[f"{attr} classifier"] = clf.resolution
    mismatched = [f"{name}={value}" for name, value in sizes.items() if value != res]
    if mismatched:
        raise ConfigurationError(f"artifact resolutions differ from the GAN's {res}: {', '.join(mismatched)}")
    return artifacts


def load_artifacts(config: PipelineConfig) -> PipelineArtifacts:
    gan = GanCheckpoint.load(_require_file(config.gan_checkpoint, "GAN checkpoint"))
    encoder = EncoderCheckpoint.load(_require_file(config.encoder_checkpoint, "encoder checkpoint"))
    detector = DetectorCheckpoint.load(_require_file(config.detector_checkpoint, "detector checkpoint"))
    classifiers = {
        attr: ClassifierCheckpoint.load(_require_file(path, f"{attr} classifier checkpoint"))
        for attr, path in config.classifier_checkpoints.items()
        if attr in ATTRIBUTE_NAMES
    }
    context_db = ContextDB.load(_require_file(config.context_db, "context DB"))
    artifacts = validate_artifacts(PipelineArtifacts(config, gan, encoder, detector, classifiers, context_db))
    logger.info(f"Loaded pipeline artifacts at {artifacts.resolution}px "
                f"({len(context_db)} context identities)")
    return artifacts


# ============================================================================
# Records
# ============================================================================

@dataclass
class DeidentifyRecord:
    input_id: str
    status: str  # ok | refused | error
    seed: int
    fingerprints: Dict[str, str]
    timestamp: str
    detection: Optional[Dict[str, Any]] = None
    labels: Optional[Dict[str, Any]] = None
    context_id: Optional[int] = None
    match: Optional[Dict[str, Any]] = None
    dental_region: Optional[List[int]] = None
    feather_radius: float = 0.0
    masked_fidelity: Optional[float] = None
    full_frame_mse: Optional[float] = None
    timings: Dict[str, float] = field(default_factory=dict)
    ground_truth: Optional[Dict[str, Any]] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def deterministic_view(self) -> dict:
        """Record fields that must repeat exactly across identical runs."""
        data = self.to_dict()
        data.pop("timestamp")
        data.pop("timings")
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DeidentifyRecord":
        return cls(**data)


@dataclass
class DeidentifyOutcome:
    """Every image a successful run produces, all in the aligned frame."""

    aligned: ImageTensor
    context: ImageTensor
    stitched: ImageTensor
    output: ImageTensor
    reconstruction: ImageTensor
    record: DeidentifyRecord

    def images(self) -> Dict[str, ImageTensor]:
        return {"input": self.aligned, "context": self.context, "stitched": self.stitched,
                "output": self.output, "reconstruction": self.reconstruction}


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def _as_artifacts(config_or_artifacts: Union[PipelineConfig, PipelineArtifacts]) -> PipelineArtifacts:
    if isinstance(config_or_artifacts, PipelineArtifacts):
        return config_or_artifacts
    return load_artifacts(config_or_artifacts)


# ============================================================================
# Single image
# ============================================================================

def run_deidentify(image: ImageTensor, config_or_artifacts: Union[PipelineConfig, PipelineArtifacts],
                   input_id: str = "input", ground_truth: Optional[FaceSpec] = None) -> DeidentifyOutcome:
    """Full pipeline on one image; raises NoFaceError when detection fails."""
    artifacts = _as_artifacts(config_or_artifacts)
    config = artifacts.config
    res = artifacts.resolution
    timings: Dict[str, float] = {}

    with timed("detect_ms", timings):
        detection = detect(image, artifacts.detector, config.presence_threshold)
    if not detection.face_present:
        increment_metric("deidentify_refused")
        raise NoFaceError("no face present", confidence=detection.confidence)

    with timed("align_ms", timings):
        aligned, transform = align_face(image, detection, artifacts.detector.template)
        aligned_landmarks = np.clip(transform.apply(detection.landmarks), 0.0, res - 1)
    with timed("classify_ms", timings):
        labels: AttributeLabels = classify_attributes(aligned, artifacts.classifiers)
    with timed("match_ms", timings):
        match = artifacts.context_db.match(labels)
        context = artifacts.context_db.get(match.entry_id).image
    with timed("invert_ms", timings):
        region, mask = derive_dental_mask(aligned_landmarks, config.dental_margin, res, config.feather_radius)
        output, report = merge_and_invert(aligned, mask, context, artifacts.encoder, artifacts.gan)
        reconstruction = reconstruct(aligned, artifacts.encoder, artifacts.gan)

    record = DeidentifyRecord(
        input_id=input_id,
        status="ok",
        seed=config.seed,
        fingerprints=artifacts.fingerprints(),
        timestamp=_now_iso(),
        detection=detection.summary(),
        labels=labels.as_dict(),
        context_id=match.entry_id,
        match=match.as_dict(),
        dental_region=region.as_list(),
        feather_radius=float(config.feather_radius),
        masked_fidelity=float(report.region_fidelity),
        full_frame_mse=float(report.stitched_mse),
        timings=timings,
        ground_truth=ground_truth.to_dict() if ground_truth is not None else None,
    )
    increment_metric("deidentify_ok")
    logger.info(f"De-identified {input_id}: context={match.entry_id} "
                f"agree={match.agree_count}/3 masked_mse={record.masked_fidelity:.5f}")
    return DeidentifyOutcome(aligned=aligned, context=context, stitched=report.stitched,
                             output=output, reconstruction=reconstruction, record=record)


def deidentify(image: ImageTensor, config_or_artifacts: Union[PipelineConfig, PipelineArtifacts],
               input_id: str = "input") -> Tuple[ImageTensor, DeidentifyRecord]:
    outcome = run_deidentify(image, config_or_artifacts, input_id)
    return outcome.output, outcome.record


# ============================================================================
# Batch
# ============================================================================

@dataclass(frozen=True)
class BatchInput:
    input_id: str
    path: Path
    ground_truth: Optional[FaceSpec] = None


def list_inputs(source: Union[CorpusManifest, str, Path]) -> List[BatchInput]:
    """Inputs sorted by id: a corpus manifest's entries, or every PNG in a directory.

    Raises OSError for a missing or unreadable directory.
    """
    if isinstance(source, CorpusManifest):
        manifest = source
    else:
        path = Path(source)
        if not path.is_dir():
            if path.name == "manifest.json" and path.exists():
                return list_inputs(load_manifest(path))
            raise NotADirectoryError(f"input directory not found: {path}")
        if (path / "manifest.json").exists():
            return list_inputs(load_manifest(path))
        return sorted((BatchInput(p.stem, p) for p in path.iterdir() if p.suffix.lower() == ".png"),
                      key=lambda item: item.input_id)
    items = [BatchInput(Path(e.file).stem, manifest.image_path(e), e.labels) for e in manifest.entries]
    return sorted(items, key=lambda item: item.input_id)


def _write_item(outcome: DeidentifyOutcome, output_dir: Path) -> None:
    item_dir = output_dir / "items" / outcome.record.input_id
    for name, image in outcome.images().items():
        save_png(image, item_dir / f"{name}.png")


def _process(item: BatchInput, artifacts: PipelineArtifacts, output_dir: Optional[Path]) -> DeidentifyRecord:
    base = dict(input_id=item.input_id, seed=artifacts.config.seed,
                fingerprints=artifacts.fingerprints(), timestamp=_now_iso())
    try:
        image = load_png(item.path)
        outcome = run_deidentify(image, artifacts, item.input_id, item.ground_truth)
        if output_dir is not None:
            _write_item(outcome, output_dir)
    except NoFaceError as e:
        logger.warning(f"Refused {item.input_id}: {e} (confidence={e.confidence})")
        return DeidentifyRecord(status="refused", error=str(e), **base)
    except Exception as e:
        increment_metric("deidentify_error")
        if isinstance(e, (DeidError, OSError)):
            logger.warning(f"Failed {item.input_id}: {e}")
        else:
            logger.exception(f"Unexpected failure on {item.input_id}")
        if output_dir is not None:
            shutil.rmtree(output_dir / "items" / item.input_id, ignore_errors=True)
        return DeidentifyRecord(status="error", error=f"{type(e).__name__}: {e}", **base)
    return outcome.record


def summarize(records: List[DeidentifyRecord]) -> Dict[str, int]:
    counts = {"total": len(records), "ok": 0, "refused": 0, "error": 0}
    for r in records:
        counts[r.status] += 1
    return counts


def batch_deidentify(source: Union[CorpusManifest, str, Path],
                     config_or_artifacts: Union[PipelineConfig, PipelineArtifacts],
                     output_dir: Optional[Union[str, Path]] = None) -> List[DeidentifyRecord]:
    """De-identify every input, isolating per-item failures.

    Records come back sorted by input id regardless of worker count. When an
    output directory is in effect, writes per-item images, records.jsonl and
    summary.json there.
    """
    items = list_inputs(source)
    artifacts = _as_artifacts(config_or_artifacts)
    out = Path(output_dir) if output_dir is not None else artifacts.config.output_dir
    workers = artifacts.config.workers

    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda it: _process(it, artifacts, out), items))
    else:
        records = [_process(it, artifacts, out) for it in items]
    records.sort(key=lambda r: r.input_id)

    summary = summarize(records)
    out.mkdir(parents=True, exist_ok=True)
    db.write_jsonl(out / RECORDS_FILE, (r.to_dict() for r in records))
    db.write_json(out / SUMMARY_FILE, summary)
    logger.info(f"Batch finished: {summary['ok']} ok, {summary['refused']} refused, "
                f"{summary['error']} errors -> {out}")
    logger.debug(f"Stage timings: {list_timings()}")
    return records


def load_records(run_dir: Union[str, Path]) -> List[DeidentifyRecord]:
    path = Path(run_dir) / RECORDS_FILE
    return [DeidentifyRecord.from_dict(row) for row in db.read_jsonl(path)]
