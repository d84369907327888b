import math

import numpy as np
import pytest
import torch

import db
import services.face_detect as face_detect_module
from conftest import TINY_RES, fixed_detector
from errors import ArgumentError, NonFiniteLossError, PreconditionError
from services.config import DetectorTrainConfig
from services.face_detect import (
    CanonicalTemplate,
    DetectionResult,
    DetectorCheckpoint,
    _targets,
    align_face,
    detect,
    detection_loss,
    evaluate_detector,
    train_detector,
)
from services.synthetic_data import canonical_landmarks, load_corpus
from utils.image_core import RegionSpec


@pytest.fixture(scope="module")
def faces(tiny_corpus):
    return load_corpus(tiny_corpus)


def test_template_is_canonical_frame():
    template = CanonicalTemplate.for_resolution(64)
    np.testing.assert_array_equal(template.points, canonical_landmarks(64))
    assert template.mouth_midline == pytest.approx(32.0)
    with pytest.raises(ArgumentError):
        CanonicalTemplate(64, np.zeros((4, 2)))


def test_present_face(faces):
    ckpt = fixed_detector(TINY_RES)
    result = detect(faces.images[0], ckpt)
    assert result.face_present
    assert result.confidence > 0.99
    assert result.bbox == RegionSpec(6, 4, 26, 29)
    np.testing.assert_allclose(result.landmarks, ckpt.template.points, atol=1e-3)
    summary = result.summary()
    assert summary["face_present"] is True and len(summary["landmarks"]) == 5


def test_absent_face_is_a_result(faces):
    result = detect(faces.images[0], fixed_detector(TINY_RES, present=False))
    assert not result.face_present
    assert result.bbox is None and result.landmarks is None
    assert result.summary()["landmarks"] is None


def test_threshold_controls_presence(faces):
    ckpt = fixed_detector(TINY_RES)
    assert not detect(faces.images[0], ckpt, threshold=0.99999).face_present


def test_detect_argument_errors(faces):
    ckpt = fixed_detector(TINY_RES)
    with pytest.raises(ArgumentError):
        detect(faces.images[0], ckpt, threshold=1.0)
    with pytest.raises(ArgumentError):
        detect(np.zeros((64, 64, 3)), ckpt)


def test_align_onto_template_is_identity(faces):
    ckpt = fixed_detector(TINY_RES)
    result = DetectionResult(True, 0.9, RegionSpec(0, 0, 32, 32), ckpt.template.points.copy())
    aligned, transform = align_face(faces.images[0], result, ckpt.template)
    assert transform.scale == pytest.approx(1.0)
    np.testing.assert_allclose(aligned, faces.images[0], atol=1e-5)


def test_align_removes_offset():
    template = CanonicalTemplate.for_resolution(TINY_RES)
    result = DetectionResult(True, 0.9, None, template.points + np.array([3.0, 2.0]))
    _, transform = align_face(np.zeros((32, 32, 3)), result, template)
    assert transform.translation == pytest.approx((-3.0, -2.0), abs=1e-9)
    assert math.remainder(transform.rotation, 2 * math.pi) == pytest.approx(0.0, abs=1e-9)


def test_align_without_face():
    template = CanonicalTemplate.for_resolution(TINY_RES)
    with pytest.raises(PreconditionError):
        align_face(np.zeros((32, 32, 3)), DetectionResult(False, 0.1), template)


def test_targets_are_normalized():
    lm = np.full((5, 2), 31.0)
    t = _targets(lm, RegionSpec(0, 0, 32, 16), 32)
    np.testing.assert_allclose(t, [0, 0, 1, 0.5] + [1.0] * 10)


def test_detection_loss_without_positives():
    labels = torch.zeros(3)
    presence, box, lm = detection_loss(torch.zeros(3), torch.rand(3, 4), torch.rand(3, 10), labels, torch.zeros(3, 14))
    assert float(presence) == pytest.approx(math.log(2))
    assert float(box) == 0.0 and float(lm) == 0.0


def test_evaluate_fixed_detector(faces, tiny_negatives):
    negs = load_corpus(tiny_negatives).images[:4]
    metrics = evaluate_detector(fixed_detector(TINY_RES), faces.images[:4], faces.landmarks[:4], negs)
    assert metrics["presence_accuracy"] == pytest.approx(0.5)
    assert metrics["heldout_faces"] == 4.0
    assert metrics["landmark_error_px"] >= 0


def test_train_detector(tiny_corpus, tiny_negatives, tmp_path, faces):
    cfg = DetectorTrainConfig(steps=2, batch_size=4, channels=4, hidden=8, holdout_fraction=0.25, log_every=0)
    ckpt = train_detector(tiny_corpus, tiny_negatives, cfg)
    assert ckpt.step == 2 and len(ckpt.history) == 2
    assert {"presence_accuracy", "landmark_error_px"} <= set(ckpt.metrics)
    assert 0.0 <= ckpt.metrics["presence_accuracy"] <= 1.0

    loaded = DetectorCheckpoint.load(ckpt.save(tmp_path / "detector.zip"))
    assert loaded.fingerprint() == ckpt.fingerprint()
    assert loaded.metrics == ckpt.metrics
    a, b = detect(faces.images[1], ckpt, 0.01), detect(faces.images[1], loaded, 0.01)
    assert a.confidence == b.confidence


def test_non_finite_detector_loss_keeps_last_parameters(tiny_corpus, tiny_negatives, monkeypatch):
    original = face_detect_module.detection_loss

    def poisoned(*args):
        presence, box, lm = original(*args)
        return presence * float("inf"), box, lm

    monkeypatch.setattr(face_detect_module, "detection_loss", poisoned)
    cfg = DetectorTrainConfig(steps=2, batch_size=4, channels=4, hidden=8, log_every=0)
    with pytest.raises(NonFiniteLossError) as info:
        train_detector(tiny_corpus, tiny_negatives, cfg)
    assert info.value.checkpoint_path.endswith("detector_nonfinite_step000001.zip")
    archive = db.read_archive(info.value.checkpoint_path)
    assert archive.manifest["step"] == 0
    assert all(np.isfinite(arr).all() for arr in archive.arrays.values())


def test_train_detector_rejects_bad_corpora(tiny_corpus, tiny_negatives):
    cfg = DetectorTrainConfig(steps=1, batch_size=2, channels=4, hidden=8)
    with pytest.raises(ArgumentError):
        train_detector(tiny_negatives, tiny_negatives, cfg)
