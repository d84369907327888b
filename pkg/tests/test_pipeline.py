import dataclasses
import json

import numpy as np
import pytest

import services.pipeline as pipeline_module

from conftest import TINY_RES, fixed_detector
from errors import ConfigurationError, NoFaceError
from services.dental_mask import derive_dental_mask
from services.identity_match import ContextDB
from services.pipeline import (
    ITEM_IMAGES,
    RECORDS_FILE,
    STAGE_TIMINGS,
    SUMMARY_FILE,
    DeidentifyRecord,
    batch_deidentify,
    deidentify,
    list_inputs,
    load_artifacts,
    load_records,
    run_deidentify,
    summarize,
    validate_artifacts,
)
from services.synthetic_data import load_corpus
from utils.imageio import save_png, to_uint8


@pytest.fixture(scope="module")
def artifacts(tiny_pipeline_files):
    config, _ = tiny_pipeline_files
    return load_artifacts(config)


@pytest.fixture(scope="module")
def face(tiny_corpus):
    return load_corpus(tiny_corpus).images[0]


def with_config(artifacts, **changes):
    return dataclasses.replace(artifacts, config=artifacts.config.model_copy(update=changes))


# ----------------------------
# Artifacts
# ----------------------------

def test_loaded_artifacts_are_consistent(artifacts, tiny_gan, tiny_context_db):
    assert artifacts.resolution == TINY_RES
    prints = artifacts.fingerprints()
    assert prints["gan"] == tiny_gan.fingerprint()
    assert prints["context_db"] == tiny_context_db.fingerprint()
    assert {"classifier_gender", "classifier_age", "classifier_race"} <= set(prints)


def test_missing_artifact_file(tiny_pipeline_files, tmp_path):
    config, _ = tiny_pipeline_files
    with pytest.raises(ConfigurationError):
        load_artifacts(config.model_copy(update={"gan_checkpoint": tmp_path / "nope.zip"}))


def test_context_db_from_other_gan(artifacts):
    foreign = ContextDB(entries=artifacts.context_db.entries, gan_fingerprint="0" * 64, seed=0,
                        labeling="auto", resolution=TINY_RES)
    with pytest.raises(ConfigurationError):
        validate_artifacts(dataclasses.replace(artifacts, context_db=foreign))


def test_classifier_slots_are_checked(artifacts):
    swapped = dict(artifacts.classifiers, gender=artifacts.classifiers["age"])
    with pytest.raises(ConfigurationError):
        validate_artifacts(dataclasses.replace(artifacts, classifiers=swapped))
    partial = {k: v for k, v in artifacts.classifiers.items() if k != "race"}
    with pytest.raises(ConfigurationError):
        validate_artifacts(dataclasses.replace(artifacts, classifiers=partial))


def test_resolution_mismatch(artifacts):
    with pytest.raises(ConfigurationError):
        validate_artifacts(dataclasses.replace(artifacts, detector=fixed_detector(64)))


# ----------------------------
# Single image
# ----------------------------

def test_single_image_record(artifacts, face):
    outcome = run_deidentify(face, artifacts, "face_a")
    record = outcome.record
    assert record.status == "ok" and record.error is None
    assert record.input_id == "face_a"
    assert record.context_id in range(len(artifacts.context_db))
    region, _ = derive_dental_mask(artifacts.detector.template.points, artifacts.config.dental_margin,
                                   TINY_RES, artifacts.config.feather_radius)
    assert record.dental_region == region.as_list()
    assert record.feather_radius == 1.0
    assert record.masked_fidelity >= 0 and record.full_frame_mse >= 0
    assert set(record.timings) == set(STAGE_TIMINGS)
    assert record.labels["gender"] in ("A", "B")
    assert outcome.output.shape == (TINY_RES, TINY_RES, 3)
    np.testing.assert_array_equal(outcome.context, artifacts.context_db.get(record.context_id).image)


def test_runs_are_reproducible(artifacts, face):
    out_a, rec_a = deidentify(face, artifacts, "x")
    out_b, rec_b = deidentify(face, artifacts, "x")
    assert rec_a.deterministic_view() == rec_b.deterministic_view()
    assert to_uint8(out_a).tobytes() == to_uint8(out_b).tobytes()


def test_config_is_accepted_directly(tiny_pipeline_files, artifacts, face):
    config, _ = tiny_pipeline_files
    _, from_config = deidentify(face, config, "x")
    _, from_artifacts = deidentify(face, artifacts, "x")
    assert from_config.deterministic_view() == from_artifacts.deterministic_view()


def test_no_face_is_refused(artifacts, face):
    blind = dataclasses.replace(artifacts, detector=fixed_detector(TINY_RES, present=False))
    with pytest.raises(NoFaceError) as info:
        run_deidentify(face, blind)
    assert info.value.confidence < 0.5
    with pytest.raises(NoFaceError):
        run_deidentify(face, with_config(artifacts, presence_threshold=0.99999))


def test_record_dict_round_trip(artifacts, face):
    record = run_deidentify(face, artifacts).record
    assert DeidentifyRecord.from_dict(json.loads(json.dumps(record.to_dict()))) == record
    assert "timestamp" not in record.deterministic_view()


# ----------------------------
# Batch
# ----------------------------

def write_inputs(directory, images):
    directory.mkdir(parents=True, exist_ok=True)
    for name, img in images.items():
        save_png(img, directory / f"{name}.png")
    return directory


def test_batch_isolates_bad_items(artifacts, tiny_corpus, tmp_path):
    images = load_corpus(tiny_corpus).images
    src = write_inputs(tmp_path / "in", {"face_b": images[1], "face_a": images[0], "small": np.zeros((16, 16, 3))})
    (src / "corrupt.png").write_bytes(b"not a png")
    out = tmp_path / "out"

    records = batch_deidentify(src, artifacts, out)
    assert [r.input_id for r in records] == ["corrupt", "face_a", "face_b", "small"]
    assert [r.status for r in records] == ["error", "ok", "ok", "error"]
    assert summarize(records) == {"total": 4, "ok": 2, "refused": 0, "error": 2}
    assert json.loads((out / SUMMARY_FILE).read_text())["error"] == 2

    for name in ITEM_IMAGES:
        assert (out / "items" / "face_a" / f"{name}.png").exists()
    assert not (out / "items" / "corrupt").exists()
    assert [r.to_dict() for r in load_records(out)] == [r.to_dict() for r in records]


def test_failed_writes_are_recorded_and_cleaned_up(artifacts, face, tmp_path, monkeypatch):
    src = write_inputs(tmp_path / "in", {"a": face, "b": face})
    out = tmp_path / "out"
    real_save = pipeline_module.save_png

    def flaky_save(image, path):
        if path.parent.name == "a" and path.name != f"{ITEM_IMAGES[0]}.png":
            raise OSError("disk full")
        return real_save(image, path)

    monkeypatch.setattr(pipeline_module, "save_png", flaky_save)
    records = batch_deidentify(src, artifacts, out)
    assert [r.status for r in records] == ["error", "ok"]
    assert records[0].error == "OSError: disk full"
    assert not (out / "items" / "a").exists()
    assert (out / "items" / "b" / "output.png").exists()
    assert json.loads((out / SUMMARY_FILE).read_text()) == {"total": 2, "ok": 1, "refused": 0, "error": 1}


def test_unexpected_exceptions_do_not_abort_the_batch(artifacts, face, tmp_path, monkeypatch):
    src = write_inputs(tmp_path / "in", {"a": face, "b": face})

    def broken(*args, **kwargs):
        raise RuntimeError("shape mismatch")

    monkeypatch.setattr(pipeline_module, "merge_and_invert", broken)
    records = batch_deidentify(src, artifacts, tmp_path / "out")
    assert [r.status for r in records] == ["error", "error"]
    assert records[0].error == "RuntimeError: shape mismatch"
    assert not (tmp_path / "out" / "items").exists()


def test_batch_refusals_write_no_images(artifacts, face, tmp_path):
    src = write_inputs(tmp_path / "in", {"only": face})
    blind = dataclasses.replace(artifacts, detector=fixed_detector(TINY_RES, present=False))
    records = batch_deidentify(src, blind, tmp_path / "out")
    assert records[0].status == "refused"
    assert records[0].context_id is None and records[0].masked_fidelity is None
    assert not (tmp_path / "out" / "items").exists()


def test_empty_directory(artifacts, tmp_path):
    (tmp_path / "in").mkdir()
    records = batch_deidentify(tmp_path / "in", artifacts, tmp_path / "out")
    assert records == []
    assert json.loads((tmp_path / "out" / SUMMARY_FILE).read_text())["total"] == 0
    assert (tmp_path / "out" / RECORDS_FILE).read_text() == ""


def test_missing_directory(artifacts, tmp_path):
    with pytest.raises(OSError):
        batch_deidentify(tmp_path / "absent", artifacts, tmp_path / "out")


def test_manifest_inputs_carry_ground_truth(tiny_clinic):
    items = list_inputs(tiny_clinic)
    assert [i.input_id for i in items] == sorted(i.input_id for i in items)
    assert all(i.ground_truth is not None for i in items)
    assert [i.input_id for i in list_inputs(tiny_clinic.manifest_path)] == [i.input_id for i in items]


def test_workers_do_not_change_results(artifacts, tiny_clinic, tmp_path):
    serial = batch_deidentify(tiny_clinic, artifacts, tmp_path / "serial")
    parallel = batch_deidentify(tiny_clinic, with_config(artifacts, workers=3), tmp_path / "parallel")
    assert [r.deterministic_view() for r in serial] == [r.deterministic_view() for r in parallel]
    for r in serial:
        a = (tmp_path / "serial" / "items" / r.input_id / "output.png").read_bytes()
        b = (tmp_path / "parallel" / "items" / r.input_id / "output.png").read_bytes()
        assert a == b
    assert serial[0].ground_truth is not None
