import json

import pytest

import cli
import services.gan as gan_module
from errors import PreconditionError
from services.pipeline import SUMMARY_FILE
from services.reports import GRID_FILE, REPORT_FILE
from services.synthetic_data import load_corpus, load_manifest
from utils.imageio import save_png


@pytest.fixture(autouse=True)
def _run_in_tmp(tmp_path, monkeypatch):
    monkeypatch.delenv("RUN_CONFIG", raising=False)
    monkeypatch.chdir(tmp_path)


def write_run_config(path, paths, extra=""):
    lines = ["paths:"]
    for key in ("gan_checkpoint", "encoder_checkpoint", "detector_checkpoint", "context_db"):
        lines.append(f"  {key}: {json.dumps(str(paths[key]))}")
    lines.append("  classifier_checkpoints:")
    for attr, p in sorted(paths["classifier_checkpoints"].items()):
        lines.append(f"    {attr}: {json.dumps(str(p))}")
    lines += ["pipeline:", "  feather_radius: 1.0"]
    path.write_text("\n".join(lines) + "\n" + extra, encoding="utf-8")
    return path


@pytest.fixture()
def run_config(tiny_pipeline_files, tmp_path):
    _, paths = tiny_pipeline_files
    return write_run_config(tmp_path / "run.yaml", paths)


@pytest.fixture()
def face_png(tiny_corpus, tmp_path):
    return save_png(load_corpus(tiny_corpus).images[0], tmp_path / "patient.png")


# ----------------------------
# Validation exits
# ----------------------------

def test_data_gen(tmp_path):
    out = tmp_path / "corpus"
    code = cli.main(["data", "gen", "--count", "3", "--resolution", "32", "--seed", "4", "--out", str(out)])
    assert code == cli.EXIT_OK
    manifest = load_manifest(out)
    assert manifest.count == 3 and manifest.resolution == 32


@pytest.mark.parametrize("argv", [
    ["data", "gen"],
    ["data", "gen", "--distribution", "weird", "--out", "x"],
    ["data", "gen", "--resolution", "48", "--out", "x"],
    ["--config", "absent.yaml", "data", "gen", "--out", "x"],
])
def test_validation_errors(argv):
    assert cli.main(argv) == cli.EXIT_VALIDATION


def test_unknown_run_config_section(tmp_path):
    (tmp_path / "bad.yaml").write_text("colour: red\n", encoding="utf-8")
    assert cli.main(["--config", "bad.yaml", "data", "gen", "--out", "x"]) == cli.EXIT_VALIDATION


def test_default_run_config_is_picked_up(tmp_path):
    (tmp_path / "run_config.yaml").write_text("data:\n  resolution: 48\n", encoding="utf-8")
    assert cli.main(["data", "gen", "--count", "1", "--out", "x"]) == cli.EXIT_VALIDATION


def test_missing_checkpoint_path(tiny_corpus):
    argv = ["gan", "finetune", "--corpus", str(tiny_corpus.root), "--out", "tuned.zip"]
    assert cli.main(argv) == cli.EXIT_VALIDATION


def test_unknown_attribute(tiny_corpus):
    argv = ["classifier", "train", "--attribute", "hair", "--corpus", str(tiny_corpus.root), "--out", "c.zip"]
    assert cli.main(argv) == cli.EXIT_VALIDATION


def test_deidentify_without_artifacts(face_png):
    assert cli.main(["deidentify", str(face_png)]) == cli.EXIT_VALIDATION


def test_label_manifest_gaps(run_config, tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("id,gender,age,race\n0,A,Adult,0\n", encoding="utf-8")
    argv = ["--config", str(run_config), "contextdb", "build", "--count", "2", "--labeling", "manifest",
            "--labels", str(labels), "--out", str(tmp_path / "ctx")]
    assert cli.main(argv) == cli.EXIT_VALIDATION


# ----------------------------
# Training commands
# ----------------------------

def test_gan_train_from_run_config(tiny_corpus, tmp_path):
    config = tmp_path / "gan.yaml"
    config.write_text("gan:\n  d_z: 8\n  d_w: 8\n  channels: 4\n  mapping_layers: 2\n  batch_size: 4\n"
                      "  log_every: 0\n", encoding="utf-8")
    argv = ["--config", str(config), "gan", "train", "--corpus", str(tiny_corpus.root), "--steps", "1",
            "--out", str(tmp_path / "gan.zip")]
    assert cli.main(argv) == cli.EXIT_OK
    assert (tmp_path / "gan.zip").exists()


def _gan_train_argv(tiny_corpus, tmp_path):
    config = tmp_path / "gan.yaml"
    config.write_text("gan:\n  d_z: 8\n  d_w: 8\n  channels: 4\n  mapping_layers: 2\n  batch_size: 4\n"
                      "  log_every: 0\n", encoding="utf-8")
    return ["--config", str(config), "gan", "train", "--corpus", str(tiny_corpus.root), "--steps", "2",
            "--out", str(tmp_path / "gan.zip")]


def test_diverged_training_exit_code(tiny_corpus, tmp_path, monkeypatch):
    monkeypatch.setattr(gan_module, "generator_loss", lambda logits: logits.mean() * float("nan"))
    assert cli.main(_gan_train_argv(tiny_corpus, tmp_path)) == cli.EXIT_NUMERICAL
    assert not (tmp_path / "gan.zip").exists()


def test_failed_precondition_exit_code(tiny_corpus, tmp_path, monkeypatch):
    def refuse(*args, **kwargs):
        raise PreconditionError("generator parameters changed")

    monkeypatch.setattr(gan_module, "train_gan", refuse)
    assert cli.main(_gan_train_argv(tiny_corpus, tmp_path)) == cli.EXIT_PRECONDITION


def test_gan_train_needs_an_output(tiny_corpus, tmp_path):
    config = tmp_path / "gan.yaml"
    config.write_text("gan:\n  d_z: 4\n  d_w: 4\n  channels: 2\n  mapping_layers: 1\n  batch_size: 2\n"
                      "  log_every: 0\n", encoding="utf-8")
    argv = ["--config", str(config), "gan", "train", "--corpus", str(tiny_corpus.root), "--steps", "1"]
    assert cli.main(argv) == cli.EXIT_VALIDATION


# ----------------------------
# De-identification
# ----------------------------

def test_deidentify_single_image(run_config, face_png, tmp_path):
    out = tmp_path / "result.png"
    assert cli.main(["--config", str(run_config), "deidentify", str(face_png), "--out", str(out)]) == cli.EXIT_OK
    assert out.exists()
    record = json.loads(out.with_suffix(".json").read_text())
    assert record["status"] == "ok" and record["input_id"] == "patient"


def test_deidentify_default_output(run_config, face_png, tmp_path):
    assert cli.main(["--config", str(run_config), "deidentify", str(face_png)]) == cli.EXIT_OK
    assert (tmp_path / "runs" / "deidentify" / "patient_deid.png").exists()


def test_refusal_exit_code(run_config, face_png, tmp_path):
    argv = ["--config", str(run_config), "deidentify", str(face_png), "--threshold", "0.99999",
            "--out", str(tmp_path / "never.png")]
    assert cli.main(argv) == cli.EXIT_REFUSAL
    assert not (tmp_path / "never.png").exists()


def test_unreadable_input(run_config, tmp_path):
    assert cli.main(["--config", str(run_config), "deidentify", str(tmp_path / "absent.png")]) == cli.EXIT_IO
    (tmp_path / "broken.png").write_bytes(b"nope")
    assert cli.main(["--config", str(run_config), "deidentify", str(tmp_path / "broken.png")]) == cli.EXIT_IO


def test_batch_missing_directory(run_config, tmp_path):
    argv = ["--config", str(run_config), "deidentify", "--batch", str(tmp_path / "absent"),
            "--out", str(tmp_path / "run")]
    assert cli.main(argv) == cli.EXIT_IO


def test_batch_eval_and_report(run_config, tiny_clinic, tmp_path):
    run = tmp_path / "run"
    argv = ["--config", str(run_config), "deidentify", "--batch", str(tiny_clinic.root), "--out", str(run)]
    assert cli.main(argv) == cli.EXIT_OK
    summary = json.loads((run / SUMMARY_FILE).read_text())
    assert summary["total"] == tiny_clinic.count

    assert cli.main(["--config", str(run_config), "eval", str(run)]) == cli.EXIT_OK
    report_json = run / "report" / REPORT_FILE
    assert report_json.exists()

    again = tmp_path / "again"
    assert cli.main(["report", str(report_json), "--run-dir", str(run), "--out", str(again)]) == cli.EXIT_OK
    assert (again / GRID_FILE).exists()
