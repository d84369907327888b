"""Shared pytest fixtures: tiny 32-px corpora and artifacts, built once per session."""

import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

os.environ.setdefault("PROGRESS", "0")

from services.config import (  # noqa: E402
    ClassifierTrainConfig,
    DetectorTrainConfig,
    EncoderTrainConfig,
    GanTrainConfig,
    PipelineConfig,
)
from services.dental_mask import mask_source_rule  # noqa: E402
from services.face_detect import CanonicalTemplate, Detector, DetectorCheckpoint  # noqa: E402
from services.gan import train_gan  # noqa: E402
from services.identity_match import build_context_db, train_attribute_classifier  # noqa: E402
from services.inversion import train_encoder  # noqa: E402
from services.synthetic_data import generate_dataset, generate_negatives  # noqa: E402

TINY_RES = 32


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_ACCEPTANCE") == "1":
        return
    skip = pytest.mark.skip(reason="acceptance run; set RUN_ACCEPTANCE=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _isolated_diagnostics(tmp_path, monkeypatch):
    monkeypatch.setenv("DIAGNOSTICS_DIR", str(tmp_path / "diagnostics"))


def fixed_detector(resolution: int, present: bool = True) -> DetectorCheckpoint:
    """Detector whose heads ignore the input: presence on/off, landmarks on the template."""
    template = CanonicalTemplate.for_resolution(resolution)
    net = Detector(resolution, channels=4, hidden=8)
    with torch.no_grad():
        for head in (net.presence, net.box, net.landmarks):
            head.weight.zero_()
        net.presence.bias.fill_(8.0 if present else -8.0)
        net.box.bias.copy_(torch.logit(torch.tensor([0.2, 0.15, 0.8, 0.9])))
        coords = torch.from_numpy(template.points.reshape(-1) / (resolution - 1)).float()
        net.landmarks.bias.copy_(torch.logit(coords))
    return DetectorCheckpoint(config=DetectorTrainConfig(steps=0, channels=4, hidden=8),
                              detector=net, template=template)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("tiny")


@pytest.fixture(scope="session")
def tiny_corpus(tiny_dir):
    return generate_dataset(24, seed=11, distribution="base", resolution=TINY_RES, output_path=tiny_dir / "base")


@pytest.fixture(scope="session")
def tiny_clinic(tiny_dir):
    return generate_dataset(8, seed=12, distribution="clinic", resolution=TINY_RES, output_path=tiny_dir / "clinic")


@pytest.fixture(scope="session")
def tiny_negatives(tiny_dir):
    return generate_negatives(10, seed=13, resolution=TINY_RES, output_path=tiny_dir / "negatives")


@pytest.fixture(scope="session")
def tiny_gan_config():
    return GanTrainConfig(resolution=TINY_RES, d_z=8, d_w=8, channels=4, mapping_layers=2,
                          batch_size=4, steps=2, seed=3, log_every=0)


@pytest.fixture(scope="session")
def tiny_gan(tiny_corpus, tiny_gan_config):
    return train_gan(tiny_corpus, tiny_gan_config)


@pytest.fixture(scope="session")
def tiny_encoder_config():
    return EncoderTrainConfig(steps=2, batch_size=4, channels=4, seed=5, log_every=0)


@pytest.fixture(scope="session")
def tiny_encoder(tiny_gan, tiny_corpus, tiny_encoder_config):
    cfg = tiny_encoder_config
    rule = mask_source_rule(cfg.mask_source, TINY_RES, cfg.dental_margin, cfg.feather_radius)
    return train_encoder(tiny_gan, tiny_corpus, rule, cfg)


@pytest.fixture(scope="session")
def tiny_classifiers(tiny_corpus):
    cfg = ClassifierTrainConfig(steps=2, batch_size=4, channels=4, hidden=8, holdout_fraction=0.25, log_every=0)
    return {attr: train_attribute_classifier(attr, tiny_corpus, cfg) for attr in ("gender", "age", "race")}


@pytest.fixture(scope="session")
def tiny_context_db(tiny_gan, tiny_classifiers):
    return build_context_db(tiny_gan, count=6, seed=21, labeling="auto", classifiers=tiny_classifiers)


@pytest.fixture(scope="session")
def tiny_pipeline_files(tiny_dir, tiny_gan, tiny_encoder, tiny_classifiers, tiny_context_db):
    """Saved artifacts plus a PipelineConfig pointing at them (face always detected)."""
    art = tiny_dir / "artifacts"
    paths = {
        "gan_checkpoint": tiny_gan.save(art / "gan.zip"),
        "encoder_checkpoint": tiny_encoder.save(art / "encoder.zip"),
        "detector_checkpoint": fixed_detector(TINY_RES).save(art / "detector.zip"),
        "classifier_checkpoints": {a: c.save(art / f"classifier_{a}.zip") for a, c in tiny_classifiers.items()},
        "context_db": tiny_context_db.save(art / "contextdb"),
    }
    config = PipelineConfig(**paths, feather_radius=1.0, output_dir=tiny_dir / "run")
    return config, paths


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
