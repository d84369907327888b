"""Attribute classifiers (gender, age, race analogs), the context identity
database of generated faces, and label handling for it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import db
from errors import ArgumentError, ConfigurationError, LabelManifestError, NonFiniteLossError
from services.config import ATTRIBUTE_NAMES, ClassifierTrainConfig
from services.gan import GanCheckpoint, generate, map_latent, sample_latent
from services.synthetic_data import AGE_GROUPS, DEFAULT_RACE_CLASSES, GENDER_CLASSES, CorpusManifest, load_corpus
from utils.image_core import ImageTensor, jitter_transform, warp_image
from utils.imageio import from_uint8, load_png, save_png, to_uint8
from utils.layers import LRELU_SLOPE, ConvTrunk
from utils.parse import parse_label_manifest
from utils.similarity_matching import MatchResult, match_context
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

CHECKPOINT_KIND = "classifier"
HISTORY_COLUMNS = ["step", "loss", "batch_accuracy"]
LABELING_MODES = ("auto", "manifest")
_ALIASES = {"gender_class": "gender", "age_group": "age", "race_class": "race"}


def canonical_attribute(name: str) -> str:
    attr = _ALIASES.get(name, name)
    if attr not in ATTRIBUTE_NAMES:
        raise ArgumentError(f"unknown attribute {name!r}; expected one of {ATTRIBUTE_NAMES}")
    return attr


def attribute_categories(race_classes: int = DEFAULT_RACE_CLASSES) -> Dict[str, tuple]:
    return {
        "gender": GENDER_CLASSES,
        "age": AGE_GROUPS,
        "race": tuple(str(i) for i in range(race_classes)),
    }


# ----------------------------
# Types
# ----------------------------

@dataclass(frozen=True)
class AttributeLabels:
    gender_class: str
    age_group: str
    race_class: str
    confidences: Dict[str, float] = field(default_factory=lambda: {a: 1.0 for a in ATTRIBUTE_NAMES})

    def value(self, attribute: str) -> str:
        return {"gender": self.gender_class, "age": self.age_group, "race": self.race_class}[attribute]

    def as_dict(self) -> dict:
        return {
            "gender": self.gender_class,
            "age": self.age_group,
            "race": self.race_class,
            "confidences": {a: float(self.confidences.get(a, 0.0)) for a in ATTRIBUTE_NAMES},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttributeLabels":
        return cls(str(data["gender"]), str(data["age"]), str(data["race"]),
                   {k: float(v) for k, v in (data.get("confidences") or {}).items()})


class AttributeClassifier(nn.Module):
    """Small residual CNN; `features` exposes the penultimate layer."""

    def __init__(self, resolution: int, categories: int, channels: int = 16, hidden: int = 64):
        super().__init__()
        self.resolution = resolution
        self.categories = categories
        self.trunk = ConvTrunk(resolution, channels, residual=True)
        self.fc = nn.Linear(self.trunk.out_features, hidden)
        self.out = nn.Linear(hidden, categories)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(self.fc(self.trunk(x)), LRELU_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.features(x))


@dataclass
class ClassifierCheckpoint:
    attribute: str
    categories: tuple
    config: ClassifierTrainConfig
    classifier: AttributeClassifier
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)
    corpus_fingerprint: str = ""

    @property
    def resolution(self) -> int:
        return self.classifier.resolution

    def fingerprint(self) -> str:
        return db.sha256_hex(db.modules_checksum({"classifier": self.classifier}).encode("utf-8"),
                             self.attribute.encode("utf-8"))

    def save(self, path: str | Path) -> Path:
        manifest = {
            "attribute": self.attribute,
            "categories": list(self.categories),
            "config": self.config.model_dump(mode="json"),
            "resolution": self.resolution,
            "step": self.step,
            "metrics": self.metrics,
            "corpus_fingerprint": self.corpus_fingerprint,
            "fingerprint": self.fingerprint(),
        }
        return db.save_checkpoint(path, CHECKPOINT_KIND, {"classifier": self.classifier}, manifest,
                                  self.history, HISTORY_COLUMNS)

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierCheckpoint":
        archive = db.load_checkpoint(path, CHECKPOINT_KIND)
        m = archive.manifest
        config = ClassifierTrainConfig(**m["config"])
        categories = tuple(m["categories"])
        net = AttributeClassifier(int(m["resolution"]), len(categories), config.channels, config.hidden)
        db.load_module_arrays(net, "classifier", archive.arrays)
        return cls(attribute=m["attribute"], categories=categories, config=config, classifier=net,
                   step=int(m["step"]), history=db.archive_history(archive),
                   metrics=dict(m.get("metrics", {})), corpus_fingerprint=m.get("corpus_fingerprint", ""))


# ----------------------------
# Training
# ----------------------------

def train_attribute_classifier(attribute: str, corpus: CorpusManifest,
                               config: ClassifierTrainConfig) -> ClassifierCheckpoint:
    attr = canonical_attribute(attribute)
    if not corpus.entries:
        raise ArgumentError("corpus is empty")
    if any(e.labels is None for e in corpus.entries):
        raise ArgumentError(f"corpus entries carry no {attr} labels")
    categories = attribute_categories(corpus.race_classes)[attr]
    res = corpus.resolution

    seed_everything(config.seed)
    torch.manual_seed(config.seed)
    ckpt = ClassifierCheckpoint(attribute=attr, categories=categories, config=config,
                                classifier=AttributeClassifier(res, len(categories), config.channels, config.hidden),
                                corpus_fingerprint=corpus.fingerprint())
    arrays = load_corpus(corpus, aligned=config.align_corpus)
    targets = np.array([categories.index(spec.attribute(attr)) for spec in arrays.labels])

    rng = np.random.default_rng(derive_seed(config.seed, 5))
    order = rng.permutation(len(targets))
    n_hold = int(round(len(targets) * config.holdout_fraction)) if len(targets) > 1 else 0
    train_idx, hold_idx = np.sort(order[n_hold:]), np.sort(order[:n_hold])
    gen = torch_generator(derive_seed(config.seed, 6))
    opt = torch.optim.Adam(ckpt.classifier.parameters(), lr=config.lr)

    logger.info(f"Training {attr} classifier ({len(categories)} classes) on {len(train_idx)} images")
    for _ in progress(range(config.steps), total=config.steps, desc=f"classifier:{attr}"):
        idx = train_idx[torch.randint(len(train_idx), (config.batch_size,), generator=gen).numpy()]
        batch = np.stack([
            warp_image(arrays.images[i],
                       jitter_transform(rng, res, config.jitter_scale, config.jitter_rotation_deg, config.jitter_shift),
                       res, res)
            for i in idx
        ])
        labels = torch.from_numpy(targets[idx])
        logits = ckpt.classifier(to_nchw(batch))
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad(set_to_none=True)
        if all_finite(loss):
            loss.backward()
        row = {"step": ckpt.step + 1, "loss": float(loss),
               "batch_accuracy": float((logits.argmax(dim=1) == labels).float().mean())}
        if not all_finite(loss, *gradients(ckpt.classifier.parameters())):
            path = diagnostics_dir() / f"classifier_{attr}_nonfinite_step{row['step']:06}.zip"
            ckpt.save(path)
            logger.error(f"[classifier:{attr}] non-finite loss at step {row['step']}; diagnostic checkpoint {path}")
            raise NonFiniteLossError(f"non-finite {attr} classifier loss at step {row['step']}",
                                     checkpoint_path=str(path))
        opt.step()
        ckpt.step += 1
        ckpt.history.append(row)
        log_history_row(f"classifier:{attr}", row, config.log_every)

    if len(hold_idx):
        predicted = predict_indices(ckpt, arrays.images[hold_idx])
        ckpt.metrics = {"heldout_accuracy": float(np.mean(predicted == targets[hold_idx])),
                        "heldout_count": float(len(hold_idx))}
        logger.info(f"{attr} classifier held-out accuracy: {ckpt.metrics['heldout_accuracy']:.4f}")
    return ckpt


# ----------------------------
# Inference
# ----------------------------

@torch.no_grad()
def _probabilities(ckpt: ClassifierCheckpoint, images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    res = ckpt.resolution
    if arr.shape[-3:] != (res, res, 3):
        raise ArgumentError(f"{ckpt.attribute} classifier expects {res}x{res}x3 images, got {arr.shape}")
    return torch.softmax(ckpt.classifier(to_nchw(arr)).double(), dim=1).numpy()


def predict_indices(ckpt: ClassifierCheckpoint, images: np.ndarray) -> np.ndarray:
    return _probabilities(ckpt, images).argmax(axis=1)


def require_classifiers(classifiers: Mapping[str, ClassifierCheckpoint]) -> None:
    missing = [a for a in ATTRIBUTE_NAMES if a not in classifiers]
    if missing:
        raise ConfigurationError(f"missing attribute classifiers: {', '.join(missing)}")


def classify_batch(images: np.ndarray, classifiers: Mapping[str, ClassifierCheckpoint]) -> List[AttributeLabels]:
    require_classifiers(classifiers)
    probs = {a: _probabilities(classifiers[a], images) for a in ATTRIBUTE_NAMES}
    out = []
    for i in range(len(images)):
        values, conf = {}, {}
        for attr in ATTRIBUTE_NAMES:
            k = int(np.argmax(probs[attr][i]))
            values[attr] = classifiers[attr].categories[k]
            conf[attr] = float(probs[attr][i, k])
        out.append(AttributeLabels(values["gender"], values["age"], values["race"], conf))
    return out


def classify_attributes(image: ImageTensor, classifiers: Mapping[str, ClassifierCheckpoint]) -> AttributeLabels:
    """Per-attribute argmax category with its softmax confidence."""
    return classify_batch(np.asarray(image)[None], classifiers)[0]


def class_probabilities(image: ImageTensor, classifier: ClassifierCheckpoint) -> np.ndarray:
    return _probabilities(classifier, np.asarray(image)[None])[0]


@torch.no_grad()
def attribute_features(images: np.ndarray, classifiers: Mapping[str, ClassifierCheckpoint]) -> np.ndarray:
    """Concatenated penultimate-layer features of the three classifiers, (N, F)."""
    require_classifiers(classifiers)
    batch = to_nchw(np.asarray(images, dtype=np.float32).reshape(-1, *np.shape(images)[-3:]))
    feats = [classifiers[a].classifier.features(batch).double().numpy() for a in ATTRIBUTE_NAMES]
    return np.concatenate(feats, axis=1)


# ----------------------------
# Context database
# ----------------------------

@dataclass(frozen=True, eq=False)
class ContextEntry:
    entry_id: int
    image: np.ndarray
    labels: AttributeLabels
    style_code: np.ndarray

    @property
    def file(self) -> str:
        return f"context_{self.entry_id:04}.png"


@dataclass
class ContextDB:
    entries: List[ContextEntry]
    gan_fingerprint: str
    seed: int
    labeling: str
    resolution: int
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, entry_id: int) -> ContextEntry:
        for entry in self.entries:
            if entry.entry_id == entry_id:
                return entry
        raise ArgumentError(f"no context entry with id {entry_id}")

    def match(self, query: AttributeLabels) -> MatchResult:
        return match_context(query, self.entries)

    def image_checksums(self) -> List[str]:
        return [db.sha256_hex(to_uint8(e.image).tobytes()) for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "gan_fingerprint": self.gan_fingerprint,
            "seed": self.seed,
            "labeling": self.labeling,
            "resolution": self.resolution,
            "count": len(self.entries),
            "entries": [
                {
                    "id": e.entry_id,
                    "file": e.file,
                    "labels": e.labels.as_dict(),
                    "style_code": [float(v) for v in e.style_code],
                }
                for e in self.entries
            ],
        }

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for e in self.entries:
            save_png(e.image, directory / e.file)
        db.write_json(directory / "contextdb.json", self.to_dict())
        self.root = directory
        logger.info(f"Wrote context DB with {len(self.entries)} entries to {directory}")
        return directory

    def fingerprint(self) -> str:
        return db.sha256_hex(db.canonical_json(self.to_dict()).encode("utf-8"),
                             *(c.encode("utf-8") for c in self.image_checksums()))

    @classmethod
    def load(cls, directory: str | Path) -> "ContextDB":
        directory = Path(directory)
        path = directory / "contextdb.json" if directory.is_dir() else directory
        data = db.read_json(path)
        root = path.parent
        entries = [
            ContextEntry(
                entry_id=int(e["id"]),
                image=load_png(root / e["file"]),
                labels=AttributeLabels.from_dict(e["labels"]),
                style_code=np.asarray(e["style_code"], dtype=np.float32),
            )
            for e in data["entries"]
        ]
        return cls(entries=entries, gan_fingerprint=data["gan_fingerprint"], seed=int(data["seed"]),
                   labeling=data["labeling"], resolution=int(data["resolution"]), root=root)


def _manifest_labels(path: str | Path, count: int, categories: Dict[str, Sequence[str]]) -> List[AttributeLabels]:
    labels, problems = parse_label_manifest(path, categories)
    missing = [i for i in range(count) if i not in labels]
    if missing or problems:
        shown = ", ".join(str(i) for i in missing[:20])
        detail = f"missing ids: {shown}{' ...' if len(missing) > 20 else ''}" if missing else ""
        if problems:
            detail = "; ".join(filter(None, [detail, *problems[:5]]))
        raise LabelManifestError(f"label manifest {path} is incomplete: {detail}", missing_ids=missing)
    return [AttributeLabels(labels[i]["gender"], labels[i]["age"], labels[i]["race"]) for i in range(count)]


def build_context_db(gan: GanCheckpoint, count: int, seed: int, labeling: str = "auto",
                     classifiers: Optional[Mapping[str, ClassifierCheckpoint]] = None,
                     label_manifest: Optional[str | Path] = None,
                     race_classes: int = DEFAULT_RACE_CLASSES) -> ContextDB:
    """Generate ``count`` context identities and label them.

    The generator is trained in the canonical aligned frame, so generated
    images are already aligned. Images are quantized to 8 bits here so the
    in-memory DB equals the one reloaded from disk.
    """
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    if labeling not in LABELING_MODES:
        raise ConfigurationError(f"unknown labeling mode {labeling!r}; expected one of {LABELING_MODES}")
    if labeling == "auto" and not classifiers:
        raise ConfigurationError("labeling=auto requires the three attribute classifiers")
    if labeling == "manifest" and label_manifest is None:
        raise ConfigurationError("labeling=manifest requires a label manifest file")

    z = sample_latent(count, seed, gan.d_z)
    w = np.atleast_2d(map_latent(z, gan.mapping))
    images = from_uint8(to_uint8(generate(w, gan.synthesis)))

    if labeling == "auto":
        labels = []
        for start in range(0, count, 64):
            labels.extend(classify_batch(images[start:start + 64], classifiers))
    else:
        categories = attribute_categories(race_classes)
        labels = _manifest_labels(label_manifest, count, categories)

    entries = [ContextEntry(entry_id=i, image=images[i], labels=labels[i], style_code=w[i]) for i in range(count)]
    logger.info(f"Built context DB: {count} entries, labeling={labeling}")
    return ContextDB(entries=entries, gan_fingerprint=gan.fingerprint(), seed=seed, labeling=labeling,
                     resolution=gan.resolution)
