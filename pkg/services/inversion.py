"""Area-preserving encoder: image -> latent code, trained so that re-generation
keeps a masked (dental) region intact, and the stitch-then-invert operation.

Loss terms are mean squares (per-element averages):

    code_term   = mean_k ||c_k - E(G(c_k))||^2
    image_term  = mean_j mse(x_j, G(E(x_j)))
    region_term = mean_j masked_mse(x_j, G(E(x_j)), m_j)
    total       = code_term + lambda_img * image_term + lambda_df * region_term
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import db
from errors import ArgumentError, ConfigurationError, NonFiniteLossError, PreconditionError
from services.config import EncoderTrainConfig
from services.gan import GanCheckpoint
from services.synthetic_data import CorpusManifest, load_corpus
from utils.image_core import ImageTensor, RegionMask, masked_mse, mse, stitch
from utils.layers import LRELU_SLOPE, ConvTrunk
from utils.training import (
    all_finite,
    derive_seed,
    diagnostics_dir,
    gradients,
    log_history_row,
    pick_device,
    progress,
    seed_everything,
    to_hwc,
    to_nchw,
    torch_generator,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "encoder"
HISTORY_COLUMNS = ["step", "code_term", "image_term", "region_term", "total"]

CodeFn = Callable[[torch.Tensor], torch.Tensor]


class Encoder(nn.Module):
    """Convolutional down-sampling stack ending in a code-dimension linear output."""

    def __init__(self, resolution: int, code_dim: int, channels: int = 32):
        super().__init__()
        self.resolution = resolution
        self.code_dim = code_dim
        self.trunk = ConvTrunk(resolution, channels)
        hidden = max(code_dim, channels)
        self.fc = nn.Linear(self.trunk.out_features, hidden)
        self.out = nn.Linear(hidden, code_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(F.leaky_relu(self.fc(self.trunk(x)), LRELU_SLOPE))


# ----------------------------
# Loss
# ----------------------------

@dataclass(frozen=True)
class LossWeights:
    lambda_img: float = 1.0
    lambda_df: float = 5.0

    def __post_init__(self):
        if self.lambda_img < 0 or self.lambda_df < 0:
            raise ArgumentError(f"loss weights must be >= 0, got ({self.lambda_img}, {self.lambda_df})")


@dataclass
class LossBreakdown:
    code_term: torch.Tensor
    image_term: torch.Tensor
    region_term: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "code_term": float(self.code_term),
            "image_term": float(self.image_term),
            "region_term": float(self.region_term),
            "total": float(self.total),
        }


def _is_empty(t: Optional[torch.Tensor]) -> bool:
    return t is None or t.shape[0] == 0


def encoder_loss(codes: Optional[torch.Tensor], reals: Optional[torch.Tensor], masks: Optional[torch.Tensor],
                 weights: LossWeights, encoder: CodeFn, generator: CodeFn) -> LossBreakdown:
    """Composite area-preserving loss.

    Args:
        codes: (K, d) sampled reference codes, or None/empty.
        reals: (J, C, H, W) real images, or None/empty.
        masks: (J, H, W) region weights for ``reals``.
        weights: lambda_img / lambda_df.
        encoder: images -> codes.
        generator: codes -> images.

    An empty input list contributes a zero term.
    """
    if _is_empty(codes) and _is_empty(reals):
        raise ArgumentError("encoder_loss needs sampled codes or real images")
    ref = codes if not _is_empty(codes) else reals
    zero = torch.zeros((), dtype=ref.dtype, device=ref.device)

    code_term = zero
    if not _is_empty(codes):
        code_term = (codes - encoder(generator(codes))).pow(2).flatten(1).mean(dim=1).mean()

    image_term = region_term = zero
    if not _is_empty(reals):
        if masks is None or masks.shape[0] != reals.shape[0] or masks.shape[1:] != reals.shape[2:]:
            raise ArgumentError("masks must be (J, H, W) matching the real images")
        mask_mass = masks.flatten(1).sum(dim=1)
        if bool((mask_mass <= 0).any()):
            raise ArgumentError("mask is identically zero; masked mean is undefined")
        recon = generator(encoder(reals))
        sq = (reals - recon).pow(2)
        image_term = sq.flatten(1).mean(dim=1).mean()
        channels = reals.shape[1]
        region_term = ((masks[:, None] * sq).flatten(1).sum(dim=1) / (channels * mask_mass)).mean()

    total = code_term + weights.lambda_img * image_term + weights.lambda_df * region_term
    return LossBreakdown(code_term=code_term, image_term=image_term, region_term=region_term, total=total)


# ----------------------------
# Checkpoint
# ----------------------------

@dataclass
class EncoderCheckpoint:
    config: EncoderTrainConfig
    encoder: Encoder
    resolution: int
    parent_gan_fingerprint: str
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    corpus_fingerprint: str = ""

    @property
    def target_space(self) -> str:
        return self.config.target_space

    @property
    def code_dim(self) -> int:
        return self.encoder.code_dim

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.config.lambda_img, self.config.lambda_df)

    def modules(self) -> Dict[str, nn.Module]:
        return {"encoder": self.encoder}

    def fingerprint(self) -> str:
        return db.sha256_hex(
            db.modules_checksum(self.modules()).encode("utf-8"),
            db.canonical_json(self.config.model_dump(mode="json")).encode("utf-8"),
            self.parent_gan_fingerprint.encode("utf-8"),
        )

    def save(self, path: str | Path) -> Path:
        manifest = {
            "config": self.config.model_dump(mode="json"),
            "step": self.step,
            "resolution": self.resolution,
            "code_dim": self.code_dim,
            "target_space": self.target_space,
            "parent_gan_fingerprint": self.parent_gan_fingerprint,
            "corpus_fingerprint": self.corpus_fingerprint,
            "fingerprint": self.fingerprint(),
        }
        return db.save_checkpoint(path, CHECKPOINT_KIND, self.modules(), manifest, self.history, HISTORY_COLUMNS)

    @classmethod
    def load(cls, path: str | Path) -> "EncoderCheckpoint":
        archive = db.load_checkpoint(path, CHECKPOINT_KIND)
        m = archive.manifest
        config = EncoderTrainConfig(**m["config"])
        encoder = Encoder(int(m["resolution"]), int(m["code_dim"]), config.channels)
        db.load_module_arrays(encoder, "encoder", archive.arrays)
        return cls(config=config, encoder=encoder, resolution=int(m["resolution"]),
                   parent_gan_fingerprint=m["parent_gan_fingerprint"], step=int(m["step"]),
                   history=db.archive_history(archive), corpus_fingerprint=m.get("corpus_fingerprint", ""))


def check_compatible(enc: EncoderCheckpoint, gan: GanCheckpoint) -> None:
    if enc.parent_gan_fingerprint != gan.fingerprint():
        raise ConfigurationError(
            "encoder was trained against a different GAN checkpoint "
            f"({enc.parent_gan_fingerprint[:12]} != {gan.fingerprint()[:12]})"
        )
    if enc.resolution != gan.resolution or enc.code_dim != gan.code_dim(enc.target_space):
        raise ConfigurationError("encoder and GAN disagree on resolution or code dimension")


# ----------------------------
# Training
# ----------------------------

def train_encoder(gan: GanCheckpoint, corpus: CorpusManifest, mask_source: Callable,
                  config: EncoderTrainConfig, device: torch.device | None = None) -> EncoderCheckpoint:
    """Train E against a frozen generator with the composite loss.

    ``mask_source(corpus_arrays, index)`` returns the RegionMask for a corpus entry.
    """
    if corpus.count < 1 or not corpus.entries:
        raise ArgumentError("corpus is empty")
    if corpus.resolution != gan.resolution:
        raise ArgumentError(f"corpus resolution {corpus.resolution} does not match GAN resolution {gan.resolution}")

    seed_everything(config.seed)
    device = device or pick_device()
    space = config.target_space
    torch.manual_seed(config.seed)
    encoder = Encoder(gan.resolution, gan.code_dim(space), config.channels)
    enc = EncoderCheckpoint(config=config, encoder=encoder, resolution=gan.resolution,
                            parent_gan_fingerprint=gan.fingerprint(),
                            corpus_fingerprint=corpus.fingerprint())
    if config.steps == 0:
        return enc

    arrays = load_corpus(corpus, aligned=config.align_corpus)
    reals_all = to_nchw(arrays.images).to(device)
    masks_all = torch.from_numpy(
        np.stack([mask_source(arrays, i) for i in range(len(arrays.images))]).astype(np.float32)
    ).to(device)

    weights = enc.weights
    n_syn = int(round(config.sample_mix * config.batch_size))
    n_real = config.batch_size - n_syn
    gen = torch_generator(derive_seed(config.seed, 2))
    gan.to(device)
    encoder.to(device)
    opt = torch.optim.Adam(encoder.parameters(), lr=config.lr)
    before = gan.generator_checksum()

    logger.info(f"Training encoder ({space} space, weights {weights}) on {corpus.count} images for {config.steps} steps")
    with gan.frozen_generator():
        for _ in progress(range(config.steps), total=config.steps, desc="encoder"):
            codes = reals = masks = None
            if n_syn:
                z = torch.randn(n_syn, gan.d_z, generator=gen).to(device)
                with torch.no_grad():
                    codes = gan.mapping(z) if space == "W" else z
            if n_real:
                idx = torch.randint(reals_all.shape[0], (n_real,), generator=gen).to(device)
                reals, masks = reals_all[idx], masks_all[idx]
            loss = encoder_loss(codes, reals, masks, weights, encoder,
                                lambda c: gan.synthesize(c, space))
            opt.zero_grad(set_to_none=True)
            if all_finite(loss.total):
                loss.total.backward()
            row = {"step": enc.step + 1, **loss.as_floats()}
            if not all_finite(loss.total, *gradients(encoder.parameters())):
                # enc still holds the parameters from before this update
                path = diagnostics_dir() / f"encoder_nonfinite_step{row['step']:06}.zip"
                enc.encoder.to("cpu")
                enc.save(path)
                logger.error(f"[encoder] non-finite loss at step {row['step']}: {row}; diagnostic checkpoint {path}")
                raise NonFiniteLossError(f"non-finite encoder loss at step {row['step']}", checkpoint_path=str(path))
            opt.step()
            enc.step += 1
            enc.history.append(row)
            log_history_row("encoder", row, config.log_every)

    gan.to(torch.device("cpu"))
    encoder.to(torch.device("cpu"))
    if gan.generator_checksum() != before:
        raise PreconditionError("generator parameters changed during encoder training")
    return enc


# ----------------------------
# Inference
# ----------------------------

def _image_batch(x, resolution: int) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim == 3
    if arr.shape[-3:] != (resolution, resolution, 3):
        raise ArgumentError(f"expected {resolution}x{resolution}x3 images, got {arr.shape}")
    return to_nchw(arr), single


@torch.no_grad()
def encode(x, enc: EncoderCheckpoint) -> np.ndarray:
    batch, single = _image_batch(x, enc.resolution)
    codes = enc.encoder(batch).numpy()
    return codes[0] if single else codes


@torch.no_grad()
def reconstruct(x, enc: EncoderCheckpoint, gan: GanCheckpoint) -> np.ndarray:
    """G(E(x))."""
    check_compatible(enc, gan)
    batch, single = _image_batch(x, enc.resolution)
    images = to_hwc(gan.synthesize(enc.encoder(batch), enc.target_space))
    return images[0] if single else images


@dataclass(frozen=True)
class InversionReport:
    stitched: np.ndarray
    region_fidelity: Optional[float]  # masked_mse(output, target, mask); None for an empty mask
    stitched_mse: float  # mse(output, stitched)

    def as_dict(self) -> dict:
        return {"region_fidelity": self.region_fidelity, "stitched_mse": self.stitched_mse}


def merge_and_invert(target: ImageTensor, target_mask: RegionMask, context: ImageTensor,
                     enc: EncoderCheckpoint, gan: GanCheckpoint) -> tuple[np.ndarray, InversionReport]:
    """Paste the masked target region onto the context, then G(E(stitched))."""
    # float64 blend so context == target stitches back to target bit-exactly
    stitched = stitch(np.asarray(target, dtype=np.float64), np.asarray(context, dtype=np.float64),
                      np.asarray(target_mask, dtype=np.float64)).astype(np.float32)
    output = reconstruct(stitched, enc, gan)
    fidelity = masked_mse(output, target, target_mask) if float(np.sum(target_mask)) > 0 else None
    return output, InversionReport(stitched=stitched, region_fidelity=fidelity,
                                   stitched_mse=mse(output, stitched))


@torch.no_grad()
def heldout_loss(enc: EncoderCheckpoint, gan: GanCheckpoint, images: np.ndarray, masks: np.ndarray,
                 codes_seed: int = 0, code_count: int = 0) -> Dict[str, float]:
    """Loss breakdown of a trained encoder on held-out images (and optionally fresh codes)."""
    check_compatible(enc, gan)
    space = enc.target_space
    codes = None
    if code_count:
        z = torch.randn(code_count, gan.d_z, generator=torch_generator(codes_seed))
        codes = gan.mapping(z) if space == "W" else z
    loss = encoder_loss(codes, to_nchw(images), torch.from_numpy(np.asarray(masks, dtype=np.float32)),
                        enc.weights, enc.encoder, lambda c: gan.synthesize(c, space))
    return loss.as_floats()
