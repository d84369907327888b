"""Toy style-based GAN: Z -> W mapping network, modulated-convolution synthesis
network, convolutional discriminator, adversarial training and fine-tuning.

Networks operate on NCHW tensors in [-1, 1]; the public inference helpers
(`generate`, `discriminate`, ...) take and return numpy arrays.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import db
from errors import ArgumentError, NonFiniteLossError
from services.config import GanTrainConfig
from services.synthetic_data import CorpusManifest, load_corpus
from utils.layers import LRELU_SLOPE, ConvTrunk, num_downsamples
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

CHECKPOINT_KIND = "gan"
HISTORY_COLUMNS = ["step", "d_loss", "g_loss", "r1_penalty", "d_accuracy"]


# ----------------------------
# Networks
# ----------------------------

class PixelNorm(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(torch.mean(x * x, dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """f: Z -> W. Pixel-normalized input, fully connected layers, lrelu between."""

    def __init__(self, d_z: int, d_w: int, num_layers: int = 3):
        super().__init__()
        self.d_z = d_z
        self.d_w = d_w
        self.norm = PixelNorm()
        dims = [d_z] + [d_w] * num_layers
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(num_layers))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.norm(z)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, LRELU_SLOPE)
        return x


class ModulatedConv2d(nn.Module):
    """Convolution whose input channels are scaled per sample by an affine map of w,
    optionally followed by weight demodulation. Implemented as one grouped conv."""

    def __init__(self, in_channels: int, out_channels: int, d_w: int, kernel_size: int,
                 demodulate: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.wscale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.style = nn.Linear(d_w, in_channels)
        nn.init.ones_(self.style.bias)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        batch, _, height, width = x.shape
        style = self.style(w)
        weight = self.weight[None] * self.wscale * style[:, None, :, None, None]
        if self.demodulate:
            demod = torch.rsqrt(weight.pow(2).sum(dim=[2, 3, 4]) + 1e-8)
            weight = weight * demod[:, :, None, None, None]
        weight = weight.reshape(batch * self.out_channels, self.in_channels,
                                self.kernel_size, self.kernel_size)
        x = x.reshape(1, batch * self.in_channels, height, width)
        out = F.conv2d(x, weight, padding=self.kernel_size // 2, groups=batch)
        return out.reshape(batch, self.out_channels, height, width) + self.bias[None, :, None, None]


class SynthesisNetwork(nn.Module):
    """Learned 4x4 constant, then nearest-upsample + modulated conv blocks up to
    the output resolution, then a 1x1 to-RGB and tanh."""

    def __init__(self, resolution: int, d_w: int, channels: int):
        super().__init__()
        self.resolution = resolution
        self.d_w = d_w
        self.const = nn.Parameter(torch.randn(1, channels, 4, 4))
        self.input_conv = ModulatedConv2d(channels, channels, d_w, 3)
        self.blocks = nn.ModuleList(
            ModulatedConv2d(channels, channels, d_w, 3) for _ in range(num_downsamples(resolution))
        )
        self.to_rgb = ModulatedConv2d(channels, 3, d_w, 1, demodulate=False)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        x = self.const.expand(w.shape[0], -1, -1, -1)
        x = F.leaky_relu(self.input_conv(x, w), LRELU_SLOPE)
        for block in self.blocks:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(block(x, w), LRELU_SLOPE)
        return torch.tanh(self.to_rgb(x, w))


class Discriminator(nn.Module):
    def __init__(self, resolution: int, channels: int):
        super().__init__()
        self.resolution = resolution
        self.trunk = ConvTrunk(resolution, channels)
        self.fc = nn.Linear(self.trunk.out_features, channels)
        self.out = nn.Linear(channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(F.leaky_relu(self.fc(self.trunk(x)), LRELU_SLOPE)).squeeze(1)


# ----------------------------
# Losses
# ----------------------------

def generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating logistic loss."""
    return F.softplus(-fake_logits).mean()


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def r1_penalty(discriminator: nn.Module, reals: torch.Tensor):
    """Squared gradient norm of D at real samples, batch mean. Returns (logits, penalty)."""
    reals = reals.detach().requires_grad_(True)
    logits = discriminator(reals)
    (grads,) = torch.autograd.grad(logits.sum(), reals, create_graph=True)
    return logits, grads.pow(2).sum(dim=[1, 2, 3]).mean()


# ----------------------------
# Checkpoint
# ----------------------------

@dataclass
class GanCheckpoint:
    config: GanTrainConfig
    mapping: MappingNetwork
    synthesis: SynthesisNetwork
    discriminator: Discriminator
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)
    corpus_fingerprint: str = ""
    parent_fingerprint: Optional[str] = None

    @classmethod
    def initialize(cls, config: GanTrainConfig) -> "GanCheckpoint":
        torch.manual_seed(config.seed)
        return cls(
            config=config,
            mapping=MappingNetwork(config.d_z, config.d_w, config.mapping_layers),
            synthesis=SynthesisNetwork(config.resolution, config.d_w, config.channels),
            discriminator=Discriminator(config.resolution, config.channels),
        )

    @property
    def resolution(self) -> int:
        return self.config.resolution

    @property
    def d_z(self) -> int:
        return self.config.d_z

    @property
    def d_w(self) -> int:
        return self.config.d_w

    def modules(self) -> Dict[str, nn.Module]:
        return {"mapping": self.mapping, "synthesis": self.synthesis, "discriminator": self.discriminator}

    def generator_checksum(self) -> str:
        """Checksum over the mapping and synthesis parameters only."""
        return db.modules_checksum({"mapping": self.mapping, "synthesis": self.synthesis})

    def fingerprint(self) -> str:
        return db.sha256_hex(
            db.modules_checksum(self.modules()).encode("utf-8"),
            db.canonical_json(self.config.model_dump(mode="json")).encode("utf-8"),
        )

    def code_dim(self, space: str) -> int:
        return self.d_z if space == "Z" else self.d_w

    def synthesize(self, codes: torch.Tensor, space: str = "W") -> torch.Tensor:
        """Codes in Z or W -> NCHW images."""
        w = self.mapping(codes) if space == "Z" else codes
        return self.synthesis(w)

    @contextlib.contextmanager
    def frozen_generator(self):
        """Disable gradients on the mapping and synthesis networks inside the block."""
        flags = [(p, p.requires_grad) for m in (self.mapping, self.synthesis) for p in m.parameters()]
        for p, _ in flags:
            p.requires_grad_(False)
        try:
            yield self
        finally:
            for p, flag in flags:
                p.requires_grad_(flag)

    def copy(self) -> "GanCheckpoint":
        return copy.deepcopy(self)

    def to(self, device: torch.device) -> "GanCheckpoint":
        for module in self.modules().values():
            module.to(device)
        return self

    def save(self, path: str | Path) -> Path:
        manifest = {
            "config": self.config.model_dump(mode="json"),
            "step": self.step,
            "resolution": self.resolution,
            "d_z": self.d_z,
            "d_w": self.d_w,
            "corpus_fingerprint": self.corpus_fingerprint,
            "parent_fingerprint": self.parent_fingerprint,
            "fingerprint": self.fingerprint(),
        }
        return db.save_checkpoint(path, CHECKPOINT_KIND, self.modules(), manifest, self.history, HISTORY_COLUMNS)

    @classmethod
    def load(cls, path: str | Path) -> "GanCheckpoint":
        archive = db.load_checkpoint(path, CHECKPOINT_KIND)
        manifest = archive.manifest
        ckpt = cls.initialize(GanTrainConfig(**manifest["config"]))
        for name, module in ckpt.modules().items():
            db.load_module_arrays(module, name, archive.arrays)
        ckpt.step = int(manifest["step"])
        ckpt.history = db.archive_history(archive)
        ckpt.corpus_fingerprint = manifest.get("corpus_fingerprint", "")
        ckpt.parent_fingerprint = manifest.get("parent_fingerprint")
        logger.info(f"Loaded GAN checkpoint {path} (step {ckpt.step}, {ckpt.resolution}px)")
        return ckpt


# ----------------------------
# Inference
# ----------------------------

def _as_batch(codes, dim: int, what: str) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(codes, dtype=np.float32)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ArgumentError(f"{what} must have dimension {dim}, got shape {np.shape(codes)}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{what} contains non-finite entries")
    return torch.from_numpy(arr), single


def sample_latent(count: int, seed: int, d_z: int = 64) -> np.ndarray:
    """(count, d_z) standard-normal latent codes, deterministic in seed."""
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    return torch.randn(count, d_z, generator=torch_generator(seed)).numpy()


@torch.no_grad()
def map_latent(z, mapping: MappingNetwork) -> np.ndarray:
    batch, single = _as_batch(z, mapping.d_z, "latent code")
    w = mapping(batch).numpy()
    return w[0] if single else w


@torch.no_grad()
def generate(w, synthesis: SynthesisNetwork) -> np.ndarray:
    """Style code(s) -> ImageTensor(s) in [-1, 1]."""
    batch, single = _as_batch(w, synthesis.d_w, "style code")
    images = to_hwc(synthesis(batch))
    return images[0] if single else images


@torch.no_grad()
def discriminate(x, discriminator: Discriminator) -> float | np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    single = arr.ndim == 3
    res = discriminator.resolution
    if arr.shape[-3:] != (res, res, 3):
        raise ArgumentError(f"discriminator expects {res}x{res}x3 images, got {arr.shape}")
    scores = discriminator(to_nchw(arr)).numpy()
    return float(scores[0]) if single else scores


# ----------------------------
# Training
# ----------------------------

def _corpus_tensor(corpus: CorpusManifest, config: GanTrainConfig) -> torch.Tensor:
    if corpus.count < 1 or not corpus.entries:
        raise ArgumentError("corpus is empty")
    if corpus.resolution != config.resolution:
        raise ArgumentError(
            f"corpus resolution {corpus.resolution} does not match GAN resolution {config.resolution}"
        )
    return to_nchw(load_corpus(corpus, aligned=config.align_corpus).images)


def _abort_nonfinite(ckpt: GanCheckpoint, label: str, row: dict) -> None:
    """Save the parameters as they were before the failing update, then raise."""
    path = diagnostics_dir() / f"{label}_nonfinite_step{row['step']:06}.zip"
    ckpt.save(path)
    logger.error(f"[{label}] non-finite loss at step {row['step']}: {row}; diagnostic checkpoint {path}")
    raise NonFiniteLossError(f"non-finite {label} loss at step {row['step']}", checkpoint_path=str(path))


def _adversarial_steps(ckpt: GanCheckpoint, reals: torch.Tensor, steps: int, seed: int, label: str,
                       device: torch.device) -> None:
    cfg = ckpt.config
    gen = torch_generator(seed)
    reals = reals.to(device)
    g_params = list(ckpt.mapping.parameters()) + list(ckpt.synthesis.parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr_g, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(ckpt.discriminator.parameters(), lr=cfg.lr_d, betas=(0.0, 0.99))
    batch = min(cfg.batch_size, max(reals.shape[0], 2))

    for _ in progress(range(steps), total=steps, desc=label):
        idx = torch.randint(reals.shape[0], (batch,), generator=gen)
        real = reals[idx.to(device)]
        z = torch.randn(batch, cfg.d_z, generator=gen).to(device)

        # discriminator step
        with torch.no_grad():
            fake = ckpt.synthesize(z, "Z")
        if cfg.r1_weight > 0:
            real_logits, penalty = r1_penalty(ckpt.discriminator, real)
        else:
            real_logits, penalty = ckpt.discriminator(real), torch.zeros((), device=device)
        fake_logits = ckpt.discriminator(fake)
        d_loss = discriminator_loss(real_logits, fake_logits)
        step = ckpt.step + 1
        opt_d.zero_grad(set_to_none=True)
        if all_finite(d_loss, penalty):
            (d_loss + 0.5 * cfg.r1_weight * penalty).backward()
        if not all_finite(d_loss, penalty, *gradients(ckpt.discriminator.parameters())):
            _abort_nonfinite(ckpt, label, {"step": step, "d_loss": float(d_loss), "r1_penalty": float(penalty)})
        d_before = {k: v.detach().clone() for k, v in ckpt.discriminator.state_dict().items()}
        opt_d.step()

        # generator step
        z = torch.randn(batch, cfg.d_z, generator=gen).to(device)
        g_loss = generator_loss(ckpt.discriminator(ckpt.synthesize(z, "Z")))
        opt_g.zero_grad(set_to_none=True)
        if all_finite(g_loss):
            g_loss.backward()
        if not all_finite(g_loss, *gradients(g_params)):
            ckpt.discriminator.load_state_dict(d_before)
            _abort_nonfinite(ckpt, label, {"step": step, "d_loss": float(d_loss), "g_loss": float(g_loss)})
        opt_g.step()

        ckpt.step = step
        accuracy = 0.5 * (float((real_logits > 0).float().mean()) + float((fake_logits < 0).float().mean()))
        row = {"step": ckpt.step, "d_loss": float(d_loss), "g_loss": float(g_loss),
               "r1_penalty": float(penalty), "d_accuracy": accuracy}
        ckpt.history.append(row)
        log_history_row(label, row, cfg.log_every)


def train_gan(corpus: CorpusManifest, config: GanTrainConfig,
              device: torch.device | None = None) -> GanCheckpoint:
    """Adversarial training from scratch on a base corpus."""
    reals = _corpus_tensor(corpus, config)
    seed_everything(config.seed)
    device = device or pick_device()
    ckpt = GanCheckpoint.initialize(config).to(device)
    ckpt.corpus_fingerprint = corpus.fingerprint()
    logger.info(f"Training GAN on {corpus.count} images ({config.resolution}px) for {config.steps} steps")
    _adversarial_steps(ckpt, reals, config.steps, derive_seed(config.seed, 0), "gan", device)
    return ckpt.to(torch.device("cpu"))


def fine_tune_gan(checkpoint: GanCheckpoint, clinic_corpus: CorpusManifest, steps: int,
                  seed: int | None = None, device: torch.device | None = None) -> GanCheckpoint:
    """Continue adversarial training on a (clinic) corpus. The input checkpoint is
    not modified; the result records it as its parent."""
    if steps < 0:
        raise ArgumentError(f"steps must be >= 0, got {steps}")
    reals = _corpus_tensor(clinic_corpus, checkpoint.config)
    tuned = checkpoint.copy()
    tuned.parent_fingerprint = checkpoint.fingerprint()
    tuned.corpus_fingerprint = clinic_corpus.fingerprint()
    tuned.history = []
    if steps == 0:
        return tuned
    seed = checkpoint.config.seed if seed is None else seed
    seed_everything(seed)
    device = device or pick_device()
    tuned.to(device)
    logger.info(f"Fine-tuning GAN on {clinic_corpus.count} images for {steps} steps")
    _adversarial_steps(tuned, reals, steps, derive_seed(seed, 1), "finetune", device)
    return tuned.to(torch.device("cpu"))


@torch.no_grad()
def discriminator_accuracy(ckpt: GanCheckpoint, reals: np.ndarray, seed: int) -> float:
    """Real-vs-fake accuracy of D on ``reals`` and as many generated samples."""
    z = torch.from_numpy(sample_latent(len(reals), seed, ckpt.d_z))
    fake_logits = ckpt.discriminator(ckpt.synthesize(z, "Z"))
    real_logits = ckpt.discriminator(to_nchw(reals))
    return 0.5 * (float((real_logits > 0).float().mean()) + float((fake_logits < 0).float().mean()))
