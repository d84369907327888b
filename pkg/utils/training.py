"""Shared helpers for the training loops: seeding, devices, tensor layout,
progress bars and loss-history bookkeeping.
"""

from __future__ import annotations

import logging
import os
import random
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from tqdm import tqdm

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch and force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for (seed, keys...), independent of call order."""
    seq = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def pick_device(name: str | None = None) -> torch.device:
    name = name or os.getenv("DEVICE", "cpu")
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning(f"DEVICE={name} requested but CUDA is unavailable, using cpu")
        name = "cpu"
    return torch.device(name)


def diagnostics_dir() -> Path:
    return Path(os.getenv("DIAGNOSTICS_DIR", "runs/diagnostics"))


def progress(iterable: Iterable, total: int | None = None, desc: str = ""):
    """tqdm wrapper; PROGRESS=0 disables bars (CI, tests)."""
    disabled = os.getenv("PROGRESS", "1") == "0"
    return tqdm(iterable, total=total, desc=desc, disable=disabled, leave=False)


def to_nchw(images, device: torch.device | None = None, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (N, H, W, 3) numpy -> (N, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)
    return t.to(device) if device is not None else t


def to_hwc(tensor: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) or (3, H, W) tensor -> float32 numpy in HWC layout."""
    arr = tensor.detach().cpu().to(torch.float32).numpy()
    if arr.ndim == 4:
        return arr.transpose(0, 2, 3, 1)
    return arr.transpose(1, 2, 0)


def all_finite(*values: torch.Tensor | float) -> bool:
    for v in values:
        if isinstance(v, torch.Tensor):
            if not bool(torch.isfinite(v).all()):
                return False
        elif not np.isfinite(v):
            return False
    return True


def gradients(parameters) -> list[torch.Tensor]:
    """The populated .grad tensors of `parameters`, for `all_finite` checks before an optimizer step."""
    return [p.grad for p in parameters if p.grad is not None]


def log_history_row(name: str, row: dict, log_every: int) -> None:
    step = row["step"]
    if log_every and (step % log_every == 0 or step == 1):
        terms = " ".join(f"{k}={v:.5f}" for k, v in row.items() if k != "step")
        logger.info(f"[{name}] step {step}: {terms}")
