"""Configuration models, run-config loading and third-party service initialization."""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigurationError

logger = logging.getLogger(__name__)

SUPPORTED_RESOLUTIONS = (32, 64, 128)
ATTRIBUTE_NAMES = ("gender", "age", "race")


def initialize_sentry():
    """Initialize Sentry error monitoring if available.

    No-op if SENTRY_DSN is unset or sentry_sdk not installed.
    """
    dsn = os.getenv("SENTRY_DSN", "")
    if not dsn:
        return False
    try:
        import sentry_sdk
        from sentry_sdk.integrations.logging import LoggingIntegration
    except ImportError:
        return False

    sentry_sdk.init(
        dsn=dsn,
        integrations=[LoggingIntegration(level=logging.INFO, event_level=logging.ERROR)],
        traces_sample_rate=float(os.getenv("SENTRY_TRACES_SAMPLE_RATE", "0.0")),
        environment=os.getenv("SENTRY_ENV", os.getenv("ENV", "development")),
        send_default_pii=False,
    )
    logger.info("Sentry error reporting enabled")
    return True


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once; rich console output when available."""
    level_name = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    handlers = None
    try:
        from rich.logging import RichHandler

        handlers = [RichHandler(rich_tracebacks=True, show_path=False)]
        fmt = "%(message)s"
    except Exception:
        fmt = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=fmt,
                        handlers=handlers, force=True)
    # Reduce verbosity from noisy libraries in normal runs
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


# --------------------
# Settings models
# --------------------

class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())


def _power_of_two(value: int) -> int:
    if value < 8 or value & (value - 1):
        raise ValueError(f"must be a power of two >= 8, got {value}")
    return value


class GanTrainConfig(_Settings):
    resolution: int = 64
    d_z: int = Field(64, ge=1)
    d_w: int = Field(64, ge=1)
    channels: int = Field(32, ge=1)
    mapping_layers: int = Field(3, ge=1)
    batch_size: int = Field(16, ge=2)
    steps: int = Field(10_000, ge=1)
    lr_g: float = Field(2e-4, gt=0)
    lr_d: float = Field(2e-4, gt=0)
    r1_weight: float = Field(1.0, ge=0)
    seed: int = 0
    log_every: int = Field(100, ge=0)
    align_corpus: bool = True

    @field_validator("resolution")
    @classmethod
    def _check_resolution(cls, value):
        return _power_of_two(value)


class EncoderTrainConfig(_Settings):
    steps: int = Field(5_000, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-4, gt=0)
    seed: int = 0
    lambda_img: float = Field(1.0, ge=0)
    lambda_df: float = Field(5.0, ge=0)
    target_space: Literal["Z", "W"] = "W"
    sample_mix: float = Field(0.5, ge=0, le=1)
    channels: int = Field(32, ge=1)
    mask_source: Literal["dental_region", "landmarks"] = "dental_region"
    feather_radius: float = Field(2.0, ge=0)
    dental_margin: Tuple[float, float] = (0.25, 0.60)
    align_corpus: bool = True
    log_every: int = Field(100, ge=0)


class DetectorTrainConfig(_Settings):
    steps: int = Field(3_000, ge=0)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(5e-4, gt=0)
    seed: int = 0
    channels: int = Field(16, ge=1)
    hidden: int = Field(64, ge=1)
    jitter_scale: float = Field(0.10, ge=0, lt=1)
    jitter_rotation_deg: float = Field(10.0, ge=0)
    jitter_shift: float = Field(0.12, ge=0, lt=0.5)
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    log_every: int = Field(100, ge=0)


class ClassifierTrainConfig(_Settings):
    steps: int = Field(3_000, ge=0)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(5e-4, gt=0)
    seed: int = 0
    channels: int = Field(16, ge=1)
    hidden: int = Field(64, ge=1)
    jitter_scale: float = Field(0.05, ge=0, lt=1)
    jitter_rotation_deg: float = Field(5.0, ge=0)
    jitter_shift: float = Field(0.05, ge=0, lt=0.5)
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    align_corpus: bool = True
    log_every: int = Field(100, ge=0)


class DataConfig(_Settings):
    count: int = Field(2_000, ge=1)
    clinic_count: int = Field(175, ge=1)
    negatives_count: int = Field(2_000, ge=1)
    seed: int = 0
    distribution: Literal["base", "clinic"] = "base"
    resolution: int = 64
    race_classes: int = Field(3, ge=1)
    workers: int = Field(1, ge=1)

    @field_validator("resolution")
    @classmethod
    def _supported(cls, value):
        if value not in SUPPORTED_RESOLUTIONS:
            raise ValueError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {value}")
        return value


class FinetuneConfig(_Settings):
    steps: int = Field(1_000, ge=0)
    seed: int = 0


class ContextDBConfig(_Settings):
    count: int = Field(64, ge=1)
    seed: int = 0
    labeling: Literal["auto", "manifest"] = "auto"
    race_classes: int = Field(3, ge=1)


class PipelineConfig(_Settings):
    gan_checkpoint: Path
    encoder_checkpoint: Path
    detector_checkpoint: Path
    classifier_checkpoints: Dict[str, Path]
    context_db: Path
    presence_threshold: float = Field(0.5, gt=0, lt=1)
    feather_radius: float = Field(2.0, ge=0)
    dental_margin: Tuple[float, float] = (0.25, 0.60)
    seed: int = 0
    output_dir: Path = Path("runs/deidentify")
    workers: int = Field(1, ge=1)

    @field_validator("dental_margin")
    @classmethod
    def _nonnegative_margins(cls, value):
        if value[0] < 0 or value[1] < 0:
            raise ValueError("dental margins must be >= 0")
        return value

    @field_validator("classifier_checkpoints")
    @classmethod
    def _all_attributes(cls, value):
        missing = [a for a in ATTRIBUTE_NAMES if a not in value]
        if missing:
            raise ValueError(f"missing classifier checkpoints for: {', '.join(missing)}")
        return value


class RunConfig(BaseModel):
    """Shape of the run-config document; section contents are validated by the stage models."""

    model_config = ConfigDict(extra="forbid")
    seed: Optional[int] = None
    resolution: Optional[int] = None
    paths: Dict[str, Any] = Field(default_factory=dict)
    data: Dict[str, Any] = Field(default_factory=dict)
    gan: Dict[str, Any] = Field(default_factory=dict)
    finetune: Dict[str, Any] = Field(default_factory=dict)
    encoder: Dict[str, Any] = Field(default_factory=dict)
    detector: Dict[str, Any] = Field(default_factory=dict)
    classifier: Dict[str, Any] = Field(default_factory=dict)
    contextdb: Dict[str, Any] = Field(default_factory=dict)
    pipeline: Dict[str, Any] = Field(default_factory=dict)


SettingsT = TypeVar("SettingsT", bound=BaseModel)


def build_settings(model: Type[SettingsT], *sources: Optional[Dict[str, Any]], **overrides: Any) -> SettingsT:
    """Merge dict sources left to right, then non-None overrides, and validate.

    Raises ConfigurationError with pydantic's message on invalid values.
    """
    values: Dict[str, Any] = {}
    for src in sources:
        if src:
            values.update(src)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model(**values)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {model.__name__}: {e}") from e


# --------------------
# Run-config file
# --------------------

RUN_CONFIG_SECTIONS = (
    "paths", "data", "gan", "finetune", "encoder", "detector", "classifier", "contextdb", "pipeline",
)


def load_run_config(path: Optional[str | Path] = None) -> Dict[str, Any]:
    """Load the declarative run-config YAML (strictyaml, schema-less).

    Values come back as strings/lists/dicts; typing happens in the pydantic
    models. Missing default file -> empty config. Unknown top-level sections are
    a configuration error.
    """
    import strictyaml

    explicit = path is not None
    path = Path(path or os.getenv("RUN_CONFIG", "run_config.yaml"))
    if not path.exists():
        if explicit:
            raise ConfigurationError(f"run-config file not found: {path}")
        logger.debug(f"No run-config at {path}; using defaults")
        return {}
    try:
        data = strictyaml.load(path.read_text(encoding="utf-8")).data
    except Exception as e:
        raise ConfigurationError(f"cannot parse run-config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"run-config {path} must be a mapping")
    unknown = sorted(set(data) - set(RUN_CONFIG_SECTIONS) - {"seed", "resolution"})
    if unknown:
        raise ConfigurationError(f"unknown run-config sections: {', '.join(unknown)}")
    try:
        shape = RunConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run-config {path}: {e}") from e
    data = {k: v for k, v in shape.model_dump().items() if v not in (None, {})}
    logger.info(f"Loaded run-config from {path}")
    return data


def config_section(run_config: Dict[str, Any], name: str,
                   model: Optional[Type[BaseModel]] = None) -> Dict[str, Any]:
    """One section plus the shared top-level `seed`/`resolution` defaults
    (only those fields `model` declares)."""
    section = dict(run_config.get(name) or {})
    shared = ("seed", "resolution")
    if model is not None:
        shared = tuple(k for k in shared if k in model.model_fields)
    for key in shared:
        if key in run_config and key not in section:
            section[key] = run_config[key]
    return section
