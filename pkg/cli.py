# cli.py
# ruff: noqa: E402
"""Command-line entry point: `python cli.py <group> <command> ...`.

Exit codes: 0 success, 2 validation error, 3 refusal (no face), 4 I/O error,
1 anything else.
"""
from dotenv import load_dotenv

load_dotenv(override=False)

import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import click

import db
from errors import (
    ArgumentError,
    ConfigurationError,
    LabelManifestError,
    NoFaceError,
    NonFiniteLossError,
    NumericalError,
    PreconditionError,
)
from services.config import (
    ATTRIBUTE_NAMES,
    ClassifierTrainConfig,
    ContextDBConfig,
    DataConfig,
    DetectorTrainConfig,
    EncoderTrainConfig,
    FinetuneConfig,
    GanTrainConfig,
    PipelineConfig,
    build_settings,
    config_section,
    initialize_sentry,
    load_run_config,
    setup_logging,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_REFUSAL = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5
EXIT_PRECONDITION = 6


# ----------------------------
# Helpers
# ----------------------------

def _run_config(ctx: click.Context) -> Dict[str, Any]:
    return ctx.obj["run_config"]


def _section(ctx: click.Context, name: str, model) -> Dict[str, Any]:
    return config_section(_run_config(ctx), name, model)


def _path(ctx: click.Context, value: Optional[str], key: str, required: bool = True) -> Optional[Path]:
    """Flag value, else `paths.<key>` from the run-config."""
    if value is None:
        value = (_run_config(ctx).get("paths") or {}).get(key)
    if value is None:
        if required:
            raise click.UsageError(f"missing path: pass the flag or set paths.{key} in the run-config")
        return None
    return Path(value)


def _classifier_paths(ctx: click.Context, gender: Optional[str], age: Optional[str],
                      race: Optional[str]) -> Dict[str, Path]:
    flags = {"gender": gender, "age": age, "race": race}
    configured = (_run_config(ctx).get("paths") or {}).get("classifier_checkpoints") or {}
    out = {}
    for attr in ATTRIBUTE_NAMES:
        value = flags[attr] or configured.get(attr)
        if value is None:
            raise click.UsageError(f"missing {attr} classifier: pass --{attr}-classifier "
                                   f"or set paths.classifier_checkpoints.{attr}")
        out[attr] = Path(value)
    return out


def _load_classifiers(paths: Dict[str, Path]):
    from services.identity_match import ClassifierCheckpoint

    return {attr: ClassifierCheckpoint.load(p) for attr, p in paths.items()}


def _pipeline_config(ctx: click.Context, **overrides) -> PipelineConfig:
    rc = _run_config(ctx)
    fields = PipelineConfig.model_fields
    from_paths = {k: v for k, v in (rc.get("paths") or {}).items() if k in fields}
    return build_settings(PipelineConfig, from_paths, config_section(rc, "pipeline", PipelineConfig), **overrides)


classifier_options = [
    click.option("--gender-classifier", "gender", type=click.Path(dir_okay=False), default=None),
    click.option("--age-classifier", "age", type=click.Path(dir_okay=False), default=None),
    click.option("--race-classifier", "race", type=click.Path(dir_okay=False), default=None),
]


def with_classifier_options(fn):
    for option in reversed(classifier_options):
        fn = option(fn)
    return fn


# ----------------------------
# Root group
# ----------------------------

@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Run-config YAML (default: $RUN_CONFIG or run_config.yaml).")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], log_level: Optional[str]):
    """Dental-area preserving face de-identification."""
    setup_logging(log_level)
    initialize_sentry()
    ctx.ensure_object(dict)
    ctx.obj["run_config"] = load_run_config(config_path)


# ----------------------------
# data
# ----------------------------

@cli.group()
def data():
    """Synthetic corpora."""


@data.command("gen")
@click.option("--count", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--distribution", type=click.Choice(["base", "clinic"]), default=None)
@click.option("--resolution", type=int, default=None)
@click.option("--race-classes", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", "out", type=click.Path(file_okay=False), required=True)
@click.pass_context
def data_gen(ctx, count, seed, distribution, resolution, race_classes, workers, out):
    from services.synthetic_data import generate_dataset

    cfg = build_settings(DataConfig, _section(ctx, "data", DataConfig), seed=seed, distribution=distribution,
                         resolution=resolution, race_classes=race_classes, workers=workers)
    if count is None:
        count = cfg.clinic_count if cfg.distribution == "clinic" else cfg.count
    manifest = generate_dataset(count, cfg.seed, cfg.distribution, cfg.resolution, out,
                                workers=cfg.workers, race_classes=cfg.race_classes)
    click.echo(f"{manifest.count} {cfg.distribution} faces -> {manifest.manifest_path}")


@data.command("negatives")
@click.option("--count", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resolution", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", "out", type=click.Path(file_okay=False), required=True)
@click.pass_context
def data_negatives(ctx, count, seed, resolution, workers, out):
    from services.synthetic_data import generate_negatives

    cfg = build_settings(DataConfig, _section(ctx, "data", DataConfig), negatives_count=count, seed=seed,
                         resolution=resolution, workers=workers)
    manifest = generate_negatives(cfg.negatives_count, cfg.seed, cfg.resolution, out, workers=cfg.workers)
    click.echo(f"{manifest.count} textures -> {manifest.manifest_path}")


# ----------------------------
# gan
# ----------------------------

@cli.group()
def gan():
    """Generator training."""


@gan.command("train")
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--r1-weight", type=float, default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def gan_train(ctx, corpus, steps, seed, batch_size, r1_weight, out):
    from services.gan import train_gan
    from services.synthetic_data import load_manifest

    manifest = load_manifest(corpus)
    cfg = build_settings(GanTrainConfig, _section(ctx, "gan", GanTrainConfig), steps=steps, seed=seed,
                         batch_size=batch_size, r1_weight=r1_weight, resolution=manifest.resolution)
    ckpt = train_gan(manifest, cfg)
    path = ckpt.save(_path(ctx, out, "gan_checkpoint"))
    click.echo(f"GAN checkpoint -> {path} (fingerprint {ckpt.fingerprint()[:12]})")


@gan.command("finetune")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def gan_finetune(ctx, checkpoint, corpus, steps, seed, out):
    from services.gan import GanCheckpoint, fine_tune_gan
    from services.synthetic_data import load_manifest

    cfg = build_settings(FinetuneConfig, _section(ctx, "finetune", FinetuneConfig), steps=steps, seed=seed)
    base = GanCheckpoint.load(_path(ctx, checkpoint, "gan_checkpoint"))
    tuned = fine_tune_gan(base, load_manifest(corpus), cfg.steps, seed=cfg.seed)
    path = tuned.save(out)
    click.echo(f"Fine-tuned GAN -> {path} (parent {tuned.parent_fingerprint[:12]})")


# ----------------------------
# encoder
# ----------------------------

@cli.group()
def encoder():
    """Area-preserving inversion encoder."""


def _encoder_config(ctx, **overrides) -> EncoderTrainConfig:
    return build_settings(EncoderTrainConfig, _section(ctx, "encoder", EncoderTrainConfig), **overrides)


@encoder.command("train")
@click.option("--gan", "gan_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lambda-img", type=float, default=None)
@click.option("--lambda-df", type=float, default=None)
@click.option("--target-space", type=click.Choice(["Z", "W"]), default=None)
@click.option("--mask-source", type=click.Choice(["dental_region", "landmarks"]), default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def encoder_train(ctx, gan_path, corpus, steps, seed, lambda_img, lambda_df, target_space, mask_source, out):
    from services.dental_mask import mask_source_rule
    from services.gan import GanCheckpoint
    from services.inversion import train_encoder
    from services.synthetic_data import load_manifest

    cfg = _encoder_config(ctx, steps=steps, seed=seed, lambda_img=lambda_img, lambda_df=lambda_df,
                          target_space=target_space, mask_source=mask_source)
    gan_ckpt = GanCheckpoint.load(_path(ctx, gan_path, "gan_checkpoint"))
    rule = mask_source_rule(cfg.mask_source, gan_ckpt.resolution, cfg.dental_margin, cfg.feather_radius)
    enc = train_encoder(gan_ckpt, load_manifest(corpus), rule, cfg)
    path = enc.save(_path(ctx, out, "encoder_checkpoint"))
    click.echo(f"Encoder checkpoint -> {path}")


@encoder.command("sweep")
@click.option("--gan", "gan_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--heldout", type=click.Path(exists=True), required=True)
@click.option("--lambda-df", "lambdas", type=float, multiple=True, default=(0.0, 1.0, 5.0, 25.0))
@click.option("--seed", "seeds", type=int, multiple=True, default=(0, 1, 2))
@click.option("--steps", type=int, default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def encoder_sweep(ctx, gan_path, corpus, heldout, lambdas, seeds, steps, out):
    """Region-weight sweep: held-out region term per weight (median over seeds)."""
    import numpy as np

    from services.dental_mask import mask_source_rule
    from services.evaluation import lambda_sweep
    from services.gan import GanCheckpoint
    from services.synthetic_data import load_corpus, load_manifest

    cfg = _encoder_config(ctx, steps=steps)
    gan_ckpt = GanCheckpoint.load(_path(ctx, gan_path, "gan_checkpoint"))
    held = load_manifest(heldout)
    arrays = load_corpus(held, aligned=cfg.align_corpus)
    rule = mask_source_rule(cfg.mask_source, gan_ckpt.resolution, cfg.dental_margin, cfg.feather_radius)
    masks = np.stack([rule(arrays, i) for i in range(len(arrays.images))])
    result = lambda_sweep(gan_ckpt, load_manifest(corpus), arrays.images, masks, lambdas, seeds, cfg)
    db.write_json(out, result)
    click.echo(f"{result['non_increasing_pairs']}/{result['adjacent_pairs']} non-increasing pairs -> {out}")


# ----------------------------
# detector / classifier
# ----------------------------

@cli.group()
def detector():
    """Face presence + landmark detector."""


@detector.command("train")
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--negatives", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def detector_train(ctx, corpus, negatives, steps, seed, out):
    from services.face_detect import train_detector
    from services.synthetic_data import load_manifest

    cfg = build_settings(DetectorTrainConfig, _section(ctx, "detector", DetectorTrainConfig), steps=steps, seed=seed)
    ckpt = train_detector(load_manifest(corpus), load_manifest(negatives), cfg)
    path = ckpt.save(_path(ctx, out, "detector_checkpoint"))
    click.echo(f"Detector checkpoint -> {path} {ckpt.metrics}")


@cli.group()
def classifier():
    """Attribute classifiers."""


@classifier.command("train")
@click.option("--attribute", required=True, help="gender, age or race")
@click.option("--corpus", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def classifier_train(ctx, attribute, corpus, steps, seed, out):
    from services.identity_match import canonical_attribute, train_attribute_classifier
    from services.synthetic_data import load_manifest

    attr = canonical_attribute(attribute)
    cfg = build_settings(ClassifierTrainConfig, _section(ctx, "classifier", ClassifierTrainConfig),
                         steps=steps, seed=seed)
    ckpt = train_attribute_classifier(attr, load_manifest(corpus), cfg)
    if out is None:
        configured = (_run_config(ctx).get("paths") or {}).get("classifier_checkpoints") or {}
        out = configured.get(attr)
    if out is None:
        raise click.UsageError(f"missing path: pass --out or set paths.classifier_checkpoints.{attr}")
    path = ckpt.save(out)
    click.echo(f"{attr} classifier -> {path} {ckpt.metrics}")


# ----------------------------
# contextdb
# ----------------------------

@cli.group()
def contextdb():
    """Context identity database."""


@contextdb.command("build")
@click.option("--gan", "gan_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--count", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--labeling", type=click.Choice(["auto", "manifest"]), default=None)
@click.option("--labels", "label_manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@with_classifier_options
@click.option("--out", "out", type=click.Path(file_okay=False), default=None)
@click.pass_context
def contextdb_build(ctx, gan_path, count, seed, labeling, label_manifest, gender, age, race, out):
    from services.gan import GanCheckpoint
    from services.identity_match import build_context_db

    cfg = build_settings(ContextDBConfig, _section(ctx, "contextdb", ContextDBConfig),
                         count=count, seed=seed, labeling=labeling)
    gan_ckpt = GanCheckpoint.load(_path(ctx, gan_path, "gan_checkpoint"))
    classifiers = _load_classifiers(_classifier_paths(ctx, gender, age, race)) if cfg.labeling == "auto" else None
    context = build_context_db(gan_ckpt, cfg.count, cfg.seed, cfg.labeling, classifiers=classifiers,
                               label_manifest=label_manifest, race_classes=cfg.race_classes)
    directory = context.save(_path(ctx, out, "context_db"))
    click.echo(f"Context DB ({len(context)} entries) -> {directory}")


# ----------------------------
# deidentify / eval / report
# ----------------------------

@cli.command("deidentify")
@click.argument("source", type=click.Path())
@click.option("--batch", is_flag=True, help="SOURCE is a corpus directory or manifest.")
@click.option("--out", "out", type=click.Path(), default=None,
              help="Output PNG (single) or run directory (batch).")
@click.option("--threshold", type=float, default=None)
@click.option("--workers", type=int, default=None)
@click.pass_context
def deidentify_cmd(ctx, source, batch, out, threshold, workers):
    from services.pipeline import batch_deidentify, load_artifacts, run_deidentify, summarize
    from utils.imageio import load_png, save_png

    config = _pipeline_config(ctx, presence_threshold=threshold, workers=workers,
                              output_dir=out if batch else None)
    artifacts = load_artifacts(config)
    if batch:
        records = batch_deidentify(source, artifacts)
        click.echo(f"{summarize(records)} -> {config.output_dir}")
        return
    image = load_png(source)
    outcome = run_deidentify(image, artifacts, input_id=Path(source).stem)
    target = Path(out) if out else config.output_dir / f"{Path(source).stem}_deid.png"
    save_png(outcome.output, target)
    db.write_json(target.with_suffix(".json"), outcome.record.to_dict())
    click.echo(f"{target} (context {outcome.record.context_id}, masked_mse {outcome.record.masked_fidelity:.5f})")


@cli.command("eval")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--compare", "compare_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Baseline run for paired ablation deltas.")
@with_classifier_options
@click.option("--out", "out", type=click.Path(file_okay=False), default=None)
@click.pass_context
def eval_cmd(ctx, run_dir, compare_dir, gender, age, race, out):
    from services.evaluation import evaluate_run
    from services.reports import emit_report

    report = evaluate_run(run_dir, _load_classifiers(_classifier_paths(ctx, gender, age, race)), compare_dir)
    paths = emit_report(report, out or Path(run_dir) / "report")
    click.echo(f"identity_change_rate={report.aggregates.get('identity_change_rate', 0.0):.3f} -> {paths['report']}")


@cli.command("report")
@click.argument("report_json", type=click.Path(exists=True, dir_okay=False))
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out", type=click.Path(file_okay=False), required=True)
def report_cmd(report_json, run_dir, out):
    """Re-emit a saved report (CSV + grid) against its run directory."""
    from services.evaluation import load_report
    from services.reports import emit_report

    report = load_report(report_json, run_dir)
    paths = emit_report(report, out)
    click.echo(f"{len(report.rows)} rows -> {paths['grid']}")


# ----------------------------
# Entry
# ----------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="cli.py", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        click.echo("Aborted.", err=True)
        return EXIT_FAILURE
    except click.ClickException as e:
        e.show()
        return EXIT_VALIDATION
    except NoFaceError as e:
        logger.warning(f"Refused: {e}")
        return EXIT_REFUSAL
    except (ConfigurationError, ArgumentError, LabelManifestError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_VALIDATION
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except NonFiniteLossError as e:
        logger.error(f"Training diverged: {e}; diagnostic checkpoint {e.checkpoint_path}")
        return EXIT_NUMERICAL
    except NumericalError as e:
        logger.error(f"Numerical error: {e}")
        return EXIT_NUMERICAL
    except PreconditionError as e:
        logger.error(f"Precondition failed: {e}")
        return EXIT_PRECONDITION
    except Exception:
        logger.exception("Unhandled error")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
