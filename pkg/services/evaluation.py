"""
services/evaluation.py

Automated evaluation of de-identification runs:
- region fidelity (masked MSE / PSNR of output vs aligned input)
- identity change: classifier-feature cosine distance input->output against the
  input->own-reconstruction baseline
- per-group aggregates over gender x smiling x age
- paired ablation deltas between two runs, and the region-weight sweep
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

import db
from errors import ArgumentError
from services.config import EncoderTrainConfig
from services.dental_mask import mask_source_rule
from services.gan import GanCheckpoint
from services.identity_match import ClassifierCheckpoint, attribute_features, require_classifiers
from services.inversion import heldout_loss, merge_and_invert, train_encoder
from services.pipeline import DeidentifyRecord, load_records
from services.synthetic_data import CorpusManifest
from utils.embeddings import cosine_distance
from utils.image_core import RegionMask, RegionSpec, feather_mask, make_region_mask, masked_mse, masked_psnr
from utils.imageio import load_png

logger = logging.getLogger(__name__)

ROW_COLUMNS = [
    "input_id", "group", "gender", "smiling", "age", "context_id",
    "masked_mse", "masked_psnr", "identity_distance", "baseline_distance", "identity_changed",
]
UNKNOWN = "unknown"


# ----------------------------
# Types
# ----------------------------

@dataclass
class EvalItem:
    """One successful run item, images in the aligned frame."""

    input_id: str
    input: np.ndarray
    output: np.ndarray
    reconstruction: np.ndarray
    mask: RegionMask
    gender: str = UNKNOWN
    smiling: Optional[bool] = None
    age: str = UNKNOWN
    context_id: Optional[int] = None
    context: Optional[np.ndarray] = None
    stitched: Optional[np.ndarray] = None


@dataclass
class EvalReport:
    rows: List[Dict[str, Any]]
    aggregates: Dict[str, float]
    groups: Dict[str, Dict[str, float]]
    ablation: Optional[Dict[str, Any]] = None
    panels: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        out = {"rows": self.rows, "aggregates": self.aggregates, "groups": self.groups}
        if self.ablation is not None:
            out["ablation"] = self.ablation
        return out


def group_key(gender: str, smiling: Optional[bool], age: str) -> str:
    smile = UNKNOWN if smiling is None else ("smiling" if smiling else "non-smiling")
    return f"{gender}/{smile}/{age}"


# ----------------------------
# Aggregation
# ----------------------------

def _summary(rows: Sequence[Mapping[str, Any]]) -> Dict[str, float]:
    if not rows:
        return {"count": 0.0}
    mses = np.array([float(r["masked_mse"]) for r in rows])
    psnrs = np.array([float(r["masked_psnr"]) for r in rows])
    changed = np.array([_truthy(r["identity_changed"]) for r in rows], dtype=np.float64)
    return {
        "count": float(len(rows)),
        "median_masked_mse": float(np.median(mses)),
        "mean_masked_mse": float(np.mean(mses)),
        "median_masked_psnr": float(np.median(psnrs)),
        "mean_masked_psnr": float(np.mean(psnrs)),
        "identity_change_rate": float(np.mean(changed)),
    }


def _truthy(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes")
    return bool(value)


def recompute_aggregates(rows: Sequence[Mapping[str, Any]]) -> tuple[Dict[str, float], Dict[str, Dict[str, float]]]:
    """Overall and per-group aggregates from per-image rows (dicts or CSV rows)."""
    by_group: Dict[str, List[Mapping[str, Any]]] = {}
    for row in rows:
        by_group.setdefault(str(row["group"]), []).append(row)
    return _summary(rows), {g: _summary(by_group[g]) for g in sorted(by_group)}


# ----------------------------
# Evaluation
# ----------------------------

def evaluate_items(items: Sequence[EvalItem], classifiers: Mapping[str, ClassifierCheckpoint],
                   keep_panels: bool = True) -> EvalReport:
    """Score run items; classifiers provide the identity features (missing -> ConfigurationError)."""
    items = sorted(items, key=lambda it: it.input_id)
    rows: List[Dict[str, Any]] = []
    panels: Dict[str, Dict[str, np.ndarray]] = {}
    if items:
        stack = np.concatenate([np.stack([it.input for it in items]),
                                np.stack([it.output for it in items]),
                                np.stack([it.reconstruction for it in items])])
        feats = attribute_features(stack, classifiers)
    else:
        require_classifiers(classifiers)
    n = len(items)
    for i, it in enumerate(items):
        f_in, f_out, f_rec = feats[i], feats[n + i], feats[2 * n + i]
        distance = cosine_distance(f_in, f_out)
        baseline = cosine_distance(f_in, f_rec)
        rows.append({
            "input_id": it.input_id,
            "group": group_key(it.gender, it.smiling, it.age),
            "gender": it.gender,
            "smiling": UNKNOWN if it.smiling is None else bool(it.smiling),
            "age": it.age,
            "context_id": it.context_id,
            "masked_mse": masked_mse(it.output, it.input, it.mask),
            "masked_psnr": masked_psnr(it.output, it.input, it.mask),
            "identity_distance": distance,
            "baseline_distance": baseline,
            "identity_changed": bool(distance > baseline),
        })
        if keep_panels and it.context is not None and it.stitched is not None:
            panels[it.input_id] = {"input": it.input, "context": it.context,
                                   "stitched": it.stitched, "output": it.output}
    aggregates, groups = recompute_aggregates(rows)
    logger.info(f"Evaluated {n} images: identity_change_rate={aggregates.get('identity_change_rate', 0.0):.3f} "
                f"median_masked_mse={aggregates.get('median_masked_mse', 0.0):.5f}")
    return EvalReport(rows=rows, aggregates=aggregates, groups=groups, panels=panels)


def record_mask(record: DeidentifyRecord, resolution: int) -> RegionMask:
    region = RegionSpec.from_list(record.dental_region)
    return feather_mask(make_region_mask(region, resolution, resolution), record.feather_radius)


def load_run_items(run_dir: str | Path) -> List[EvalItem]:
    """Successful items of a batch run, with ground-truth grouping where recorded."""
    run_dir = Path(run_dir)
    items = []
    for record in load_records(run_dir):
        if record.status != "ok":
            continue
        item_dir = run_dir / "items" / record.input_id
        images = {name: load_png(item_dir / f"{name}.png")
                  for name in ("input", "context", "stitched", "output", "reconstruction")}
        res = images["input"].shape[0]
        truth = record.ground_truth or {}
        labels = record.labels or {}
        items.append(EvalItem(
            input_id=record.input_id,
            input=images["input"],
            output=images["output"],
            reconstruction=images["reconstruction"],
            mask=record_mask(record, res),
            gender=str(truth.get("gender_class", labels.get("gender", UNKNOWN))),
            smiling=truth.get("smiling"),
            age=str(truth.get("age_group", labels.get("age", UNKNOWN))),
            context_id=record.context_id,
            context=images["context"],
            stitched=images["stitched"],
        ))
    return items


def ablation_deltas(baseline: EvalReport, variant: EvalReport) -> Dict[str, Any]:
    """Paired per-image masked_mse deltas (variant - baseline) over shared input ids."""
    base = {r["input_id"]: r for r in baseline.rows}
    pairs = []
    for row in variant.rows:
        ref = base.get(row["input_id"])
        if ref is None:
            continue
        pairs.append({
            "input_id": row["input_id"],
            "baseline_masked_mse": ref["masked_mse"],
            "variant_masked_mse": row["masked_mse"],
            "delta_masked_mse": row["masked_mse"] - ref["masked_mse"],
        })
    out: Dict[str, Any] = {"pairs": pairs, "count": len(pairs)}
    if pairs:
        b = float(np.median([p["baseline_masked_mse"] for p in pairs]))
        v = float(np.median([p["variant_masked_mse"] for p in pairs]))
        out.update({
            "median_delta_masked_mse": float(np.median([p["delta_masked_mse"] for p in pairs])),
            "median_ratio": v / b if b > 0 else None,
        })
    return out


def evaluate_run(run_dir: str | Path, classifiers: Mapping[str, ClassifierCheckpoint],
                 compare_dir: Optional[str | Path] = None) -> EvalReport:
    """Evaluate a batch run directory; with ``compare_dir`` the run is the variant
    and ``compare_dir`` the paired baseline."""
    report = evaluate_items(load_run_items(run_dir), classifiers)
    if compare_dir is not None:
        baseline = evaluate_items(load_run_items(compare_dir), classifiers, keep_panels=False)
        report.ablation = ablation_deltas(baseline, report)
    return report


# ----------------------------
# Region-weight sweep
# ----------------------------

def count_non_increasing(values: Sequence[float]) -> int:
    return sum(1 for a, b in zip(values, values[1:]) if b <= a)


def _median_or_none(values) -> Optional[float]:
    """Median of the scored values; empty-mask pairs carry None and are left out."""
    scored = [v for v in values if v is not None]
    return float(np.median(scored)) if scored else None


def lambda_sweep(gan: GanCheckpoint, corpus: CorpusManifest, heldout_images: np.ndarray,
                 heldout_masks: np.ndarray, lambdas: Sequence[float], seeds: Sequence[int],
                 base_config: EncoderTrainConfig,
                 pairs: Optional[Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]] = None) -> Dict[str, Any]:
    """Train one encoder per (region weight, seed) and report held-out region terms.

    ``pairs`` of (target, mask, context) additionally score merge_and_invert
    fidelity; pairs with an empty mask are not scored, and a run with no scored
    pair reports None. Per-weight values are medians over seeds.
    """
    if not lambdas or not seeds:
        raise ArgumentError("lambda sweep needs at least one weight and one seed")
    mask_source = mask_source_rule(base_config.mask_source, gan.resolution, base_config.dental_margin,
                                   base_config.feather_radius)
    runs = []
    for lam in lambdas:
        for seed in seeds:
            config = base_config.model_copy(update={"lambda_df": float(lam), "seed": int(seed)})
            enc = train_encoder(gan, corpus, mask_source, config)
            terms = heldout_loss(enc, gan, heldout_images, heldout_masks)
            run = {"lambda_df": float(lam), "seed": int(seed), "region_term": terms["region_term"]}
            if pairs:
                run["median_masked_mse"] = _median_or_none(
                    merge_and_invert(t, m, c, enc, gan)[1].region_fidelity for t, m, c in pairs
                )
            runs.append(run)
            logger.info(f"Sweep lambda_df={lam} seed={seed}: region_term={run['region_term']:.5f}")

    per_lambda = []
    for lam in lambdas:
        mine = [r for r in runs if r["lambda_df"] == float(lam)]
        entry = {"lambda_df": float(lam), "region_term": float(np.median([r["region_term"] for r in mine]))}
        if pairs:
            entry["median_masked_mse"] = _median_or_none(r["median_masked_mse"] for r in mine)
        per_lambda.append(entry)
    return {
        "runs": runs,
        "per_lambda": per_lambda,
        "non_increasing_pairs": count_non_increasing([e["region_term"] for e in per_lambda]),
        "adjacent_pairs": max(len(per_lambda) - 1, 0),
    }


def load_panels(run_dir: str | Path, input_ids: Sequence[str]) -> Dict[str, Dict[str, np.ndarray]]:
    run_dir = Path(run_dir)
    panels = {}
    for input_id in input_ids:
        item_dir = run_dir / "items" / input_id
        if item_dir.is_dir():
            panels[input_id] = {name: load_png(item_dir / f"{name}.png")
                                for name in ("input", "context", "stitched", "output")}
    return panels


def load_report(path: str | Path, run_dir: Optional[str | Path] = None) -> EvalReport:
    """Read a saved report.json; grid panels are reloaded from ``run_dir`` when given."""
    data = db.read_json(path)
    rows = data.get("rows", [])
    panels = load_panels(run_dir, [r["input_id"] for r in rows]) if run_dir is not None else {}
    return EvalReport(rows=rows, aggregates=data.get("aggregates", {}), groups=data.get("groups", {}),
                      ablation=data.get("ablation"), panels=panels)
