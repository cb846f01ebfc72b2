"""Paired evaluation over a dataset: clean and attacked inputs, each with
and without the defense, on the same images with per-image derived seeds.

Images are independent work units; aggregation happens in index order, so
metrics.csv is byte-identical for identical inputs regardless of the
worker count.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import PatchSpec, place_patch, sample_placement
from .dataset import DatasetEntry, load_image, read_index
from .defense import DefenseConfig, defend_predict, patch_token_coverage
from .detector import ReferenceProfile
from .errors import DataError, FormatError, TokenShieldError
from .model import ModelWeights, predict
from .rng import placement_stream

CONDITIONS = ("clean", "clean_defended", "attacked", "attacked_defended")

CSV_HEADER = ["condition", "top1", "top5", "flag_rate", "mean_coverage", "n_images"]


@dataclass
class ConditionStats:
    top1: float  # percent
    top5: float  # percent
    flag_rate: float  # fraction
    mean_coverage: float  # fraction
    n_images: int


@dataclass
class Metrics:
    conditions: dict[str, ConditionStats]
    per_image: list[dict]
    skipped: list[str]


def _evaluate_one(
    index: int,
    entry: DatasetEntry,
    root: Path,
    model: ModelWeights,
    profile: ReferenceProfile,
    config: DefenseConfig,
    patch: PatchSpec | None,
) -> dict:
    try:
        image = load_image(root / entry.file)
    except TokenShieldError as exc:
        return {"index": index, "file": entry.file, "skipped": str(exc)}

    label = entry.label
    record: dict = {"index": index, "file": entry.file, "label": label}

    pred = predict(image, model)
    record["clean"] = {"top1": pred.top1, "top5": list(pred.top5)}

    pred_def, diag = defend_predict(image, model, profile, config, image_index=index)
    record["clean_defended"] = {"top1": pred_def.top1, "top5": list(pred_def.top5)}
    record["flag_rate_clean"] = float(np.mean(diag.scores > profile.tau))
    record["flagged_clean"] = list(diag.flagged)

    if patch is not None:
        placements = sample_placement(
            placement_stream(config.seed, index),
            model.config.image_size,
            patch.size,
            count=patch.count,
        )
        attacked = place_patch(image, patch, placements)
        pred_att = predict(attacked, model)
        record["attacked"] = {"top1": pred_att.top1, "top5": list(pred_att.top5)}

        pred_att_def, diag_att = defend_predict(attacked, model, profile, config, image_index=index)
        record["attacked_defended"] = {"top1": pred_att_def.top1, "top5": list(pred_att_def.top5)}
        record["flag_rate_attacked"] = float(np.mean(diag_att.scores > profile.tau))
        record["flagged_attacked"] = list(diag_att.flagged)
        record["coverage"] = patch_token_coverage(diag_att.flagged, placements, model.config)
        record["placements"] = [
            {"row": pl.row, "col": pl.col, "size": pl.size, "rotation": pl.rotation}
            for pl in placements
        ]
    return record


def evaluate(
    data_root,
    model: ModelWeights,
    profile: ReferenceProfile,
    config: DefenseConfig,
    patch: PatchSpec | None = None,
    workers: int = 1,
) -> Metrics:
    """Run every condition on every readable dataset entry.

    Unreadable entries are recorded as skipped and excluded from all
    conditions so the comparison stays paired. Raises when no entry at all
    can be evaluated.
    """
    root = Path(data_root)
    entries = read_index(root)
    if not entries:
        raise DataError(f"dataset {root} is empty")

    if workers <= 1:
        records = [
            _evaluate_one(i, e, root, model, profile, config, patch)
            for i, e in enumerate(entries)
        ]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_evaluate_one, i, e, root, model, profile, config, patch)
                for i, e in enumerate(entries)
            ]
            records = [f.result() for f in futures]

    kept = [r for r in records if "skipped" not in r]
    skipped = [r["file"] for r in records if "skipped" in r]
    if not kept:
        raise DataError(f"dataset {root}: all {len(entries)} entries were unreadable")

    def stats(condition: str, flag_key: str, coverage: bool) -> ConditionStats:
        top1 = 100.0 * float(np.mean([r[condition]["top1"] == r["label"] for r in kept]))
        top5 = 100.0 * float(np.mean([r["label"] in r[condition]["top5"] for r in kept]))
        flag = float(np.mean([r[flag_key] for r in kept])) if flag_key in kept[0] else 0.0
        cov = float(np.mean([r["coverage"] for r in kept])) if coverage else 0.0
        return ConditionStats(top1, top5, flag, cov, len(kept))

    conditions = {
        "clean": stats("clean", "flag_rate_clean", False),
        "clean_defended": stats("clean_defended", "flag_rate_clean", False),
    }
    if patch is not None:
        conditions["attacked"] = stats("attacked", "flag_rate_attacked", False)
        conditions["attacked_defended"] = stats("attacked_defended", "flag_rate_attacked", True)
    return Metrics(conditions=conditions, per_image=kept, skipped=skipped)


def metrics_csv_text(metrics: Metrics) -> str:
    """Deterministic CSV rendering (fixed 6-decimal floats, \\n newlines)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for name in CONDITIONS:
        if name not in metrics.conditions:
            continue
        s = metrics.conditions[name]
        writer.writerow(
            [
                name,
                f"{s.top1:.6f}",
                f"{s.top5:.6f}",
                f"{s.flag_rate:.6f}",
                f"{s.mean_coverage:.6f}",
                s.n_images,
            ]
        )
    return buf.getvalue()


def write_metrics_csv(path, metrics: Metrics) -> None:
    Path(path).write_text(metrics_csv_text(metrics))


def write_report_json(path, metrics: Metrics, config: DefenseConfig | None = None) -> None:
    doc = {
        "conditions": {
            name: {
                "top1": s.top1,
                "top5": s.top5,
                "flag_rate": s.flag_rate,
                "mean_coverage": s.mean_coverage,
                "n_images": s.n_images,
            }
            for name, s in metrics.conditions.items()
        },
        "per_image": metrics.per_image,
        "skipped": metrics.skipped,
    }
    if config is not None:
        doc["seed"] = config.seed
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def plot_data_csv_text(metrics_csv: str) -> str:
    """Reshape a metrics.csv document into long format (condition, metric,
    value) ready for plotting tools."""
    reader = csv.DictReader(io.StringIO(metrics_csv))
    if reader.fieldnames is None or list(reader.fieldnames) != CSV_HEADER:
        raise FormatError("metrics csv header does not match the expected columns")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["condition", "metric", "value"])
    for row in reader:
        for metric in CSV_HEADER[1:]:
            writer.writerow([row["condition"], metric, row[metric]])
    return buf.getvalue()
