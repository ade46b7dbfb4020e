"""Pixel metrics, dataset aggregation and cross-validation orchestration.

Glomerulus pixels are the positive class. Micro aggregation sums the
confusion counts over all pixels of a dataset before computing metrics,
which makes dice exactly the harmonic mean of precision and recall;
macro averages per-image metrics instead. Degenerate 0/0 cells resolve
to 0 so empty patches penalize false positives but never crash.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .catalog import DatasetManifest, fold_split_manifests, load_image, load_mask, split_folds
from .models import ModelConfig, build_model, load_checkpoint
from .training import TrainConfig, to_model_input, train


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    dataset_id: str
    method: str
    precision: float
    recall: float
    dice: float
    n_images: int
    n_pixels: int
    aggregation: str  # micro | macro


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Four-cell pixel tally; shapes must match and values be binary."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvalError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    p = pred != 0
    g = gt != 0
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def metrics_from_counts(c: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, dice); every 0/0 is 0 by convention."""
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else 0.0
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    dice = 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn) if (2 * c.tp + c.fp + c.fn) else 0.0
    return precision, recall, dice


Predictor = Callable[[torch.Tensor], torch.Tensor]


def _as_predictor(model) -> Predictor:
    """Accepts an nn.Module, a checkpoint path, or a logits callable."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if isinstance(model, torch.nn.Module):
        module = model.eval()

        def predict(batch: torch.Tensor) -> torch.Tensor:
            with torch.no_grad():
                return module(batch)

        return predict
    if callable(model):
        return model
    raise EvalError(f"cannot evaluate object of type {type(model)!r}")


def evaluate(model, manifest: DatasetManifest, aggregation: str = "micro",
             dataset_id: str | None = None, method: str = "model") -> MetricsReport:
    """Argmax predictions over a masked manifest, reduced per aggregation."""
    if aggregation not in ("micro", "macro"):
        raise EvalError(f"unknown aggregation {aggregation!r}")
    if len(manifest) == 0:
        raise EvalError("cannot evaluate an empty manifest")
    predict = _as_predictor(model)

    total = ConfusionCounts()
    per_image = []
    for rec in manifest.records:
        if rec.mask_path is None:
            raise EvalError(f"record {rec.patch_id} has no mask; evaluation needs labels")
        image = load_image(rec.image_path)
        gt = load_mask(rec.mask_path)
        try:
            logits = predict(to_model_input([image]))
        except Exception as exc:
            raise EvalError(f"inference failed on patch {rec.patch_id}: {exc}") from exc
        pred = logits.argmax(dim=1)[0].cpu().numpy()
        if pred.shape != gt.shape:
            raise EvalError(
                f"prediction shape {pred.shape} != mask shape {gt.shape} "
                f"for patch {rec.patch_id}"
            )
        counts = confusion(pred, gt)
        total = total + counts
        per_image.append(metrics_from_counts(counts))

    if aggregation == "micro":
        precision, recall, dice = metrics_from_counts(total)
    else:
        arr = np.array(per_image)
        precision, recall, dice = (float(x) for x in arr.mean(axis=0))
    return MetricsReport(
        dataset_id=dataset_id or manifest.records[0].dataset_id.value,
        method=method,
        precision=precision, recall=recall, dice=dice,
        n_images=len(manifest), n_pixels=total.total,
        aggregation=aggregation,
    )


def cross_validate(manifest: DatasetManifest, k: int, model_config: ModelConfig,
                   train_config: TrainConfig, weak_spec, strong_spec,
                   aggregation: str = "micro",
                   ) -> tuple[list[MetricsReport], float, float]:
    """k held-out-fold runs; returns reports plus mean and sample std of dice.

    The +/- spread is the sample standard deviation over folds (ddof=1).
    """
    assigned = split_folds(manifest, k, seed=train_config.seed)
    reports = []
    for fold in range(k):
        fold_train, fold_val = fold_split_manifests(assigned, fold)
        model = build_model(model_config, seed=train_config.seed)
        train(model, fold_train, None, train_config, weak_spec, strong_spec)
        report = evaluate(model, fold_val, aggregation=aggregation,
                          dataset_id=f"fold_{fold}", method=train_config.method)
        reports.append(report)
    dices = np.array([r.dice for r in reports], dtype=np.float64)
    std = float(dices.std(ddof=1)) if k > 1 else 0.0
    return reports, float(dices.mean()), std


# ---------------------------------------------------------------------------
# report CSV
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("dataset", "method", "precision", "recall", "dice",
                  "n_images", "n_pixels", "aggregation")


def reports_to_csv(reports: Sequence[MetricsReport], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([r.dataset_id, r.method, repr(r.precision), repr(r.recall),
                             repr(r.dice), r.n_images, r.n_pixels, r.aggregation])


def format_report_table(reports: Sequence[MetricsReport]) -> str:
    """Small fixed-width summary for stdout."""
    header = f"{'dataset':<24}{'method':<14}{'precision':>10}{'recall':>10}{'dice':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.dataset_id:<24}{r.method:<14}"
                     f"{r.precision:>10.4f}{r.recall:>10.4f}{r.dice:>10.4f}")
    return "\n".join(lines)
