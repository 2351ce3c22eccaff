"""Evaluation: pixel-wise precision/recall/Dice and diameter-length errors
in millimeters, with mean +/- population-std aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import RecistAnnotation


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class SegScores:
    precision: float
    recall: float
    dice: float


@dataclass(frozen=True)
class DiamErrors:
    long_err_mm: float
    short_err_mm: float


def seg_scores(pred: np.ndarray, gt: np.ndarray) -> SegScores:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise MetricsError("shape mismatch")
    if not gt.any():
        raise MetricsError("empty ground truth")
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0  # no positives predicted
    recall = tp / (tp + fn)
    dice = 2 * tp / (2 * tp + fp + fn)
    return SegScores(precision, recall, dice)


def diam_errors(pred: RecistAnnotation, gt: RecistAnnotation) -> DiamErrors:
    if abs(pred.spacing_mm - gt.spacing_mm) > 1e-9:
        raise MetricsError("spacing mismatch")
    return DiamErrors(abs(pred.long_mm - gt.long_mm),
                      abs(pred.short_mm - gt.short_mm))


def aggregate(results: list[dict]) -> dict:
    """Per-metric mean +/- population standard deviation over lesions.

    results: list of {metric_name: value} dicts with a common key set.
    """
    if not results:
        raise MetricsError("no results to aggregate")
    keys = list(results[0].keys())
    report = {"n": len(results), "std_kind": "population", "metrics": {}}
    for k in keys:
        vals = np.array([float(r[k]) for r in results])
        report["metrics"][k] = {"mean": float(vals.mean()),
                                "std": float(vals.std(ddof=0))}
    return report


def report_text(report: dict) -> str:
    lines = [f"n = {report['n']}  (std: {report['std_kind']})"]
    width = max(len(k) for k in report["metrics"])
    for k, v in report["metrics"].items():
        lines.append(f"{k.ljust(width)}  {v['mean']:.4f} +/- {v['std']:.4f}")
    return "\n".join(lines)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2)
