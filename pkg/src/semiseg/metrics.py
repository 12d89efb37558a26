"""Pixel-level and image-level segmentation metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PixelMetrics:
    dice: float
    dice_std: float
    sensitivity: float
    sensitivity_std: float
    specificity: float
    specificity_std: float


@dataclass(frozen=True)
class ImageMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int


def frame_pixel_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(dice, sensitivity, specificity) of one frame.

    Empty prediction on an empty target scores dice = sensitivity = 1; a
    target with no background scores specificity = 1.
    """
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    denom = 2 * tp + fp + fn
    dice = 1.0 if denom == 0 else 2 * tp / denom
    sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
    spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return dice, sens, spec


def aggregate_pixel(values: Sequence[tuple[float, float, float]]) -> PixelMetrics:
    """Mean and population std of per-frame values."""
    if len(values) == 0:
        raise ValueError("no frames to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    mean, std = arr.mean(axis=0), arr.std(axis=0)
    return PixelMetrics(mean[0], std[0], mean[1], std[1], mean[2], std[2])


def image_presence_metrics(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> ImageMetrics:
    """Frame-level detection: a frame is positive if any pixel is foreground."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need equally long, non-empty prediction and target lists")
    p = np.array([np.any(np.asarray(x) > 0) for x in preds])
    g = np.array([np.any(np.asarray(x) > 0) for x in gts])
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / len(p)
    return ImageMetrics(precision, recall, f1, accuracy, tp, fp, fn, tn)


def mean_dice(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    return float(np.mean([frame_pixel_metrics(p, g)[0] for p, g in zip(preds, gts)]))


TABLE_COLUMNS = ["model", "dice", "dice_std", "sensitivity", "sensitivity_std", "specificity",
                 "specificity_std", "precision", "recall", "f1", "accuracy"]


def report_row(name: str, pixel: PixelMetrics, image: ImageMetrics) -> dict:
    row = {"model": name}
    row.update(asdict(pixel))
    row.update({k: getattr(image, k) for k in ("precision", "recall", "f1", "accuracy")})
    return row


def write_report(rows: Sequence[dict], path) -> Path:
    """Metric table as CSV, plus a JSON twin next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    path.with_suffix(".json").write_text(json.dumps(list(rows), indent=2))
    return path


def format_table(rows: Sequence[dict]) -> str:
    """Percent table in the usual mean±std layout."""
    head = f"{'model':<16}{'Dice':>14}{'Sens.':>14}{'Spec.':>14}{'Pre.':>8}{'Rec.':>8}{'F1':>8}{'Acc.':>8}"
    lines = [head]
    for r in rows:
        def pm(k):
            return f"{100 * r[k]:.1f}±{100 * r[k + '_std']:.1f}"
        lines.append(
            f"{r['model']:<16}{pm('dice'):>14}{pm('sensitivity'):>14}{pm('specificity'):>14}"
            f"{100 * r['precision']:>8.1f}{100 * r['recall']:>8.1f}{100 * r['f1']:>8.1f}{100 * r['accuracy']:>8.1f}"
        )
    return "\n".join(lines)


def overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray | None = None) -> np.ndarray:
    """RGB uint8 overlay: prediction contour in green, target contour in red."""
    from scipy import ndimage

    rgb = np.round(np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8).copy()
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)

    def contour(m):
        m = np.asarray(m).astype(bool)
        return m & ~ndimage.binary_erosion(m)

    if gt is not None:
        rgb[contour(gt)] = (255, 0, 0)
    rgb[contour(pred)] = (0, 255, 0)
    return rgb
