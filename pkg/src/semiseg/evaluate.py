"""Model evaluation on a held-out split, optionally with temporal correction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledSet, sequences
from .metrics import (ImageMetrics, PixelMetrics, aggregate_pixel, frame_pixel_metrics,
                      image_presence_metrics, overlay)
from .temporal import FrameFlag, SequencePrediction, correct_sequence, detect_flags
from .trainer import predict_masks


@dataclass
class Evaluation:
    pixel: PixelMetrics
    image: ImageMetrics
    predictions: np.ndarray
    flags: dict[str, list[FrameFlag]]


def clips(data: LabeledSet) -> list[tuple[str, np.ndarray]]:
    """Contiguous runs of frames per video, as index arrays into ``data``."""
    out = []
    for vid, ix in sequences(data.records).items():
        run = [ix[0]]
        for i in ix[1:]:
            if data.records[i].frame_index == data.records[run[-1]].frame_index + 1:
                run.append(i)
            else:
                out.append((vid, np.asarray(run)))
                run = [i]
        out.append((vid, np.asarray(run)))
    return out


def apply_temporal_correction(data: LabeledSet, preds: np.ndarray, st_net):
    """Detect FP/FN frames per clip and re-predict them. Returns (masks, flags)."""
    corrected = preds.copy()
    all_flags: dict[str, list[FrameFlag]] = {}
    for vid, ix in clips(data):
        seq = SequencePrediction(vid, [data.records[i].frame_index for i in ix], data.images[ix], preds[ix])
        flags = detect_flags(seq)
        if flags:
            all_flags.setdefault(vid, []).extend(flags)
            corrected[ix] = correct_sequence(seq, flags, st_net).masks
    return corrected, all_flags


def evaluate_predictions(preds: np.ndarray, gts: np.ndarray) -> tuple[PixelMetrics, ImageMetrics]:
    per_frame = [frame_pixel_metrics(p, g) for p, g in zip(preds, gts)]
    return aggregate_pixel(per_frame), image_presence_metrics(list(preds), list(gts))


def evaluate_model(net, data: LabeledSet, mode: str = "raw", st_net=None,
                   overlay_dir=None) -> Evaluation:
    """Deterministic prediction at threshold 0.5, optional temporal correction,
    then per-frame metrics aggregated to mean and std."""
    if net is None:
        raise ValueError("missing segmentation network")
    if mode not in ("raw", "with_st"):
        raise ValueError(f"mode must be 'raw' or 'with_st', got {mode!r}")
    preds = predict_masks(net, data.images)
    flags: dict[str, list[FrameFlag]] = {}
    if mode == "with_st":
        preds, flags = apply_temporal_correction(data, preds, st_net)
    pixel, image = evaluate_predictions(preds, data.masks)
    if overlay_dir is not None:
        from PIL import Image

        out = Path(overlay_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r, img, p, g in zip(data.records, data.images, preds, data.masks):
            Image.fromarray(overlay(img, p, g)).save(out / f"{r.video_id}_{r.frame_index:05d}.png")
    return Evaluation(pixel, image, preds, flags)
