"""Frame-level false-positive / false-negative detection and correction.

A predicted clip is scanned once: a frame with foreground whose two
neighbours are both empty is a false-positive candidate; an empty frame
whose two neighbours each cover more than a quarter of the image is a
false-negative candidate. Flagged frames are re-predicted by the correction
network from a five-frame window; all other frames pass through unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

FP = "FP"
FN = "FN"
WINDOW = 5


@dataclass
class SequencePrediction:
    video_id: str
    frame_indices: list[int]
    images: np.ndarray  # (T, C, H, W)
    masks: np.ndarray  # (T, H, W) uint8

    def __post_init__(self):
        idx = list(self.frame_indices)
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise ValueError(f"{self.video_id}: frame indices must be consecutive and increasing")
        if len(idx) != len(self.images) or len(idx) != len(self.masks):
            raise ValueError(f"{self.video_id}: frame, image and mask counts differ")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.masks.shape[-2:])


@dataclass(frozen=True)
class FrameFlag:
    frame_index: int
    kind: str
    r_prev: int
    r: int
    r_next: int


def foreground_count(mask: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(mask)))


def classify(r_prev: int, r: int, r_next: int, min_area: float) -> str | None:
    """FP/FN rule for one frame given its and its neighbours' foreground counts."""
    if r > 0 and r_prev == 0 and r_next == 0:
        return FP
    if r == 0 and r_prev > min_area and r_next > min_area:
        return FN
    return None


def flags_from_counts(counts: Sequence[int], height: int, width: int,
                      frame_indices: Sequence[int] | None = None) -> list[FrameFlag]:
    """Apply both rules to a foreground-count sequence; ends are never flagged."""
    min_area = height * width / 4.0
    idx = list(frame_indices) if frame_indices is not None else list(range(len(counts)))
    flags = []
    for n in range(1, len(counts) - 1):
        kind = classify(counts[n - 1], counts[n], counts[n + 1], min_area)
        if kind is not None:
            flags.append(FrameFlag(idx[n], kind, int(counts[n - 1]), int(counts[n]), int(counts[n + 1])))
    return flags


def detect_flags(seq: SequencePrediction) -> list[FrameFlag]:
    h, w = seq.shape
    counts = [foreground_count(m) for m in seq.masks]
    flags = flags_from_counts(counts, h, w, seq.frame_indices)
    assert len({f.frame_index for f in flags}) == len(flags), "a frame carries at most one flag"
    return flags


def window_indices(n: int, length: int, size: int = WINDOW) -> list[int]:
    """Positions n-2 .. n+2, clamped to the clip (edge replication)."""
    half = size // 2
    return [min(max(n + k, 0), length - 1) for k in range(-half, half + 1)]


def build_window(images: np.ndarray, masks: np.ndarray, n: int) -> np.ndarray:
    """(5*C + 5, H, W) correction input: five frames, then five masks."""
    ix = window_indices(n, len(images))
    frames = np.concatenate([images[i] for i in ix], axis=0)
    ms = np.stack([masks[i] for i in ix]).astype(np.float32)
    return np.concatenate([frames.astype(np.float32), ms], axis=0)


def correct_sequence(seq: SequencePrediction, flags: Sequence[FrameFlag], net,
                     threshold: float = 0.5) -> SequencePrediction:
    """Replace each flagged frame's mask with the correction network's output.

    Windows are always built from the original (pre-correction) masks.
    """
    if not flags:
        return SequencePrediction(seq.video_id, list(seq.frame_indices), seq.images, seq.masks.copy())
    if net is None:
        raise ValueError("a correction network is required when frames are flagged")
    pos = {fi: i for i, fi in enumerate(seq.frame_indices)}
    targets = [pos[f.frame_index] for f in flags]
    batch = np.stack([build_window(seq.images, seq.masks, n) for n in targets])
    was_training = net.training
    net.eval()
    with torch.no_grad():
        prob = torch.sigmoid(net(torch.from_numpy(batch))).numpy()[:, 0]
    net.train(was_training)
    out = seq.masks.copy()
    for n, p in zip(targets, prob):
        out[n] = (p >= threshold).astype(out.dtype)
    return SequencePrediction(seq.video_id, list(seq.frame_indices), seq.images, out)


def flag_report(video_flags: dict[str, Sequence[FrameFlag]], path) -> Path:
    """Per-video JSON report of flagged frames and their foreground counts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        vid: [{"frame_index": f.frame_index, "kind": f.kind, "R_prev": f.r_prev, "R": f.r, "R_next": f.r_next}
              for f in flags]
        for vid, flags in video_flags.items()
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
