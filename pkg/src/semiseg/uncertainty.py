"""Epistemic uncertainty, dynamic filtering and joint pseudo-label fusion.

Everything here is a pure numpy function over 2-D maps (H, W). Probability
maps live in [0, 1]; uncertainty maps are binary entropies in nats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

EPS = 1e-7
LN2 = math.log(2.0)
FOREGROUND_THRESHOLD = 0.5


@dataclass(frozen=True)
class PseudoLabelBundle:
    """Pseudo-label products of one network on one image."""

    raw_label: np.ndarray
    prob: np.ndarray
    uncertainty: np.ndarray
    confidence: np.ndarray
    filtered_label: np.ndarray
    threshold: float


@dataclass(frozen=True)
class JointPseudoLabel:
    """Per-pixel fusion of two bundles, choosing the less uncertain network."""

    selector: np.ndarray
    prob: np.ndarray
    uncertainty: np.ndarray
    raw_label: np.ndarray
    confidence: np.ndarray
    filtered_label: np.ndarray
    threshold: float


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def binary_entropy(p):
    """Binary entropy h(p) in nats, with p clamped to [EPS, 1 - EPS].

    Accepts scalars or arrays. Values exactly at 0 or 1 map to 0 by
    convention, and the result is clipped to [0, ln 2].
    """
    arr = np.asarray(p, dtype=np.float64)
    _check_finite(arr, "probability")
    q = np.clip(arr, EPS, 1.0 - EPS)
    h = -q * np.log(q) - (1.0 - q) * np.log1p(-q)
    h = np.where((arr <= 0.0) | (arr >= 1.0), 0.0, h)
    h = np.clip(h, 0.0, LN2)
    if np.ndim(p) == 0:
        return float(h)
    return h


def aggregate_mc(passes: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean probability and mean per-pass entropy over K stochastic passes.

    The uncertainty is the average of the per-pass entropies, not the
    entropy of the averaged probability.
    """
    if len(passes) == 0:
        raise ValueError("aggregate_mc needs at least one pass")
    shape = np.shape(passes[0])
    for k, p in enumerate(passes):
        if np.shape(p) != shape:
            raise ValueError(f"pass {k} has shape {np.shape(p)}, expected {shape}")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in passes])
    prob = stack.mean(axis=0)
    unc = binary_entropy(stack).mean(axis=0)
    return prob, unc


def dynamic_threshold(u: np.ndarray) -> float:
    """min(mean + std, 95th percentile) over all pixels of an uncertainty map.

    Population std; percentile by linear interpolation between order
    statistics.
    """
    arr = np.asarray(u, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty uncertainty map")
    _check_finite(arr, "uncertainty")
    mean_plus_std = arr.mean() + arr.std()
    p95 = np.percentile(arr, 95, method="linear")
    return float(min(mean_plus_std, p95))


def confidence_mask(u: np.ndarray, threshold: float) -> np.ndarray:
    """1 where uncertainty is strictly below the threshold.

    A constant map would exclude every pixel under the strict rule, so it is
    instead judged as a whole: all confident when the constant is below
    half the maximum binary entropy, all uncertain otherwise.
    """
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    arr = np.asarray(u, dtype=np.float64)
    if arr.size and arr.max() == arr.min():
        value = 1 if arr.flat[0] < 0.5 * LN2 else 0
        return np.full(arr.shape, value, dtype=np.uint8)
    return (arr < threshold).astype(np.uint8)


def binarize(prob: np.ndarray) -> np.ndarray:
    return (np.asarray(prob) >= FOREGROUND_THRESHOLD).astype(np.uint8)


def make_bundle(prob: np.ndarray, unc: np.ndarray) -> PseudoLabelBundle:
    prob = np.asarray(prob, dtype=np.float64)
    unc = np.asarray(unc, dtype=np.float64)
    _check_same_shape(prob, unc, "make_bundle")
    raw = binarize(prob)
    t = dynamic_threshold(unc)
    conf = confidence_mask(unc, t)
    return PseudoLabelBundle(
        raw_label=raw,
        prob=prob,
        uncertainty=unc,
        confidence=conf,
        filtered_label=raw * conf,
        threshold=t,
    )


def fuse_joint(b1: PseudoLabelBundle, b2: PseudoLabelBundle) -> JointPseudoLabel:
    """Joint pseudo-label: per pixel, take whichever network is less uncertain.

    Ties go to network 2. The fused uncertainty map is re-filtered with the
    same dynamic threshold rule.
    """
    _check_same_shape(b1.uncertainty, b2.uncertainty, "fuse_joint")
    sel = (b1.uncertainty < b2.uncertainty).astype(np.uint8)
    s = sel.astype(bool)
    prob = np.where(s, b1.prob, b2.prob)
    unc = np.where(s, b1.uncertainty, b2.uncertainty)
    raw = binarize(prob)
    t = dynamic_threshold(unc)
    conf = confidence_mask(unc, t)
    return JointPseudoLabel(
        selector=sel,
        prob=prob,
        uncertainty=unc,
        raw_label=raw,
        confidence=conf,
        filtered_label=raw * conf,
        threshold=t,
    )


def dump_bundle(bundle: PseudoLabelBundle | JointPseudoLabel, out_dir, stem: str) -> Path:
    """Write a bundle as lossless PNGs plus a JSON sidecar for inspection."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray((bundle.raw_label * 255).astype(np.uint8)).save(out / f"{stem}_raw.png")
    Image.fromarray((bundle.confidence * 255).astype(np.uint8)).save(out / f"{stem}_conf.png")
    Image.fromarray((bundle.filtered_label * 255).astype(np.uint8)).save(out / f"{stem}_filtered.png")
    Image.fromarray(np.round(bundle.prob * 255).astype(np.uint8)).save(out / f"{stem}_prob.png")
    # uncertainty scaled so ln 2 maps to 255
    unc8 = np.round(np.clip(bundle.uncertainty / LN2, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(unc8).save(out / f"{stem}_unc.png")
    meta = {
        "threshold": bundle.threshold,
        "confident_fraction": float(bundle.confidence.mean()),
        "foreground_fraction": float(bundle.filtered_label.mean()),
        "shape": list(bundle.prob.shape),
    }
    sidecar = out / f"{stem}.json"
    sidecar.write_text(json.dumps(meta, indent=2))
    return sidecar
