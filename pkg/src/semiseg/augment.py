"""Weak (geometric), strong (intensity) and CutMix augmentation.

Images are float arrays shaped (C, H, W) with values in [0, 1]; masks and
other per-pixel maps are (H, W). Strong augmentation never moves pixels, so
a pseudo-label computed on the weak view stays aligned with the strong view.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class WeakParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0
    scale: float = 1.0

    def is_identity(self) -> bool:
        return not self.hflip and not self.vflip and self.angle == 0.0 and self.scale == 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StrongParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    blur_sigma: float | None = None
    grayscale: bool = False

    def is_identity(self) -> bool:
        return (
            self.brightness == 1.0
            and self.contrast == 1.0
            and self.saturation == 1.0
            and self.blur_sigma is None
            and not self.grayscale
        )


@dataclass(frozen=True)
class CutMixPlan:
    top: int
    left: int
    height: int
    width: int
    partner_index: int


@dataclass
class AugmentSettings:
    flip_p: float = 0.5
    max_rotation: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    jitter: float = 0.4
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    grayscale_p: float = 0.2
    cutmix_p: float = 0.5


DEFAULT_SETTINGS = AugmentSettings()


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_weak_params(seed, settings: AugmentSettings = DEFAULT_SETTINGS) -> WeakParams:
    rng = _rng(seed)
    return WeakParams(
        hflip=bool(rng.random() < settings.flip_p),
        vflip=bool(rng.random() < settings.flip_p),
        angle=float(rng.uniform(-settings.max_rotation, settings.max_rotation)),
        scale=float(rng.uniform(*settings.scale_range)),
    )


def _affine(arr: np.ndarray, angle: float, scale: float, order: int) -> np.ndarray:
    # rotate/scale about the image centre; output grid maps back into input
    h, w = arr.shape
    theta = np.deg2rad(angle)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    matrix = rot / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant", cval=0.0)


def apply_weak(image: np.ndarray, mask: np.ndarray | None, params: WeakParams):
    img = np.asarray(image)
    m = None if mask is None else np.asarray(mask)
    if params.is_identity():
        return img.copy(), (None if m is None else m.copy())
    if params.hflip:
        img = img[..., ::-1]
        m = None if m is None else m[..., ::-1]
    if params.vflip:
        img = img[..., ::-1, :]
        m = None if m is None else m[..., ::-1, :]
    if params.angle != 0.0 or params.scale != 1.0:
        img = np.stack([_affine(c, params.angle, params.scale, order=1) for c in img]).astype(image.dtype)
        if m is not None:
            m = _affine(m.astype(np.float64), params.angle, params.scale, order=0).astype(mask.dtype)
    img = np.ascontiguousarray(img)
    m = None if m is None else np.ascontiguousarray(m)
    return img, m


def weak_augment(image: np.ndarray, mask: np.ndarray | None = None, seed=0,
                 settings: AugmentSettings = DEFAULT_SETTINGS):
    """Random flips, rotation and scale; the same transform hits the mask."""
    params = sample_weak_params(seed, settings)
    img, m = apply_weak(image, mask, params)
    return img, m, params


def sample_strong_params(seed, settings: AugmentSettings = DEFAULT_SETTINGS) -> StrongParams:
    rng = _rng(seed)
    j = settings.jitter
    brightness = float(rng.uniform(1 - j, 1 + j))
    contrast = float(rng.uniform(1 - j, 1 + j))
    saturation = float(rng.uniform(1 - j, 1 + j))
    blur = float(rng.uniform(*settings.blur_sigma)) if rng.random() < settings.blur_p else None
    gray = bool(rng.random() < settings.grayscale_p)
    return StrongParams(brightness, contrast, saturation, blur, gray)


def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def apply_strong(image: np.ndarray, params: StrongParams) -> np.ndarray:
    img = np.asarray(image)
    if params.is_identity():
        return img.copy()
    dtype = img.dtype
    out = img.astype(np.float64)
    out = np.clip(out * params.brightness, 0, 1)
    mean = _luma(out).mean()
    out = np.clip((out - mean) * params.contrast + mean, 0, 1)
    if out.shape[0] == 3:
        gray = _luma(out)[None]
        out = np.clip((out - gray) * params.saturation + gray, 0, 1)
    if params.blur_sigma is not None:
        out = np.stack([ndimage.gaussian_filter(c, params.blur_sigma, mode="nearest") for c in out])
    if params.grayscale:
        out = np.repeat(_luma(out)[None], out.shape[0], axis=0)
    return out.astype(dtype)


def strong_augment(weak_image: np.ndarray, seed=0, settings: AugmentSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Colour jitter, optional Gaussian blur and optional grayscale."""
    return apply_strong(weak_image, sample_strong_params(seed, settings))


def sample_cutmix_plans(batch_size: int, height: int, width: int, seed,
                        p: float = DEFAULT_SETTINGS.cutmix_p) -> list[CutMixPlan | None]:
    """One plan per sample (or None); donor is the next sample in the batch."""
    if batch_size < 2:
        return [None] * batch_size
    rng = _rng(seed)
    plans: list[CutMixPlan | None] = []
    for i in range(batch_size):
        apply = rng.random() < p
        lam = rng.beta(1.0, 1.0)
        cut = np.sqrt(1.0 - lam)
        ch, cw = int(height * cut), int(width * cut)
        cy, cx = int(rng.integers(height)), int(rng.integers(width))
        if not apply:
            plans.append(None)
            continue
        top, bottom = np.clip(cy - ch // 2, 0, height), np.clip(cy + ch // 2, 0, height)
        left, right = np.clip(cx - cw // 2, 0, width), np.clip(cx + cw // 2, 0, width)
        plans.append(CutMixPlan(int(top), int(left), int(bottom - top), int(right - left), (i + 1) % batch_size))
    return plans


def apply_cutmix(batch: np.ndarray, plans: Sequence[CutMixPlan | None]) -> np.ndarray:
    """Paste each plan's donor box into its receiver. Works on any array
    whose first axis is the batch and last two axes are (H, W)."""
    src = batch
    out = src.clone() if hasattr(src, "clone") else np.array(src, copy=True)
    for i, plan in enumerate(plans):
        if plan is None or plan.height == 0 or plan.width == 0:
            continue
        ys = slice(plan.top, plan.top + plan.height)
        xs = slice(plan.left, plan.left + plan.width)
        out[i, ..., ys, xs] = src[plan.partner_index, ..., ys, xs]
    return out


def cutmix(batch_images: np.ndarray, batch_companions: Sequence[np.ndarray], seed=0,
           p: float = DEFAULT_SETTINGS.cutmix_p):
    """CutMix a batch and every aligned companion array with the same boxes."""
    images = batch_images
    b = images.shape[0]
    h, w = images.shape[-2:]
    plans = sample_cutmix_plans(b, h, w, seed, p)
    return apply_cutmix(images, plans), [apply_cutmix(c, plans) for c in batch_companions], plans
