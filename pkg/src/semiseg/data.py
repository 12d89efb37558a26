"""Datasets: manifests, video-level splits, labeled subsets, synthetic clips.

A manifest is a list of frame records serialised as JSON lines. Paths in
the file are relative to the manifest's directory. Images are RGB PNGs;
masks are single-channel 8-bit PNGs with 0 = background, 255 = foreground.
In memory, images are float32 (C, H, W) in [0, 1] and masks uint8 (H, W).
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class MaskAccessError(PermissionError):
    """Raised when code asks for the mask of an unlabeled frame."""


@dataclass
class Frame:
    video_id: str
    frame_index: int
    image: np.ndarray
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class FrameRecord:
    video_id: str
    frame_index: int
    image_path: str
    mask_path: str | None = None
    split: str | None = None
    labeled: bool = False
    subset: str | None = None


@dataclass
class DatasetManifest:
    records: list[FrameRecord]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.records == other.records

    def videos(self, split: str | None = None) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            if split is None or r.split == split:
                seen.setdefault(r.video_id, None)
        return list(seen)

    def select(self, split: str | None = None, labeled: bool | None = None) -> list[FrameRecord]:
        return [
            r for r in self.records
            if (split is None or r.split == split) and (labeled is None or r.labeled == labeled)
        ]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(FrameRecord(**json.loads(line)))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        return cls(records, path.parent)


def read_image(path, size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0


def read_mask(path, size: int | None = None) -> np.ndarray:
    m = Image.open(path).convert("L")
    if size is not None and m.size != (size, size):
        m = m.resize((size, size), Image.NEAREST)
    return (np.asarray(m) >= 128).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


# --------------------------------------------------------------------------
# splitting and labeled subsets


def split_counts(n_videos: int, fractions: Sequence[float]) -> list[int]:
    """Floor each share, give empty-but-requested splits one video, and
    hand the remainder to the first (training) split."""
    counts = [int(math.floor(n_videos * f + 1e-9)) for f in fractions]
    remainder = n_videos - sum(counts)
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            if remainder > 0:
                remainder -= 1
            else:
                donor = int(np.argmax(counts))
                if counts[donor] <= 1:
                    raise ValueError("not enough videos to populate every split")
                counts[donor] -= 1
            counts[i] = 1
    counts[0] += remainder
    return counts


def split_by_video(manifest: DatasetManifest, fractions=(0.75, 0.05, 0.20), seed: int = 0,
                   names: Sequence[str] = SPLITS) -> DatasetManifest:
    if len(fractions) != len(names):
        raise ValueError("one fraction per split name")
    if abs(sum(fractions) - 1.0) > 1e-6 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    videos = sorted(manifest.videos())
    n_nonzero = sum(1 for f in fractions if f > 0)
    if len(videos) < n_nonzero:
        raise ValueError(f"{len(videos)} videos cannot fill {n_nonzero} splits")
    order = np.random.default_rng(seed).permutation(len(videos))
    counts = split_counts(len(videos), fractions)
    assignment = {}
    start = 0
    for name, c in zip(names, counts):
        for idx in order[start:start + c]:
            assignment[videos[idx]] = name
        start += c
    records = [replace(r, split=assignment[r.video_id], labeled=False) for r in manifest.records]
    return DatasetManifest(records, manifest.root)


def sample_labeled(manifest: DatasetManifest, ratio: float, seed: int = 0,
                   split: str = "train") -> DatasetManifest:
    """Mark whole training videos as labeled until the frame budget is met.

    Only videos whose every frame has a mask are eligible. The remaining
    training frames form the unlabeled pool.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    train = manifest.select(split)
    if not train:
        raise ValueError(f"no frames in split {split!r}")
    by_video: dict[str, list[FrameRecord]] = {}
    for r in train:
        by_video.setdefault(r.video_id, []).append(r)
    eligible = sorted(v for v, rs in by_video.items() if all(r.mask_path for r in rs))
    budget = ratio * len(train)
    available = sum(len(by_video[v]) for v in eligible)
    if available + 1e-9 < budget:
        raise ValueError(f"ratio {ratio} needs {budget:.0f} labeled frames, only {available} have masks")
    chosen: set[str] = set()
    count = 0
    for idx in np.random.default_rng(seed).permutation(len(eligible)):
        if count >= budget - 1e-9:
            break
        v = eligible[idx]
        chosen.add(v)
        count += len(by_video[v])
    records = [
        replace(r, labeled=(r.split == split and r.video_id in chosen)) if r.split == split else r
        for r in manifest.records
    ]
    return DatasetManifest(records, manifest.root)


# --------------------------------------------------------------------------
# in-memory access with an enforced labeled/unlabeled boundary


class LabeledSet:
    """Images and masks of labeled frames, in manifest order."""

    def __init__(self, records: list[FrameRecord], images: np.ndarray, masks: np.ndarray):
        self.records = records
        self.images = images
        self.masks = masks

    def __len__(self) -> int:
        return len(self.records)


class UnlabeledSet:
    """Images of the unlabeled pool. Mask paths are stripped on entry."""

    def __init__(self, records: list[FrameRecord], images: np.ndarray):
        self.records = [replace(r, mask_path=None) for r in records]
        self.images = images

    def __len__(self) -> int:
        return len(self.records)

    def mask(self, i: int):
        raise MaskAccessError("masks of unlabeled frames are not available to training code")

    @property
    def masks(self):
        raise MaskAccessError("masks of unlabeled frames are not available to training code")


class FrameStore:
    """Loads frames of a manifest into memory, keyed by split/labeled flag."""

    def __init__(self, manifest: DatasetManifest, size: int | None = None):
        self.manifest = manifest
        self.size = size

    def _images(self, records) -> np.ndarray:
        if not records:
            return np.zeros((0, 3, self.size or 1, self.size or 1), np.float32)
        return np.stack([read_image(self.manifest.resolve(r.image_path), self.size) for r in records])

    def _masks(self, records) -> np.ndarray:
        missing = [r for r in records if not r.mask_path]
        if missing:
            raise ValueError(f"{len(missing)} frames have no mask (first: {missing[0].video_id}#{missing[0].frame_index})")
        if not records:
            return np.zeros((0, self.size or 1, self.size or 1), np.uint8)
        return np.stack([read_mask(self.manifest.resolve(r.mask_path), self.size) for r in records])

    def labeled(self, split: str = "train") -> LabeledSet:
        recs = self.manifest.select(split, labeled=True)
        return LabeledSet(recs, self._images(recs), self._masks(recs))

    def unlabeled(self, split: str = "train") -> UnlabeledSet:
        recs = self.manifest.select(split, labeled=False)
        return UnlabeledSet(recs, self._images(recs))

    def evaluation(self, split: str) -> LabeledSet:
        """All frames of a held-out split with masks, sorted by video then time."""
        recs = sorted(self.manifest.select(split), key=lambda r: (r.video_id, r.frame_index))
        return LabeledSet(recs, self._images(recs), self._masks(recs))


def sequences(records: Sequence[FrameRecord]) -> dict[str, list[int]]:
    """Indices into ``records`` grouped per video and ordered by frame index."""
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.video_id, []).append(i)
    return {v: sorted(ix, key=lambda i: records[i].frame_index) for v, ix in groups.items()}


# --------------------------------------------------------------------------
# video frame extraction


def extract_frames(video_path, fps: float, size: int | None = 256, video_id: str | None = None) -> list[Frame]:
    """Sample frames at ``fps`` (at most the native rate), resized to size x size."""
    import cv2

    cap = cv2.VideoCapture(str(video_path))
    if not cap.isOpened():
        raise OSError(f"cannot read video {video_path}")
    native = cap.get(cv2.CAP_PROP_FPS) or fps
    if fps <= 0:
        raise ValueError("fps must be positive")
    vid = video_id or Path(video_path).stem
    frames: list[Frame] = []
    last_slot = -1
    i = 0
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            slot = math.floor(i * min(fps, native) / native + 1e-9)
            if slot > last_slot:
                last_slot = slot
                rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
                if size is not None:
                    rgb = cv2.resize(rgb, (size, size), interpolation=cv2.INTER_AREA)
                image = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
                frames.append(Frame(vid, len(frames), image))
            i += 1
    finally:
        cap.release()
    if i == 0:
        raise OSError(f"no frames decoded from {video_path}")
    return frames


def ingest_video(video_path, out_dir, fps: float = 3.0, size: int = 256,
                 video_id: str | None = None) -> list[FrameRecord]:
    """Extract frames to PNG files under ``out_dir`` and return unlabeled records."""
    out = Path(out_dir)
    frames = extract_frames(video_path, fps, size, video_id)
    vid = frames[0].video_id if frames else (video_id or Path(video_path).stem)
    (out / "images" / vid).mkdir(parents=True, exist_ok=True)
    records = []
    for f in frames:
        rel = Path("images") / vid / f"{f.frame_index:05d}.png"
        write_image(out / rel, f.image)
        records.append(FrameRecord(vid, f.frame_index, rel.as_posix()))
    return records


# --------------------------------------------------------------------------
# PolypGen layout


def polypgen_manifest(root, train_centers=(1, 2, 3, 4, 5), test_centers=(6,)) -> DatasetManifest:
    """Manifest for a PolypGen-style tree.

    Single frames: ``data_C<n>/images_C<n>/<stem>.<ext>`` with masks at
    ``data_C<n>/masks_C<n>/<stem>_mask.<ext>``; every single frame is its
    own one-frame video. Sequences: ``sequenceData/**/<seq>/images*/`` with
    sibling ``masks*/`` folders; the centre is read from a ``C<n>`` token in
    the sequence or file name. Centres in ``train_centers`` go to train,
    ``test_centers`` to test.
    """
    root = Path(root)

    def centre_split(c: int | None) -> str | None:
        if c in train_centers:
            return "train"
        if c in test_centers:
            return "test"
        return None

    def find_mask(mask_dir: Path, stem: str) -> Path | None:
        for cand in (f"{stem}_mask", stem):
            for ext in IMAGE_EXTS:
                p = mask_dir / f"{cand}{ext}"
                if p.exists():
                    return p
        return None

    records: list[FrameRecord] = []
    for data_dir in sorted(root.glob("data_C*")):
        m = re.fullmatch(r"data_C(\d+)", data_dir.name)
        if not m:
            continue
        c = int(m.group(1))
        img_dir, mask_dir = data_dir / f"images_C{c}", data_dir / f"masks_C{c}"
        for img in sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_EXTS):
            mask = find_mask(mask_dir, img.stem)
            records.append(FrameRecord(
                video_id=f"C{c}_{img.stem}", frame_index=0,
                image_path=img.relative_to(root).as_posix(),
                mask_path=mask.relative_to(root).as_posix() if mask else None,
                split=centre_split(c), subset="single",
            ))
    seq_root = root / "sequenceData"
    for img_dir in sorted(p for p in seq_root.glob("**/images*") if p.is_dir()):
        seq_dir = img_dir.parent
        mask_dirs = [p for p in seq_dir.glob("masks*") if p.is_dir()]
        mask_dir = mask_dirs[0] if mask_dirs else None
        imgs = sorted(p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_EXTS)
        for idx, img in enumerate(imgs):
            token = re.search(r"C(\d+)", f"{seq_dir.name}/{img.name}")
            c = int(token.group(1)) if token else None
            mask = find_mask(mask_dir, img.stem) if mask_dir else None
            records.append(FrameRecord(
                video_id=seq_dir.name, frame_index=idx,
                image_path=img.relative_to(root).as_posix(),
                mask_path=mask.relative_to(root).as_posix() if mask else None,
                split=centre_split(c), subset="sequence",
            ))
    return DatasetManifest(records, root)


# --------------------------------------------------------------------------
# synthetic moving-object clips


@dataclass
class SynthConfig:
    n_videos: int = 12
    frames_per_video: int = 50
    image_size: int = 64
    object_kind: str = "mixed"  # disc | ellipse | mixed
    radius_range: tuple[float, float] = (0.10, 0.22)  # fraction of image size
    motion_amplitude: float = 0.15  # fraction of image size
    noise_level: float = 0.06
    blur_prob: float = 0.2
    empty_prob: float = 0.15
    empty_run: float = 4.0  # mean length of an object-absent run
    distractors: int = 3
    illumination: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.n_videos < 1 or self.frames_per_video < 1 or self.image_size < 1:
            raise ValueError("n_videos, frames_per_video and image_size must be positive")
        if self.object_kind not in ("disc", "ellipse", "mixed"):
            raise ValueError(f"unknown object kind {self.object_kind!r}")
        if not 0.0 <= self.empty_prob <= 1.0:
            raise ValueError("empty_prob must be in [0, 1]")


def _presence(rng: np.random.Generator, n: int, empty_prob: float, run: float) -> np.ndarray:
    # two-state Markov chain: stationary absent fraction = empty_prob, mean absent run = run
    if empty_prob >= 1.0:
        return np.zeros(n, bool)
    if empty_prob <= 0.0:
        return np.ones(n, bool)
    leave_absent = 1.0 / max(run, 1.0)
    enter_absent = min(1.0, empty_prob * leave_absent / (1.0 - empty_prob))
    present = np.empty(n, bool)
    state = rng.random() >= empty_prob
    for t in range(n):
        present[t] = state
        flip = rng.random() < (enter_absent if state else leave_absent)
        state = (not state) if flip else state
    return present


def _video_style(rng: np.random.Generator, cfg: SynthConfig) -> dict:
    kind = cfg.object_kind if cfg.object_kind != "mixed" else ("disc" if rng.random() < 0.5 else "ellipse")
    bg = rng.uniform(0.08, 0.45, size=3)
    obj = np.clip(bg + rng.uniform(0.2, 0.5) * rng.uniform(0.6, 1.0, size=3), 0, 1)
    s = cfg.image_size
    return {
        "kind": kind,
        "bg": bg,
        "obj": obj,
        "radius": rng.uniform(*cfg.radius_range) * s,
        "aspect": rng.uniform(0.5, 0.85) if kind == "ellipse" else 1.0,
        "theta0": rng.uniform(0, np.pi),
        "spin": rng.uniform(-0.3, 0.3) * cfg.motion_amplitude,
        "centre": rng.uniform(0.35, 0.65, size=2) * s,
        "freq": rng.uniform(0.04, 0.15, size=2),
        "phase": rng.uniform(0, 2 * np.pi, size=2),
        "texture": ndimage.gaussian_filter(rng.normal(size=(s, s)), s / 10) * (s / 10) * 0.25,
        "vignette": rng.uniform(0.2, 0.6),
        "distractors": [
            (rng.uniform(0.1, 0.9, size=2) * s, rng.uniform(0.02, 0.05) * s, rng.uniform(0.1, 0.3))
            for _ in range(rng.integers(0, cfg.distractors + 1))
        ],
    }


def render_frame(cfg: SynthConfig, style: dict, t: int, present: bool, rng: np.random.Generator | None):
    """Render frame t of a clip. With ``rng=None`` the frame is noiseless."""
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    amp = cfg.motion_amplitude * s
    cy, cx = style["centre"] + amp * np.sin(style["freq"] * t + style["phase"])
    theta = style["theta0"] + style["spin"] * t
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = style["radius"]
    inside = (u / r) ** 2 + (v / (r * style["aspect"])) ** 2 <= 1.0
    mask = (inside & present).astype(np.uint8)

    rr = np.hypot(yy - (s - 1) / 2, xx - (s - 1) / 2) / (s / 2)
    shade = 1.0 - style["vignette"] * np.clip(rr, 0, 1.5) ** 2
    img = style["bg"][:, None, None] * (1.0 + style["texture"])[None] * shade[None]
    for (dyc, dxc), dr, gain in style["distractors"]:
        blob = np.exp(-((yy - dyc) ** 2 + (xx - dxc) ** 2) / (2 * dr**2))
        img = img + gain * blob[None]
    img = np.where(mask[None].astype(bool), style["obj"][:, None, None] * (0.85 + 0.15 * shade[None]), img)
    if rng is not None:
        gain = 1.0 + cfg.illumination * rng.uniform(-1, 1)
        img = img * gain
        if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
            img = np.stack([ndimage.gaussian_filter(c, rng.uniform(0.8, 2.0)) for c in img])
        if cfg.noise_level > 0:
            img = img + rng.normal(0, cfg.noise_level, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32), mask


def synth_video(cfg: SynthConfig, v: int) -> tuple[np.ndarray, np.ndarray]:
    """(images (T, 3, S, S), masks (T, S, S)) for video ``v``; deterministic."""
    rng = np.random.default_rng([cfg.seed, v])
    style = _video_style(rng, cfg)
    present = _presence(rng, cfg.frames_per_video, cfg.empty_prob, cfg.empty_run)
    frames, masks = [], []
    for t in range(cfg.frames_per_video):
        img, m = render_frame(cfg, style, t, bool(present[t]), rng)
        frames.append(img)
        masks.append(m)
    return np.stack(frames), np.stack(masks)


def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write a synthetic clip dataset under ``out_dir`` and its manifest."""
    config.validate()
    out = Path(out_dir)
    records = []
    for v in range(config.n_videos):
        vid = f"vid{v:03d}"
        (out / "images" / vid).mkdir(parents=True, exist_ok=True)
        (out / "masks" / vid).mkdir(parents=True, exist_ok=True)
        images, masks = synth_video(config, v)
        for t in range(config.frames_per_video):
            img_rel = f"images/{vid}/{t:05d}.png"
            mask_rel = f"masks/{vid}/{t:05d}.png"
            write_image(out / img_rel, images[t])
            write_mask(out / mask_rel, masks[t])
            records.append(FrameRecord(vid, t, img_rel, mask_rel))
    manifest = DatasetManifest(records, out)
    manifest.save(out / "manifest.jsonl")
    (out / "synth_config.json").write_text(json.dumps(asdict(config), indent=2))
    log.info("wrote %d frames of %d videos to %s", len(records), config.n_videos, out)
    return manifest


def synthetic_arrays(config: SynthConfig) -> Iterable[tuple[str, np.ndarray, np.ndarray]]:
    """In-memory variant of :func:`generate_synthetic` (no 8-bit quantisation)."""
    config.validate()
    for v in range(config.n_videos):
        images, masks = synth_video(config, v)
        yield f"vid{v:03d}", images, masks
