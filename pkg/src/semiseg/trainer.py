"""Semi-supervised training loop for a pair of cross-supervising networks.

Per step, with labeled batch (x_l, y_l) and unlabeled batch (weak x_u,
strong x_u^s):

1. deterministic forward of both networks on x_l: supervised BCE, cross
   pseudo-supervision with raw labels, multi-level mutual loss;
2. K dropout passes of each network on x_u -> mean probability and mean
   entropy -> dynamically filtered pseudo-labels per network;
3. per-pixel fusion of the two into a joint pseudo-label;
4. CutMix of images and every target array with shared boxes;
5. masked cross losses on x_u (other network's label) and on x_u^s (joint
   label);
6. labeled total + 0.5 * unlabeled total; one optimizer step per network.

Ablation toggles remove components one at a time; with all of them off the
step is plain cross pseudo supervision.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import augment, losses, uncertainty
from .data import LabeledSet, UnlabeledSet, sequences
from .nets import NetConfig, UNet, build_correction_net, build_pair, mc_forward, predict_prob, tapped_forward

log = logging.getLogger(__name__)

METHODS = ("endo-semis", "cps", "generic", "supervised")
TOGGLES = ("au", "eu", "jps", "ml_d", "ml_eb")
CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "endo-semis"
    au: bool | None = None
    eu: bool | None = None
    jps: bool | None = None
    ml_d: bool | None = None
    ml_eb: bool | None = None
    labeled_ratio: float = 0.1
    batch_size: int = 16
    epochs: int = 200
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    weight_decay: float = 1e-4
    k: int = 5
    seed: int = 0
    image_size: int = 256
    base_width: int = 32
    depth: int = 4
    dropout_rate: float = 0.5
    norm: str = "instance"
    cutmix_p: float = 0.5
    probe_size: int = 8
    steps_per_epoch: int | None = None  # None: one pass over the unlabeled (else labeled) frames

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        on = self.method == "endo-semis"
        for t in TOGGLES:
            if getattr(self, t) is None:
                setattr(self, t, on)
        if self.method in ("generic", "supervised") and any(getattr(self, t) for t in TOGGLES):
            raise ValueError(f"ablation toggles do not apply to method {self.method!r}")
        if not 0.0 < self.labeled_ratio <= 1.0:
            raise ValueError("labeled_ratio must be in (0, 1]")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.batch_size < 1 or self.epochs < 0 or self.k < 1:
            raise ValueError("batch_size and k must be positive, epochs non-negative")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")

    @property
    def net_config(self) -> NetConfig:
        return NetConfig(3, self.base_width, self.depth, self.dropout_rate, self.norm)

    @property
    def uses_unlabeled(self) -> bool:
        return self.method != "supervised"

    @property
    def mc_passes(self) -> int:
        return self.k if self.eu else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(step: int, total_steps: int, config) -> float:
    """Cosine decay from lr_init at step 0 to lr_final at total_steps.

    ``config`` is anything with ``lr_init`` and ``lr_final`` attributes.
    """
    if total_steps <= 0:
        return config.lr_init
    frac = min(max(step / total_steps, 0.0), 1.0)
    return config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (1.0 + math.cos(math.pi * frac))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


@dataclass
class TrainState:
    config: TrainConfig
    net1: UNet
    net2: UNet
    opt1: torch.optim.Optimizer
    opt2: torch.optim.Optimizer
    total_steps: int = 1
    epoch: int = 0
    step: int = 0
    best_dice: list = field(default_factory=lambda: [-1.0, -1.0])


def init_state(config: TrainConfig, total_steps: int = 1) -> TrainState:
    net1, net2 = build_pair(config.net_config, seed=derive_seed(config.seed, 1), seed2=derive_seed(config.seed, 2))

    def opt(net):
        return torch.optim.AdamW(net.parameters(), lr=config.lr_init, weight_decay=config.weight_decay)

    return TrainState(config, net1, net2, opt(net1), opt(net2), total_steps=total_steps)


# --------------------------------------------------------------------------
# pseudo-label targets


@dataclass
class UnlabeledTargets:
    """Per-image pseudo-label arrays, stacked (B, H, W); never require grad."""

    label1: np.ndarray
    conf1: np.ndarray
    label2: np.ndarray
    conf2: np.ndarray
    joint_label: np.ndarray
    joint_conf: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.label1, self.conf1, self.label2, self.conf2, self.joint_label, self.joint_conf]

    @classmethod
    def from_arrays(cls, arrs) -> "UnlabeledTargets":
        return cls(*arrs)

    def confident_fraction(self) -> float:
        return float(np.mean([self.conf1.mean(), self.conf2.mean()]))


def _bundles(passes: list[torch.Tensor]) -> list[uncertainty.PseudoLabelBundle]:
    stack = torch.stack(passes).squeeze(2).double().numpy()  # (K, B, H, W)
    out = []
    for i in range(stack.shape[1]):
        prob, unc = uncertainty.aggregate_mc(list(stack[:, i]))
        out.append(uncertainty.make_bundle(prob, unc))
    return out


def make_targets(state: TrainState, x_weak: torch.Tensor, seed: int) -> UnlabeledTargets:
    """Pseudo-labels from the weak view: filtered per network plus joint.

    Without epistemic uncertainty a single deterministic pass is used and
    every pixel counts as confident.
    """
    cfg = state.config
    if cfg.eu:
        p1 = mc_forward(state.net1, x_weak, cfg.k, seed=derive_seed(seed, 1))
        p2 = mc_forward(state.net2, x_weak, cfg.k, seed=derive_seed(seed, 2))
    else:
        with torch.no_grad():
            p1 = [torch.sigmoid(state.net1(x_weak))]
            p2 = [torch.sigmoid(state.net2(x_weak))]
    b1s, b2s = _bundles(p1), _bundles(p2)
    joints = [uncertainty.fuse_joint(a, b) for a, b in zip(b1s, b2s)]

    def stack(items, attr):
        return np.stack([getattr(x, attr) for x in items]).astype(np.float32)

    if cfg.eu:
        return UnlabeledTargets(
            stack(b1s, "filtered_label"), stack(b1s, "confidence"),
            stack(b2s, "filtered_label"), stack(b2s, "confidence"),
            stack(joints, "filtered_label"), stack(joints, "confidence"),
        )
    ones = np.ones_like(stack(b1s, "raw_label"))
    return UnlabeledTargets(
        stack(b1s, "raw_label"), ones, stack(b2s, "raw_label"), ones.copy(),
        stack(joints, "raw_label"), ones.copy(),
    )


def _t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).unsqueeze(1)


# --------------------------------------------------------------------------
# one optimisation step


def compute_losses(state: TrainState, labeled, unlabeled=None, step_seed: int = 0):
    """Loss graph for one step. Returns (total tensor, breakdown, targets)."""
    cfg = state.config
    x_l, y_l = labeled
    y_l = y_l.float().unsqueeze(1) if y_l.dim() == 3 else y_l.float()
    state.net1.train()
    state.net2.train()

    taps1 = tapped_forward(state.net1, x_l)
    taps2 = tapped_forward(state.net2, x_l)
    sup = losses.supervised_loss(taps1[2], y_l) + losses.supervised_loss(taps2[2], y_l)
    zero = sup.new_zeros(())
    two_nets = cfg.method in ("endo-semis", "cps")
    cross_l = losses.cross_loss_labeled(taps1[2], taps2[2]) if two_nets else zero
    mutual = zero
    if two_nets and (cfg.ml_d or cfg.ml_eb):
        mutual = losses.mutual_loss(taps1, taps2, encoder_bottleneck=cfg.ml_eb, decoder=cfg.ml_d)

    targets = None
    cross_u, strong_part = zero, zero
    if unlabeled is not None and cfg.uses_unlabeled and len(unlabeled[0]) > 0:
        x_w, x_s = unlabeled
        if not cfg.au:
            x_s = x_w
        targets = make_targets(state, x_w, step_seed)
        arrays = targets.arrays()
        if cfg.au:
            h, w = x_w.shape[-2:]
            plans = augment.sample_cutmix_plans(len(x_w), h, w, derive_seed(step_seed, 3), cfg.cutmix_p)
            x_w = augment.apply_cutmix(x_w, plans)
            x_s = augment.apply_cutmix(x_s, plans)
            arrays = [augment.apply_cutmix(a, plans) for a in arrays]
        l1, c1, l2, c2, lj, cj = (_t(a) for a in arrays)
        w1, w2 = state.net1(x_w), state.net2(x_w)
        if cfg.method == "generic":
            # each network learns from its own pseudo-labels
            cross_u = losses.masked_pseudo_loss(w1, l1, c1) + losses.masked_pseudo_loss(w2, l2, c2)
        else:
            cross_u = losses.masked_pseudo_loss(w1, l2, c2) + losses.masked_pseudo_loss(w2, l1, c1)
            if cfg.au or cfg.jps:
                s1, s2 = (state.net1(x_s), state.net2(x_s)) if cfg.au else (w1, w2)
                if cfg.jps:
                    strong_part = losses.masked_pseudo_loss(s1, lj, cj) + losses.masked_pseudo_loss(s2, lj, cj)
                else:
                    strong_part = losses.masked_pseudo_loss(s1, l2, c2) + losses.masked_pseudo_loss(s2, l1, c1)

    if cfg.method == "generic":
        # single-network pseudo-labelling: L = L_s + L_p for each network
        total = sup + cross_u
        s_val, u_val = sup.item(), cross_u.item()
        bd = losses.LossBreakdown(supervised=s_val, cross_unlabeled=u_val,
                                  total_labeled=s_val, total_unlabeled=u_val)
        if not math.isfinite(s_val + u_val):
            raise FloatingPointError("non-finite loss component: generic")
        return total, bd, targets
    total, bd = losses.compose_total(sup, cross_l, mutual, cross_u, strong_part)
    return total, bd, targets


def train_step(state: TrainState, labeled, unlabeled=None, step_seed: int | None = None):
    """One optimisation step of both networks. Returns the loss breakdown."""
    if step_seed is None:
        step_seed = derive_seed(state.config.seed, 10, state.step)
    lr = lr_at(state.step, state.total_steps, state.config)
    for opt in (state.opt1, state.opt2):
        for g in opt.param_groups:
            g["lr"] = lr
    total, breakdown, _ = compute_losses(state, labeled, unlabeled, step_seed)
    state.opt1.zero_grad(set_to_none=True)
    state.opt2.zero_grad(set_to_none=True)
    total.backward()
    # the two networks share no parameters, so each optimizer sees only its
    # own network's gradient of the summed objective
    state.opt1.step()
    state.opt2.step()
    state.step += 1
    return breakdown


# --------------------------------------------------------------------------
# batching


def _augment_labeled(images, masks, idx, seed):
    xs, ys = [], []
    for i in idx:
        img, m, _ = augment.weak_augment(images[i], masks[i], seed=derive_seed(seed, int(i)))
        xs.append(img)
        ys.append(m)
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys).astype(np.float32))


def _augment_unlabeled(images, idx, seed, strong: bool):
    ws, ss = [], []
    for i in idx:
        img, _, _ = augment.weak_augment(images[i], None, seed=derive_seed(seed, int(i)))
        ws.append(img)
        if strong:
            ss.append(augment.strong_augment(img, seed=derive_seed(seed, int(i), 7)))
    w = torch.from_numpy(np.stack(ws))
    return w, (torch.from_numpy(np.stack(ss)) if strong else w)


def epoch_batches(n_labeled: int, n_unlabeled: int, batch_size: int, seed: int, epoch: int,
                  n_steps: int | None = None):
    """Index batches for one epoch: unlabeled drives the length, labeled cycles.

    A fixed ``n_steps`` cycles whichever pools are non-empty.
    """
    rng = np.random.default_rng(derive_seed(seed, 20, epoch))
    u_len = n_unlabeled if n_steps is None else n_steps * batch_size
    if n_steps is None:
        n_steps = steps_per_epoch(n_labeled, n_unlabeled, batch_size)
    u_perm = _cycled(rng, n_unlabeled, u_len)
    l_perm = _cycled(rng, n_labeled, n_steps * batch_size + n_labeled)
    for s in range(n_steps):
        u_idx = u_perm[s * batch_size:(s + 1) * batch_size]
        l_idx = l_perm[s * batch_size:(s + 1) * batch_size]
        yield l_idx, u_idx


def _cycled(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, int)
    return np.concatenate([rng.permutation(n) for _ in range(math.ceil(length / n))])


def steps_per_epoch(n_labeled: int, n_unlabeled: int, batch_size: int) -> int:
    return math.ceil((n_unlabeled if n_unlabeled > 0 else n_labeled) / batch_size)


# --------------------------------------------------------------------------
# checkpoints


def save_net(net: UNet, path, kind: str = "segmentation", extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "arch": asdict(net.config),
        "state_dict": net.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }, path)
    return path


def load_net(path) -> UNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')}")
    net = UNet(NetConfig(**blob["arch"]))
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return net


def _save_state(state: TrainState, path: Path, history: list) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "total_steps": state.total_steps,
        "best_dice": list(state.best_dice),
        "net1": state.net1.state_dict(),
        "net2": state.net2.state_dict(),
        "opt1": state.opt1.state_dict(),
        "opt2": state.opt2.state_dict(),
        "history": history,
        "torch_rng": torch.get_rng_state(),
    }, path)


def _load_state(path: Path, config: TrainConfig) -> tuple[TrainState, list]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    state = init_state(config, blob["total_steps"])
    state.net1.load_state_dict(blob["net1"])
    state.net2.load_state_dict(blob["net2"])
    state.opt1.load_state_dict(blob["opt1"])
    state.opt2.load_state_dict(blob["opt2"])
    state.epoch, state.step = blob["epoch"], blob["step"]
    state.best_dice = list(blob["best_dice"])
    torch.set_rng_state(blob["torch_rng"])
    return state, blob["history"]


# --------------------------------------------------------------------------
# evaluation helpers


def predict_masks(net: UNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        prob = predict_prob(net, torch.from_numpy(images[i:i + batch_size]))
        out.append((prob[:, 0] >= 0.5).numpy().astype(np.uint8))
    if not out:
        return np.zeros((0,) + images.shape[-2:], np.uint8)
    return np.concatenate(out)


def dice_score(net: UNet, data: LabeledSet) -> float:
    from .metrics import mean_dice

    if len(data) == 0:
        return float("nan")
    return mean_dice(predict_masks(net, data.images), data.masks)


@dataclass
class FitResult:
    net1: UNet
    net2: UNet
    history: list
    state: TrainState


def fit(labeled: LabeledSet, unlabeled: UnlabeledSet | None, val: LabeledSet | None,
        config: TrainConfig, run_dir=None, resume: bool = False, log_every: int = 0) -> FitResult:
    """Train both networks; keep the best-validation-Dice weights of each."""
    n_l = len(labeled)
    if n_l == 0:
        raise ValueError("no labeled frames")
    u_images = unlabeled.images if (unlabeled is not None and config.uses_unlabeled) else np.zeros((0,))
    n_u = len(u_images)
    per_epoch = config.steps_per_epoch or steps_per_epoch(n_l, n_u, config.batch_size)
    total_steps = per_epoch * config.epochs
    run = Path(run_dir) if run_dir is not None else None
    history: list = []

    state = None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        last = run / "last.pt"
        if resume and last.exists():
            state, history = _load_state(last, config)
            log.info("resumed from %s at epoch %d", last, state.epoch)
        else:
            (run / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    if state is None:
        state = init_state(config, total_steps)
    best = [copy.deepcopy(state.net1.state_dict()), copy.deepcopy(state.net2.state_dict())]
    if run is not None:
        for i in (1, 2):
            p = run / f"net{i}_best.pt"
            if resume and p.exists():
                best[i - 1] = torch.load(p, map_location="cpu", weights_only=False)["state_dict"]

    probe = torch.from_numpy(u_images[: config.probe_size]) if n_u else None
    loss_log = (run / "loss_log.jsonl").open("a") if run is not None else None
    try:
        while state.epoch < config.epochs:
            epoch = state.epoch
            t0 = time.time()
            sums: dict[str, float] = {}
            n_steps = 0
            for l_idx, u_idx in epoch_batches(n_l, n_u, config.batch_size, config.seed, epoch, per_epoch):
                bseed = derive_seed(config.seed, 30, epoch, n_steps)
                lab = _augment_labeled(labeled.images, labeled.masks, l_idx, bseed)
                unl = _augment_unlabeled(u_images, u_idx, derive_seed(bseed, 1), config.au) if len(u_idx) else None
                try:
                    bd = train_step(state, lab, unl)
                except FloatingPointError as exc:
                    if run is not None and (run / "last.pt").exists():
                        state, history = _load_state(run / "last.pt", config)
                    raise TrainingDiverged(f"epoch {epoch} step {state.step}: {exc}; last good checkpoint kept") from exc
                for k, v in bd.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_steps += 1
                if loss_log is not None:
                    loss_log.write(json.dumps({"epoch": epoch, "step": state.step, **bd.to_dict()}) + "\n")
                if log_every and state.step % log_every == 0:
                    log.info("step %d loss %.4f", state.step, bd.total)
            row = {"epoch": epoch, "steps": n_steps, "lr": lr_at(state.step, state.total_steps, config)}
            row.update({f"loss_{k}": v / max(n_steps, 1) for k, v in sums.items()})
            if probe is not None and config.method != "supervised":
                row["probe_confident_fraction"] = make_targets(
                    state, probe, derive_seed(config.seed, 40)).confident_fraction()
            for i, net in enumerate((state.net1, state.net2)):
                d = dice_score(net, val) if val is not None and len(val) else float("nan")
                row[f"val_dice_net{i + 1}"] = d
                if math.isnan(d) or d > state.best_dice[i]:
                    state.best_dice[i] = d if not math.isnan(d) else state.best_dice[i]
                    best[i] = copy.deepcopy(net.state_dict())
                    if run is not None:
                        save_net(net, run / f"net{i + 1}_best.pt", extra={"epoch": epoch, "val_dice": d})
            row["seconds"] = time.time() - t0
            history.append(row)
            state.epoch += 1
            log.info("epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
            if run is not None:
                _write_history(history, run / "metrics.csv")
                _save_state(state, run / "last.pt", history)
                (run / "rng_state.json").write_text(json.dumps(
                    {"seed": config.seed, "epoch": state.epoch, "step": state.step}))
    finally:
        if loss_log is not None:
            loss_log.close()

    state.net1.load_state_dict(best[0])
    state.net2.load_state_dict(best[1])
    return FitResult(state.net1, state.net2, history, state)


def _write_history(history: list, path: Path) -> None:
    keys: list[str] = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


# --------------------------------------------------------------------------
# temporal correction model


@dataclass
class CorrectionConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_init: float = 1e-3
    lr_final: float = 1e-5
    weight_decay: float = 1e-4
    base_width: int = 16
    depth: int = 3
    norm: str = "instance"
    erode_p: float = 0.25
    dilate_p: float = 0.25
    zero_p: float = 0.25
    speckle_p: float = 0.25
    corrupt: bool = True
    seed: int = 0
    windows_per_epoch: int | None = None


def corrupt_mask(mask: np.ndarray, rng: np.random.Generator, cfg: CorrectionConfig, centre: bool) -> np.ndarray:
    """Random morphological corruption of one mask channel.

    Erosion and dilation use square elements of 3-7 px. The centre channel
    may also be zeroed, or receive a spurious blob in place of its content.
    """
    from scipy import ndimage

    m = mask.astype(bool)
    if rng.random() < cfg.erode_p:
        k = int(rng.integers(3, 8))
        m = ndimage.binary_erosion(m, np.ones((k, k), bool))
    if rng.random() < cfg.dilate_p:
        k = int(rng.integers(3, 8))
        m = ndimage.binary_dilation(m, np.ones((k, k), bool))
    if centre:
        u = rng.random()
        if u < cfg.zero_p:
            m = np.zeros_like(m)
        elif u < cfg.zero_p + cfg.speckle_p:
            m = speckle(m.shape, rng)
    return m.astype(np.float32)


def speckle(shape, rng: np.random.Generator) -> np.ndarray:
    """A small random blob, the typical spurious detection."""
    h, w = shape
    r = rng.uniform(1.5, max(2.0, min(h, w) / 12))
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def correction_windows(data: LabeledSet) -> list[tuple[np.ndarray, int]]:
    """(ordered indices of a clip, position) for every frame with a full
    two-sided neighbourhood."""
    out = []
    for _, ix in sequences(data.records).items():
        frames = [data.records[i].frame_index for i in ix]
        # contiguous runs only
        runs, cur = [], [ix[0]]
        for prev, (i, f) in zip(frames, list(zip(ix, frames))[1:]):
            if f == prev + 1:
                cur.append(i)
            else:
                runs.append(cur)
                cur = [i]
        runs.append(cur)
        for run in runs:
            if len(run) >= 5:
                arr = np.asarray(run)
                out.extend((arr, n) for n in range(2, len(run) - 2))
    return out


def fit_correction(data: LabeledSet, config: CorrectionConfig, run_dir=None) -> tuple[UNet, list]:
    """Train the temporal correction network on labeled clips."""
    windows = correction_windows(data)
    if not windows:
        raise ValueError("no clip has 5 consecutive labeled frames")
    c_img = data.images.shape[1]
    net = build_correction_net(NetConfig(c_img, config.base_width, config.depth, 0.0, config.norm),
                                     c_img, seed=derive_seed(config.seed, 50))
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr_init, weight_decay=config.weight_decay)
    per_epoch = config.windows_per_epoch or len(windows)
    steps_epoch = math.ceil(per_epoch / config.batch_size)
    total = steps_epoch * config.epochs
    history = []
    step = 0
    net.train()
    for epoch in range(config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, 51, epoch))
        order = rng.permutation(len(windows))
        if per_epoch > len(windows):
            order = np.concatenate([order, rng.integers(0, len(windows), per_epoch - len(windows))])
        order = order[:per_epoch]
        epoch_loss = 0.0
        for s in range(steps_epoch):
            chosen = order[s * config.batch_size:(s + 1) * config.batch_size]
            xs, ys = [], []
            for w in chosen:
                clip, n = windows[w]
                imgs = data.images[clip]
                masks = data.masks[clip].astype(np.float32)
                ix = list(range(n - 2, n + 3))
                if config.corrupt:
                    in_masks = np.stack([corrupt_mask(masks[i], rng, config, centre=(i == n)) for i in ix])
                else:
                    in_masks = masks[ix]
                frames = np.concatenate([imgs[i] for i in ix], axis=0)
                xs.append(np.concatenate([frames, in_masks], axis=0))
                ys.append(masks[ix])
            x = torch.from_numpy(np.stack(xs).astype(np.float32))
            y = torch.from_numpy(np.stack(ys))
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, config)
            loss = losses.st_loss(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"correction training diverged at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            epoch_loss += loss.item()
        history.append({"epoch": epoch, "loss": epoch_loss / steps_epoch})
        log.info("correction epoch %d loss %.4f", epoch, history[-1]["loss"])
    net.eval()
    if run_dir is not None:
        save_net(net, Path(run_dir) / "stnet_best.pt", kind="correction",
                 extra={"image_channels": c_img, "history": history})
    return net, history
