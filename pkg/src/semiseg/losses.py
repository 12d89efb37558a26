"""Loss terms for cross-supervised training and temporal correction.

Conventions: logits are (B, 1, H, W) or (B, H, W) tensors; targets and
confidence masks are broadcast-compatible float or integer tensors.
Pseudo-label targets are always detached here, whatever the caller passes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

MUTUAL_WEIGHTS = {"ssim": 1.0, "kl": 0.5, "mse": 2.0}
UNLABELED_WEIGHT = 0.5
LABELED_CROSS_WEIGHT = 0.5
MUTUAL_WEIGHT = 0.5
ST_NEAR_WEIGHT = 0.25
ST_FAR_WEIGHT = 0.1


def _match(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    target = target.to(logits.dtype)
    if target.shape != logits.shape:
        if target.numel() != logits.numel():
            raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
        target = target.reshape(logits.shape)
    return target.detach()


def supervised_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy over all pixels."""
    return F.binary_cross_entropy_with_logits(logits, _match(logits, target))


def masked_pseudo_loss(logits: torch.Tensor, filtered_label: torch.Tensor,
                       confidence: torch.Tensor) -> torch.Tensor:
    """BCE over confident pixels only, averaged over the confident count.

    Non-confident pixels are excluded (not relabelled as background); with no
    confident pixel the loss is an exact zero that still carries a graph.
    """
    target = _match(logits, filtered_label)
    conf = _match(logits, confidence)
    per_pixel = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    per_pixel = torch.where(conf > 0, per_pixel, torch.zeros_like(per_pixel))
    count = conf.sum()
    if count == 0:
        return per_pixel.sum() * 0.0
    return per_pixel.sum() / count


def hard_label(logits: torch.Tensor) -> torch.Tensor:
    """Binarised sigmoid prediction (p >= 0.5), gradient-free."""
    return (logits.detach() >= 0).to(logits.dtype)


def cross_loss_labeled(logits1: torch.Tensor, logits2: torch.Tensor) -> torch.Tensor:
    """Each network supervised by the other's raw binarised prediction."""
    return supervised_loss(logits1, hard_label(logits2)) + supervised_loss(logits2, hard_label(logits1))


def cross_loss_unlabeled(weak1, weak2, strong1, strong2, b1, b2, joint):
    """Uncertainty-guided cross terms plus joint pseudo-label terms.

    ``b1``, ``b2`` and ``joint`` are (filtered_label, confidence) pairs of
    tensors. Returns (cross, joint) so callers can log them separately; the
    joint part is ``None`` when no strong-view outputs are given.
    """
    cross = masked_pseudo_loss(weak1, *b2) + masked_pseudo_loss(weak2, *b1)
    if strong1 is None:
        return cross, None
    joint_part = masked_pseudo_loss(strong1, *joint) + masked_pseudo_loss(strong2, *joint)
    return cross, joint_part


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5,
         c1: float = 0.01**2, c2: float = 0.03**2) -> torch.Tensor:
    """Mean SSIM over batch, channels and pixels (Gaussian window, zero padding)."""
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    ch = a.shape[1]
    win = _gaussian_window(window_size, sigma, a.dtype, a.device).expand(ch, 1, window_size, window_size)
    pad = window_size // 2

    def filt(x):
        return F.conv2d(x, win, padding=pad, groups=ch)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def kl_channel(f_p: torch.Tensor, f_q: torch.Tensor) -> torch.Tensor:
    """KL(softmax(f_p) || softmax(f_q)) over channels, averaged over batch and positions."""
    logp = F.log_softmax(f_p, dim=1)
    logq = F.log_softmax(f_q, dim=1)
    return (logp.exp() * (logp - logq)).sum(dim=1).mean()


def mutual_terms(taps1, taps2) -> dict[str, torch.Tensor]:
    for t1, t2 in zip(taps1, taps2):
        if t1.shape != t2.shape:
            raise ValueError(f"tap shape mismatch {tuple(t1.shape)} vs {tuple(t2.shape)}")
    e1, b1, l1 = taps1
    e2, b2, l2 = taps2
    return {
        "ssim": 1.0 - ssim(e1, e2),
        "kl": kl_channel(b1, b2) + kl_channel(b2, b1),
        "mse": F.mse_loss(l1, l2),
    }


def mutual_loss(taps1, taps2, encoder_bottleneck: bool = True, decoder: bool = True) -> torch.Tensor:
    """(1 - SSIM) on first-encoder features + 0.5 * symmetric KL on
    bottleneck channel distributions + 2 * MSE on logits.

    The two flags drop the encoder/bottleneck pair or the logit term.
    """
    terms = mutual_terms(taps1, taps2)
    total = taps1[2].new_zeros(())
    if encoder_bottleneck:
        total = total + MUTUAL_WEIGHTS["ssim"] * terms["ssim"] + MUTUAL_WEIGHTS["kl"] * terms["kl"]
    if decoder:
        total = total + MUTUAL_WEIGHTS["mse"] * terms["mse"]
    return total


def st_loss(pred_logits: torch.Tensor, window_targets: torch.Tensor) -> torch.Tensor:
    """Temporal correction loss.

    ``window_targets`` is (B, 5, H, W) ordered n-2 .. n+2. BCE against the
    centre mask, plus MSE of the predicted probability to the neighbours,
    weighted 0.25 for n±1 and 0.1 for n±2.
    """
    if window_targets.dim() != 4 or window_targets.shape[1] < 5:
        raise ValueError("window_targets must be (B, 5, H, W)")
    y = window_targets.to(pred_logits.dtype).detach()
    logits = pred_logits.reshape(y.shape[0], *y.shape[2:])
    prob = torch.sigmoid(logits)
    loss = F.binary_cross_entropy_with_logits(logits, y[:, 2])
    loss = loss + ST_NEAR_WEIGHT * (F.mse_loss(prob, y[:, 1]) + F.mse_loss(prob, y[:, 3]))
    loss = loss + ST_FAR_WEIGHT * (F.mse_loss(prob, y[:, 0]) + F.mse_loss(prob, y[:, 4]))
    return loss


@dataclass
class LossBreakdown:
    supervised: float = 0.0
    cross_labeled: float = 0.0
    cross_unlabeled: float = 0.0
    joint: float = 0.0
    mutual: float = 0.0
    total_labeled: float = 0.0
    total_unlabeled: float = 0.0

    @property
    def total(self) -> float:
        return self.total_labeled + self.total_unlabeled

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def _value(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def compose_total(supervised, cross_labeled=0.0, mutual=0.0, cross_unlabeled=0.0, joint=0.0):
    """Weighted objective: labeled = s + 0.5 cross + 0.5 mutual;
    unlabeled = 0.5 (cross + joint).

    Accepts tensors or floats. Returns (total, LossBreakdown); ``total``
    keeps the autograd graph when tensors are given.
    """
    parts = {
        "supervised": supervised,
        "cross_labeled": cross_labeled,
        "mutual": mutual,
        "cross_unlabeled": cross_unlabeled,
        "joint": joint,
    }
    for name, v in parts.items():
        if not math.isfinite(_value(v)):
            raise FloatingPointError(f"non-finite loss component: {name}")
    total_l = supervised + LABELED_CROSS_WEIGHT * cross_labeled + MUTUAL_WEIGHT * mutual
    total_u = UNLABELED_WEIGHT * (cross_unlabeled + joint)
    breakdown = LossBreakdown(
        supervised=_value(supervised),
        cross_labeled=_value(cross_labeled),
        cross_unlabeled=_value(cross_unlabeled),
        joint=_value(joint),
        mutual=_value(mutual),
        total_labeled=_value(total_l),
        total_unlabeled=_value(total_u),
    )
    return total_l + total_u, breakdown
