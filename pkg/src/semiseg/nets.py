"""U-Net segmentation networks with Monte-Carlo dropout and feature taps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NetConfig:
    in_channels: int = 3
    base_width: int = 32
    depth: int = 4
    dropout_rate: float = 0.5
    norm: str = "instance"

    def validate(self) -> None:
        if self.in_channels < 1 or self.base_width < 1 or self.depth < 1:
            raise ValueError(f"invalid network config: {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.norm not in ("instance", "batch"):
            raise ValueError(f"norm must be 'instance' or 'batch', got {self.norm!r}")


class MCDropout(nn.Module):
    """Dropout switched by its own ``active`` flag rather than ``train()``.

    Keeps normalisation mode and dropout independent: pseudo-label passes
    turn dropout on without touching norm statistics.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.active = False

    def forward(self, x):
        if not self.active or self.p == 0.0:
            return x
        return F.dropout(x, self.p, training=True)


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    return nn.InstanceNorm2d(ch, affine=True)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, norm, dropout: float | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(norm, cout)
        # decoder blocks get dropout after each convolution
        self.drop1 = MCDropout(dropout) if dropout is not None else nn.Identity()
        self.drop2 = MCDropout(dropout) if dropout is not None else nn.Identity()

    def forward(self, x):
        x = self.drop1(F.leaky_relu(self.norm1(self.conv1(x)), 0.01))
        x = self.drop2(F.leaky_relu(self.norm2(self.conv2(x)), 0.01))
        return x


class UNet(nn.Module):
    """Plain U-Net exposing first-encoder, bottleneck and logit taps."""

    def __init__(self, config: NetConfig, out_channels: int = 1):
        super().__init__()
        config.validate()
        self.config = config
        w = config.base_width
        widths = [w * 2**i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for cout in widths[:-1]:
            self.encoders.append(ConvBlock(cin, cout, config.norm))
            cin = cout
        self.bottleneck = ConvBlock(widths[-2], widths[-1], config.norm)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(config.depth, 0, -1):
            self.ups.append(nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2))
            self.decoders.append(ConvBlock(widths[i - 1] * 2, widths[i - 1], config.norm, config.dropout_rate))
        self.head = nn.Conv2d(w, out_channels, 1)

    def encode(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return skips, self.bottleneck(x)

    def decode(self, skips, bottleneck):
        x = bottleneck
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def tapped(self, x):
        skips, bottleneck = self.encode(x)
        return skips[0], bottleneck, self.decode(skips, bottleneck)

    def forward(self, x):
        return self.tapped(x)[2]

    def set_mc_dropout(self, active: bool) -> None:
        for m in self.modules():
            if isinstance(m, MCDropout):
                m.active = active


def build_net(config: NetConfig, seed: int, in_channels: int | None = None) -> UNet:
    cfg = NetConfig(**{**asdict(config), **({"in_channels": in_channels} if in_channels else {})})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


def build_pair(config: NetConfig, seed: int = 0, seed2: int | None = None) -> tuple[UNet, UNet]:
    """Two structurally identical networks with independent initialisation.

    ``seed2`` defaults to a seed distinct from ``seed``.
    """
    config.validate()
    if seed2 is None:
        seed2 = seed + 1_000_003
    return build_net(config, seed), build_net(config, seed2)


def correction_in_channels(image_channels: int, window: int = 5) -> int:
    return window * image_channels + window


def build_correction_net(config: NetConfig, image_channels: int, seed: int = 0) -> UNet:
    """Temporal correction model: same body, input = 5 frames + 5 masks."""
    cfg = NetConfig(**{**asdict(config), "dropout_rate": 0.0})
    return build_net(cfg, seed, in_channels=correction_in_channels(image_channels))


def tapped_forward(net: UNet, image: torch.Tensor, dropout: bool = False):
    """(first encoder features, bottleneck features, logits)."""
    net.set_mc_dropout(dropout)
    try:
        return net.tapped(image)
    finally:
        net.set_mc_dropout(False)


@torch.no_grad()
def mc_forward(net: UNet, image: torch.Tensor, k: int, seed: int | None = None) -> list[torch.Tensor]:
    """K stochastic sigmoid maps with dropout active, reproducible from seed.

    Dropout only sits in the decoder, so the encoder runs once and is
    shared by all K passes.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    net.set_mc_dropout(True)
    try:
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            skips, bottleneck = net.encode(image)
            return [torch.sigmoid(net.decode(skips, bottleneck)) for _ in range(k)]
    finally:
        net.set_mc_dropout(False)


def predict_prob(net: UNet, image: torch.Tensor) -> torch.Tensor:
    """Deterministic probability map (dropout off, eval-mode norms)."""
    was_training = net.training
    net.eval()
    net.set_mc_dropout(False)
    with torch.no_grad():
        out = torch.sigmoid(net(image))
    net.train(was_training)
    return out
