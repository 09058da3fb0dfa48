"""Generators and discriminators.

Layer naming follows the pix2pix shorthand: ``C<k>`` is
Convolution-BatchNorm-ReLU with ``k`` filters and ``CD<k>`` adds dropout 0.5
between the norm and the activation. Encoder convolutions are 4×4 stride 2,
decoder layers 4×4 stride-2 transposed convolutions, so each encoder level
halves the resolution and each decoder level doubles it.

``width`` scales every filter count (64 gives the full-size networks);
``depth`` truncates the encoder to its first levels (and the decoder to its
last), which the miniature networks used in gradient checks rely on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn

ENCODER = ("C64", "C128", "C256", "C512", "C512", "C512", "C512")
DECODER = ("CD512", "CD512", "CD512", "CD512", "CD256", "CD128", "CD64")
DISCRIMINATOR = ("C64", "C128", "C128")
DISCRIMINATOR_CHANNELS = (4, 6, 7)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "C" or "CD"
    filters: int
    normalized: bool
    activation: str  # "leaky", "relu", "tanh", "sigmoid"

    @property
    def dropout(self) -> float:
        return 0.5 if self.kind == "CD" else 0.0


def _parse(code: str, width: int) -> tuple[str, int]:
    kind = code.rstrip("0123456789")
    return kind, int(code[len(kind):]) * width // 64


def encoder_specs(width: int = 64, depth: int = 7) -> list[LayerSpec]:
    specs = []
    for i, code in enumerate(ENCODER[:depth]):
        kind, k = _parse(code, width)
        # first layer: no norm; innermost layer sees a 1×1 map at the smallest input, so no norm either
        specs.append(LayerSpec(kind, k, 0 < i < depth - 1, "leaky"))
    return specs


def decoder_specs(width: int = 64, depth: int = 7) -> list[LayerSpec]:
    return [LayerSpec(*_parse(code, width), True, "relu") for code in DECODER[len(DECODER) - depth:]]


def discriminator_specs(width: int = 64) -> list[LayerSpec]:
    return [LayerSpec(*_parse(code, width), i > 0, "leaky") for i, code in enumerate(DISCRIMINATOR)]


def _block(spec: LayerSpec, in_ch: int, *, transpose=False, stride=2) -> nn.Sequential:
    conv = nn.ConvTranspose2d if transpose else nn.Conv2d
    layers = [conv(in_ch, spec.filters, 4, stride, 1)]
    if spec.normalized:
        layers.append(nn.BatchNorm2d(spec.filters))
    if spec.dropout:
        layers.append(nn.Dropout(spec.dropout))
    layers.append(nn.LeakyReLU(0.2) if spec.activation == "leaky" else nn.ReLU())
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, width: int = 64, depth: int = 7):
        super().__init__()
        self.in_channels = in_channels
        self.levels = nn.ModuleList()
        ch = in_channels
        for spec in encoder_specs(width, depth):
            self.levels.append(_block(spec, ch))
            ch = spec.filters
        self.out_channels = ch

    @property
    def skip_channels(self) -> list[int]:
        return [lvl[0].out_channels for lvl in self.levels]

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"encoder expects {self.in_channels} input channels, got {x.shape[1]}")
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Upsamples the bottleneck back to input resolution, concatenating skips on the way.

    ``skip_channels`` lists, per encoder level from shallow to deep, the total
    channels of the features concatenated at that resolution (summed over
    streams for the two-stream generator). The bottleneck itself is not a skip.
    """

    def __init__(self, bottleneck_channels: int, skip_channels, out_channels: int, width: int = 64, depth: int = 7):
        super().__init__()
        self.levels = nn.ModuleList()
        skips = list(skip_channels[:-1])[::-1] + [0]
        ch = bottleneck_channels
        for spec, skip in zip(decoder_specs(width, depth), skips):
            self.levels.append(_block(spec, ch, transpose=True))
            ch = spec.filters + skip
        self.final = nn.Conv2d(ch, out_channels, 3, 1, 1)

    def forward(self, bottleneck, skips):
        x = bottleneck
        skips = list(skips)
        for level in self.levels:
            x = level(x)
            if skips:
                x = torch.cat([x, skips.pop()], dim=1)
        return torch.tanh(self.final(x))


class UNetGenerator(nn.Module):
    """Single-stream U-Net: G_A (colorized → screentone) and the pix2pix baselines."""

    def __init__(self, in_channels=3, out_channels=1, width=64, depth=7, role="G_A"):
        super().__init__()
        self.role = role
        self.in_channels, self.out_channels = in_channels, out_channels
        self.width, self.depth = width, depth
        self.encoder = Encoder(in_channels, width, depth)
        self.decoder = Decoder(self.encoder.out_channels, self.encoder.skip_channels, out_channels, width, depth)

    @property
    def arch(self) -> dict:
        return {"kind": "unet", "in_channels": self.in_channels, "out_channels": self.out_channels,
                "width": self.width, "depth": self.depth}

    def forward(self, x):
        feats = self.encoder(x)
        return self.decoder(feats[-1], feats[:-1])


class TwoStreamGenerator(nn.Module):
    """G_B: separate encoders for screentone (1 ch) and flat color (3 ch).

    Bottleneck features of both streams are concatenated and fused by a 3×3
    convolution back to one stream's width. Every decoder level receives the
    matching-resolution features of both encoders.
    """

    def __init__(self, tone_channels=1, flat_channels=3, out_channels=3, width=64, depth=7, role="G_B"):
        super().__init__()
        self.role = role
        self.in_channels = (tone_channels, flat_channels)
        self.out_channels = out_channels
        self.width, self.depth = width, depth
        self.tone_encoder = Encoder(tone_channels, width, depth)
        self.flat_encoder = Encoder(flat_channels, width, depth)
        bottleneck = self.tone_encoder.out_channels
        self.fuse = nn.Sequential(nn.Conv2d(2 * bottleneck, bottleneck, 3, 1, 1), nn.LeakyReLU(0.2))
        skips = [a + b for a, b in zip(self.tone_encoder.skip_channels, self.flat_encoder.skip_channels)]
        self.decoder = Decoder(bottleneck, skips, out_channels, width, depth)

    @property
    def arch(self) -> dict:
        return {"kind": "two_stream", "in_channels": list(self.in_channels), "out_channels": self.out_channels,
                "width": self.width, "depth": self.depth}

    def forward(self, tone, flat):
        tf = self.tone_encoder(tone)
        ff = self.flat_encoder(flat)
        fused = self.fuse(torch.cat([tf[-1], ff[-1]], dim=1))
        skips = [torch.cat([a, b], dim=1) for a, b in zip(tf[:-1], ff[:-1])]
        return self.decoder(fused, skips)


class PatchDiscriminator(nn.Module):
    """C64-C128-C128 then a 1-channel 4×4 convolution and a sigmoid.

    The first two blocks use stride 2, the third stride 1, so a 256² input
    yields a 62×62 probability map and a 128² input a 30×30 map.
    """

    def __init__(self, in_channels: int, width=64, role=None):
        super().__init__()
        if in_channels not in DISCRIMINATOR_CHANNELS:
            raise ValueError(f"discriminator in_channels must be one of {DISCRIMINATOR_CHANNELS}, got {in_channels}")
        self.role = role or {4: "D_A", 6: "D_flat", 7: "D_B"}[in_channels]
        self.in_channels, self.out_channels, self.width = in_channels, 1, width
        layers, ch = [], in_channels
        for i, spec in enumerate(discriminator_specs(width)):
            layers.append(_block(spec, ch, stride=2 if i < 2 else 1))
            ch = spec.filters
        layers.append(nn.Conv2d(ch, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    @property
    def arch(self) -> dict:
        return {"kind": "patch", "in_channels": self.in_channels, "width": self.width}

    def forward(self, *images):
        x = torch.cat(images, dim=1) if len(images) > 1 else images[0]
        return torch.sigmoid(self.model(x))


def discriminator_output_size(n: int) -> int:
    for stride in (2, 2, 1, 1):
        n = (n + 2 - 4) // stride + 1
    return n


def build_generator_A(width=64, depth=7) -> UNetGenerator:
    return UNetGenerator(3, 1, width, depth, role="G_A")


def build_generator_B(width=64, depth=7) -> TwoStreamGenerator:
    return TwoStreamGenerator(1, 3, 3, width, depth, role="G_B")


def build_discriminator(in_channels: int, width=64) -> PatchDiscriminator:
    return PatchDiscriminator(in_channels, width)


def build_from_arch(arch: dict, role: str) -> nn.Module:
    kind = arch["kind"]
    if kind == "unet":
        return UNetGenerator(arch["in_channels"], arch["out_channels"], arch["width"], arch["depth"], role=role)
    if kind == "two_stream":
        tone, flat = arch["in_channels"]
        return TwoStreamGenerator(tone, flat, arch["out_channels"], arch["width"], arch["depth"], role=role)
    if kind == "patch":
        return PatchDiscriminator(arch["in_channels"], arch["width"], role=role)
    raise ValueError(f"unknown architecture kind {kind!r}")


def init_weights(net: nn.Module, seed: int) -> nn.Module:
    """N(0, 0.02) convolution weights, zero biases, unit/zero norm affine; deterministic per seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, module in sorted(net.named_modules(), key=lambda kv: kv[0]):
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                module.weight.normal_(0.0, 0.02, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.reset_running_stats()
    return net


def parameter_digest(net: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order, at the bit level."""
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
