"""Adversarial training for both stages and the single-input pix2pix baselines.

Stage 1 fits G_A: colorized → screentone against D_A(x, y).
Stage 2 fits G_B: (screentone, flat) → colorized against D_B(y, z, x), with an
extra cycle term that pushes G_B's output back through the frozen G_A and
compares the result with the real screentone.

Each step makes one discriminator update followed by one generator update.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .dataset import ImageTriplet, TensorTriplet, collate, preprocess
from .errors import ConfigError, DimensionMismatch, EmptyDataset, MissingCheckpoint, NonFiniteLoss
from .networks import (
    PatchDiscriminator,
    UNetGenerator,
    build_discriminator,
    build_generator_A,
    build_generator_B,
    init_weights,
    parameter_digest,
)

log = logging.getLogger(__name__)

EPS = 1e-7
HISTORY_COLUMNS = ("step", "gan_g", "gan_d", "l1_direct", "l1_cycle", "total_g")
BASELINES = ("tone_only", "flat_only")


@dataclass
class TrainConfig:
    lambda1: float = 100.0
    lambda2: float = 50.0
    lambda3: float = 50.0
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 1
    crop: int = 256
    working_size: tuple[int, int] = (256, 256)
    seed: int = 0
    adam_betas: tuple[float, float] = (0.5, 0.999)
    # network size knobs; 64 / 7 are the full-size networks
    width: int = 64
    depth: int = 7

    def __post_init__(self):
        self.working_size = tuple(int(v) for v in self.working_size)
        self.adam_betas = tuple(float(v) for v in self.adam_betas)
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("lambda1..lambda3 must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.width < 1 or not 1 <= self.depth <= 7:
            raise ConfigError("width must be positive and depth in 1..7")
        if self.crop % (2 ** self.depth):
            raise ConfigError(f"crop {self.crop} must be a multiple of 2**depth = {2 ** self.depth}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LossReport:
    gan_g: float
    gan_d: float
    l1_direct: float
    l1_cycle: float
    total_g: float
    step: int = 0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in HISTORY_COLUMNS}


class Optimizers(NamedTuple):
    g: torch.optim.Optimizer
    d: torch.optim.Optimizer


def make_optimizers(g: nn.Module, d: nn.Module, config: TrainConfig) -> Optimizers:
    return Optimizers(
        torch.optim.Adam(g.parameters(), lr=config.lr, betas=config.adam_betas),
        torch.optim.Adam(d.parameters(), lr=config.lr, betas=config.adam_betas),
    )


def loss_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise DimensionMismatch(f"L1 operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_gan_d(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-mean log D(real) - mean log(1 - D(fake)), probabilities clamped to [eps, 1-eps]."""
    d_real = d_real.clamp(EPS, 1 - EPS)
    d_fake = d_fake.clamp(EPS, 1 - EPS)
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def loss_gan_g(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -mean log D(fake)."""
    return -torch.log(d_fake.clamp(EPS, 1 - EPS)).mean()


def _check_finite(step: int, **terms):
    values = {k: float(v.detach()) for k, v in terms.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLoss(f"non-finite loss at step {step} in {bad}; all terms: {values}")


def _adversarial_step(condition, target, generate, d, opts, l1_weight, cycle=None, step=0) -> LossReport:
    """Shared D-then-G update.

    ``condition`` is the tuple of conditioning images fed to the discriminator
    ahead of the real/fake image; ``cycle`` is an optional ``(weight, fn)``
    where ``fn(fake)`` returns the cycle L1 term.
    """
    fake = generate()

    opts.d.zero_grad(set_to_none=True)
    gan_d = loss_gan_d(d(*condition, target), d(*condition, fake.detach()))
    _check_finite(step, gan_d=gan_d)
    gan_d.backward()
    opts.d.step()

    for p in d.parameters():
        p.requires_grad_(False)
    try:
        opts.g.zero_grad(set_to_none=True)
        gan_g = loss_gan_g(d(*condition, fake))
        l1_direct = loss_l1(fake, target)
        total = gan_g + l1_weight * l1_direct
        l1_cycle = torch.zeros(())
        if cycle is not None:
            weight, fn = cycle
            l1_cycle = fn(fake)
            total = total + weight * l1_cycle
        _check_finite(step, gan_g=gan_g, l1_direct=l1_direct, l1_cycle=l1_cycle, total_g=total)
        total.backward()
        opts.g.step()
    finally:
        for p in d.parameters():
            p.requires_grad_(True)

    return LossReport(gan_g.item(), gan_d.item(), l1_direct.item(), l1_cycle.item(), total.item(), step)


def stage1_step(batch: TensorTriplet, gA, dA, opts: Optimizers, config: TrainConfig, step=0) -> LossReport:
    x, y = batch.colorized, batch.screentone
    return _adversarial_step((x,), y, lambda: gA(x), dA, opts, config.lambda1, step=step)


def stage2_step(batch: TensorTriplet, gB, dB, gA_frozen, opts: Optimizers, config: TrainConfig, step=0) -> LossReport:
    """D_B sees y ⊕ z ⊕ (x or G_B(y, z)); G_B additionally pays λ2·|G_A(G_B(y, z)) − y|₁."""
    x, y, z = batch.colorized, batch.screentone, batch.flat
    cycle = None
    if config.lambda2 > 0:
        if gA_frozen is None:
            raise MissingCheckpoint("stage 2 with lambda2 > 0 needs the frozen stage-1 generator G_A")
        cycle = (config.lambda2, lambda fake: loss_l1(gA_frozen(fake), y))
    return _adversarial_step((y, z), x, lambda: gB(y, z), dB, opts, config.lambda3, cycle=cycle, step=step)


def freeze(net: nn.Module) -> nn.Module:
    """Inference mode with no parameter gradients; BatchNorm running stats stop updating."""
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def build_baseline(kind: str, config: TrainConfig | None = None):
    """Single-stream pix2pix colorizer fed only the screentone or only the flat image.

    Returns ``(generator, step)`` where ``step(batch, g, d, opts, config)``
    performs one stage-1-shaped update with the colorized page as target.
    """
    if kind not in BASELINES:
        raise ValueError(f"baseline kind must be one of {BASELINES}, got {kind!r}")
    config = config or TrainConfig()
    in_ch = 1 if kind == "tone_only" else 3
    g = UNetGenerator(in_ch, 3, config.width, config.depth, role=f"P2P_{kind}")

    def step(batch: TensorTriplet, g, d, opts: Optimizers, config: TrainConfig, step=0) -> LossReport:
        source = batch.screentone if kind == "tone_only" else batch.flat
        return _adversarial_step((source,), batch.colorized, lambda: g(source), d, opts, config.lambda1, step=step)

    return g, step


def _baseline_discriminator(kind: str, config: TrainConfig) -> PatchDiscriminator:
    d = build_discriminator(4 if kind == "tone_only" else 6, config.width)
    d.role = f"D_{kind}"
    return d


@dataclass
class TrainResult:
    networks: dict[str, nn.Module]
    checkpoints: dict[str, ckpt.Checkpoint]
    history: list[LossReport]
    initial_digests: dict[str, str]
    used_stage1: bool = False
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def generator(self) -> nn.Module:
        return next(n for r, n in self.networks.items() if not r.startswith("D_"))


def batches(data: Sequence[ImageTriplet], config: TrainConfig, epoch: int):
    """Yield collated batches for one epoch: fresh shuffle and fresh crops, all seeded."""
    order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
    for start in range(0, len(order), config.batch_size):
        items = []
        for idx in order[start:start + config.batch_size]:
            rng = np.random.default_rng([config.seed, epoch, int(idx)])
            items.append(preprocess(data[idx], config.working_size, config.crop, rng))
        yield collate(items)


def train(stage, config: TrainConfig, data: Sequence[ImageTriplet], stage1=None, out_dir=None,
          log_every: int = 0, stop_when: Callable[[LossReport], bool] | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Train stage ``1`` or ``2`` (or a baseline: ``"tone_only"`` / ``"flat_only"``).

    ``stage1`` is the trained G_A (module, checkpoint or path); it is only
    required, and only loaded, for stage 2 with ``lambda2 > 0``.
    ``stop_when``/``max_steps`` end the run early (used for overfit probes).
    With ``out_dir`` set, checkpoints and ``history.csv`` are written there.
    """
    data = list(data)
    if not data:
        raise EmptyDataset("no training triplets")

    torch.manual_seed(config.seed)
    gA_frozen = None
    if stage == 1:
        g, d = build_generator_A(config.width, config.depth), build_discriminator(4, config.width)
        step_fn = lambda batch, i: stage1_step(batch, g, d, opts, config, step=i)
    elif stage == 2:
        if config.lambda2 > 0:
            if stage1 is None:
                raise MissingCheckpoint("stage 2 requires a stage-1 checkpoint (G_A); none was given")
            gA_frozen = freeze(ckpt.load_network(stage1, role="G_A"))
        g, d = build_generator_B(config.width, config.depth), build_discriminator(7, config.width)
        step_fn = lambda batch, i: stage2_step(batch, g, d, gA_frozen, opts, config, step=i)
    elif stage in BASELINES:
        g, base_step = build_baseline(stage, config)
        d = _baseline_discriminator(stage, config)
        step_fn = lambda batch, i: base_step(batch, g, d, opts, config, step=i)
    else:
        raise ValueError(f"unknown stage {stage!r}")

    init_weights(g, config.seed)
    init_weights(d, config.seed + 1)
    g.train()
    d.train()
    opts = make_optimizers(g, d, config)
    initial = {g.role: parameter_digest(g), d.role: parameter_digest(d)}

    history: list[LossReport] = []
    i = 0
    done = False
    for epoch in range(config.epochs):
        for batch in batches(data, config, epoch):
            report = step_fn(batch, i)
            history.append(report)
            i += 1
            if log_every and i % log_every == 0:
                log.info("stage %s step %d: %s", stage, i, report)
            if (stop_when is not None and stop_when(report)) or (max_steps is not None and i >= max_steps):
                done = True
                break
        if done:
            break

    digest = config.digest()
    checkpoints = {
        g.role: ckpt.capture(g, opts.g, step=i, config_digest=digest),
        d.role: ckpt.capture(d, opts.d, step=i, config_digest=digest),
    }
    result = TrainResult({g.role: g, d.role: d}, checkpoints, history, initial, used_stage1=gA_frozen is not None)
    if out_dir is not None:
        out = Path(out_dir)
        for role, c in checkpoints.items():
            result.paths[role] = ckpt.save_checkpoint(c, out / f"{role}.ckpt")
        result.paths["history"] = save_history(history, out / "history.csv")
    return result


def save_history(history: Sequence[LossReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for r in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return path


def load_history(path) -> list[LossReport]:
    with Path(path).open(newline="") as f:
        return [LossReport(**{k: (int(v) if k == "step" else float(v)) for k, v in row.items()})
                for row in csv.DictReader(f)]


CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}
