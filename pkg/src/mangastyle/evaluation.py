"""PSNR reports, full-page inference and the cycle-term ablation."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import checkpoint as ckpt
from .dataset import ImageTriplet, denormalize, normalize
from .errors import DimensionMismatch, EmptyDataset
from .training import TrainConfig, train

PSNR_CAP = 99.0
SUMMARY_IDS = ("__avg__", "__max__", "__min__")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two 8-bit images, MAX = 255; identical images give 99 dB."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"PSNR operands differ in shape: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


@dataclass
class EvalReport:
    model_name: str
    per_image_psnr: list[tuple[str, float]]
    avg: float = field(init=False)
    max: float = field(init=False)
    min: float = field(init=False)

    def __post_init__(self):
        if not self.per_image_psnr:
            raise EmptyDataset(f"{self.model_name}: no images evaluated")
        values = [v for _, v in self.per_image_psnr]
        self.avg = float(np.mean(values))
        self.max = float(max(values))
        self.min = float(min(values))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "psnr"])
            w.writerows((i, repr(v)) for i, v in self.per_image_psnr)
            w.writerows((sid, repr(v)) for sid, v in zip(SUMMARY_IDS, (self.avg, self.max, self.min)))
        return path

    @classmethod
    def from_csv(cls, path, model_name: str | None = None) -> "EvalReport":
        path = Path(path)
        with path.open(newline="") as f:
            rows = [(r["id"], float(r["psnr"])) for r in csv.DictReader(f) if r["id"] not in SUMMARY_IDS]
        return cls(model_name or path.stem, rows)


def _pad_to(t: torch.Tensor, multiple: int):
    h, w = t.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return t
    # reflect needs the pad to be smaller than the image; tiny inputs fall back to edge replication
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(t, (0, pw, 0, ph), mode=mode)


@torch.no_grad()
def generator_inference(net: torch.nn.Module, *images: np.ndarray) -> np.ndarray:
    """Run a generator on whole 8-bit pages: normalize, pad to 2**depth, forward (eval mode), crop, denormalize."""
    sizes = {np.asarray(im).shape[:2] for im in images}
    if len(sizes) != 1:
        raise DimensionMismatch(f"generator inputs differ in size: {sorted(sizes)}")
    (h, w), = sizes
    was_training = net.training
    net.eval()
    try:
        dtype = next(net.parameters()).dtype
        inputs = [_pad_to(normalize(im).unsqueeze(0).to(dtype), 2 ** net.depth) for im in images]
        out = net(*inputs)[0, :, :h, :w]
    finally:
        net.train(was_training)
    return denormalize(out)


def colorize(gB_checkpoint, tone: np.ndarray, flat: np.ndarray) -> np.ndarray:
    """Colorized page from a screentone page and its flat-colored counterpart."""
    gB = ckpt.load_network(gB_checkpoint, role="G_B")
    return generator_inference(gB, tone, flat)


def model_fn(net: torch.nn.Module) -> Callable[[ImageTriplet], np.ndarray]:
    """Wrap a trained generator as ``triplet -> colorized`` using the inputs its role expects."""
    if net.role == "G_B":
        return lambda t: generator_inference(net, t.screentone, t.flat)
    if net.role == "P2P_tone_only":
        return lambda t: generator_inference(net, t.screentone)
    if net.role == "P2P_flat_only":
        return lambda t: generator_inference(net, t.flat)
    raise ValueError(f"{net.role} is not a colorizer")


def evaluate(model: Callable[[ImageTriplet], np.ndarray], test_set: Sequence[ImageTriplet],
             name: str = "model") -> EvalReport:
    rows = []
    for t in test_set:
        rows.append((t.id, psnr(model(t), t.colorized)))
    if not rows:
        raise EmptyDataset("test set is empty")
    return EvalReport(name, rows)


def format_table(reports: Sequence[EvalReport]) -> str:
    """Ave./Max/Min rows by model columns, two decimals."""
    names = [r.model_name for r in reports]
    width = max(8, *(len(n) for n in names))
    lines = [" " * 6 + "".join(f"{n:>{width + 2}}" for n in names)]
    for label, attr in (("Ave.", "avg"), ("Max", "max"), ("Min", "min")):
        lines.append(f"{label:<6}" + "".join(f"{getattr(r, attr):>{width + 2}.2f}" for r in reports))
    return "\n".join(lines)


@dataclass
class AblationResult:
    full: EvalReport
    ablated: EvalReport
    grids: list[np.ndarray]
    initial_digests: tuple[str, str]
    ablated_used_stage1: bool


def side_by_side(*images: np.ndarray, gap: int = 4) -> np.ndarray:
    rgb = [np.repeat(im, 3, axis=2) if im.shape[2] == 1 else im for im in images]
    h = max(im.shape[0] for im in rgb)
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for im in rgb:
        parts += [im, spacer]
    return np.concatenate(parts[:-1], axis=1)


def ablation(config: TrainConfig, data: Sequence[ImageTriplet], stage1, test_set: Sequence[ImageTriplet],
             out_dir=None) -> AblationResult:
    """Train stage 2 twice under one seed, with and without the cycle term (λ2 = 0), and score both."""
    full = train(2, config, data, stage1=stage1)
    ablated = train(2, dataclasses.replace(config, lambda2=0.0), data, stage1=None)
    f_fn, a_fn = model_fn(full.generator), model_fn(ablated.generator)
    full_rows, abl_rows, grids = [], [], []
    for t in test_set:
        f_out, a_out = f_fn(t), a_fn(t)
        full_rows.append((t.id, psnr(f_out, t.colorized)))
        abl_rows.append((t.id, psnr(a_out, t.colorized)))
        grids.append(side_by_side(t.screentone, t.flat, f_out, a_out, t.colorized))
    result = AblationResult(
        EvalReport("full", full_rows),
        EvalReport("no_cycle", abl_rows),
        grids,
        (full.initial_digests["G_B"], ablated.initial_digests["G_B"]),
        ablated.used_stage1,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.full.to_csv(out / "full.csv")
        result.ablated.to_csv(out / "no_cycle.csv")
        for t, grid in zip(test_set, grids):
            Image.fromarray(grid).save(out / f"{t.id}_ablation.png")
    return result
