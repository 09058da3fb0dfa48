"""Image triplets on disk and their conversion to normalized tensors.

A dataset directory is flat: for every id listed in ``manifest.txt`` there are
three 8-bit PNGs, ``<id>_color.png`` (colorized page, RGB), ``<id>_tone.png``
(screentone page, grayscale) and ``<id>_flat.png`` (flat-colored page, RGB).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import CropTooLarge, DimensionMismatch, EmptyDataset, MissingFile

MANIFEST = "manifest.txt"
SUFFIXES = {"colorized": "_color.png", "screentone": "_tone.png", "flat": "_flat.png"}


@dataclass
class ImageTriplet:
    """One page: colorized ``x`` (H,W,3), screentone ``y`` (H,W,1), flat ``z`` (H,W,3), all uint8."""

    id: str
    colorized: np.ndarray
    screentone: np.ndarray
    flat: np.ndarray

    def __post_init__(self):
        self.colorized = _as_uint8(self.colorized, 3, "colorized")
        self.screentone = _as_uint8(self.screentone, 1, "screentone")
        self.flat = _as_uint8(self.flat, 3, "flat")
        sizes = {a.shape[:2] for a in (self.colorized, self.screentone, self.flat)}
        if len(sizes) != 1:
            raise DimensionMismatch(
                f"triplet {self.id!r}: image sizes differ "
                f"(color {self.colorized.shape[:2]}, tone {self.screentone.shape[:2]}, "
                f"flat {self.flat.shape[:2]})"
            )

    @property
    def size(self) -> tuple[int, int]:
        """(H, W) shared by the three images."""
        return self.colorized.shape[:2]


@dataclass
class TensorTriplet:
    """Normalized float tensors in [-1, 1], channel-first: (3,h,w), (1,h,w), (3,h,w).

    Batched triplets (from :func:`collate`) carry a leading batch dimension.
    """

    colorized: torch.Tensor
    screentone: torch.Tensor
    flat: torch.Tensor


def _as_uint8(img, channels, name):
    arr = np.asarray(img)
    if arr.ndim == 2 and channels == 1:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise DimensionMismatch(f"{name} must be H×W×{channels}, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError(f"{name} pixel values outside [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def _read_png(path: Path, kind: str) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(f"missing {kind} image: {path}")
    with Image.open(path) as im:
        if kind == "screentone":
            if im.mode in ("L", "1", "I;16", "I"):
                return np.asarray(im.convert("L"))
            rgb = np.asarray(im.convert("RGB"))
            if not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])):
                raise DimensionMismatch(f"screentone {path} has 3 distinct channels; expected grayscale")
            return rgb[..., 0]
        return np.asarray(im.convert("RGB"))


def load_triplet(root, id: str) -> ImageTriplet:
    root = Path(root)
    images = {kind: _read_png(root / f"{id}{suffix}", kind) for kind, suffix in SUFFIXES.items()}
    return ImageTriplet(id=id, **images)


def save_triplet(root, t: ImageTriplet) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    Image.fromarray(t.colorized, "RGB").save(root / f"{t.id}_color.png")
    Image.fromarray(t.screentone[:, :, 0], "L").save(root / f"{t.id}_tone.png")
    Image.fromarray(t.flat, "RGB").save(root / f"{t.id}_flat.png")


def read_manifest(root) -> list[str]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise MissingFile(f"dataset manifest not found: {path}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def write_manifest(root, ids: Sequence[str]) -> Path:
    path = Path(root) / MANIFEST
    path.write_text("".join(f"{i}\n" for i in ids))
    return path


class TripletFolder(Sequence[ImageTriplet]):
    """Lazily loaded view over a dataset directory, optionally restricted to some ids."""

    def __init__(self, root, ids: Sequence[str] | None = None):
        self.root = Path(root)
        self.ids = list(read_manifest(self.root) if ids is None else ids)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return TripletFolder(self.root, self.ids[i])
        return load_triplet(self.root, self.ids[i])

    def __iter__(self) -> Iterator[ImageTriplet]:
        for i in self.ids:
            yield load_triplet(self.root, i)


def split(data: Sequence[ImageTriplet], n_train: int):
    """First ``n_train`` items for training, the rest for testing (``n_train=0``: all for both)."""
    if len(data) == 0:
        raise EmptyDataset("dataset has no triplets")
    if n_train <= 0:
        return data, data
    if n_train >= len(data):
        raise EmptyDataset(f"n_train={n_train} leaves no test triplets out of {len(data)}")
    return data[:n_train], data[n_train:]


def normalize(img: np.ndarray) -> torch.Tensor:
    """uint8 H×W×C → float32 C×H×W in [-1, 1]."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    t = torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32))
    return t / 127.5 - 1.0


def denormalize(t) -> np.ndarray:
    """C×H×W values in [-1, 1] (clamped) → uint8 H×W×C."""
    t = torch.as_tensor(t).detach().to(torch.float64).clamp(-1.0, 1.0)
    arr = torch.round((t + 1.0) * 127.5).to(torch.uint8).numpy()
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def _resize(img: np.ndarray, size, resample) -> np.ndarray:
    h, w = size
    if img.shape[:2] == (h, w):
        return img
    mode = "L" if img.shape[2] == 1 else "RGB"
    pil = Image.fromarray(img[:, :, 0] if mode == "L" else img, mode)
    out = np.asarray(pil.resize((w, h), resample=resample))
    return out[:, :, None] if mode == "L" else out


def preprocess(t: ImageTriplet, working_size, crop: int, rng: np.random.Generator) -> TensorTriplet:
    """Resize to ``working_size`` (H, W), take one random ``crop``×``crop`` window, normalize.

    The screentone uses nearest-neighbour resampling so its dot structure stays binary;
    the two color images use bilinear. All three share one crop offset.
    """
    h, w = working_size
    if crop > min(h, w):
        raise CropTooLarge(f"crop {crop} exceeds working size {h}×{w}")
    color = _resize(t.colorized, (h, w), Image.BILINEAR)
    tone = _resize(t.screentone, (h, w), Image.NEAREST)
    flat = _resize(t.flat, (h, w), Image.BILINEAR)
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    window = (slice(top, top + crop), slice(left, left + crop))
    return TensorTriplet(
        colorized=normalize(color[window]),
        screentone=normalize(tone[window]),
        flat=normalize(flat[window]),
    )


def collate(items: Sequence[TensorTriplet]) -> TensorTriplet:
    return TensorTriplet(
        colorized=torch.stack([i.colorized for i in items]),
        screentone=torch.stack([i.screentone for i in items]),
        flat=torch.stack([i.flat for i in items]),
    )
