"""Image I/O, the procedural toy-face generator and dataset ingestion."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .degradation import DegradationOperator, downsample

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
MIN_IMAGES = 10


@dataclass
class Dataset:
    images: torch.Tensor  # (N, C, H, W) in [0, 1]
    train_idx: np.ndarray
    val_idx: np.ndarray
    source: str = "<memory>"
    skipped: int = 0

    @property
    def train(self) -> torch.Tensor:
        return self.images[self.train_idx]

    @property
    def val(self) -> torch.Tensor:
        return self.images[self.val_idx]

    def __len__(self):
        return len(self.images)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def from_tensor(images: torch.Tensor, val_fraction: float = 0.1, seed: int = 0) -> Dataset:
    train, val = split_indices(len(images), val_fraction, seed)
    return Dataset(images, train, val)


# --------------------------------------------------------------------------
# image files


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` in [0, 1] -> ``(H, W, C)`` or ``(H, W)`` uint8."""
    arr = np.round(x.detach().to(torch.float64).clamp(0, 1).numpy() * 255.0).astype(np.uint8)
    arr = np.transpose(arr, (1, 2, 0))
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def save_image(x: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def load_image(path, channels: int | None = None) -> torch.Tensor:
    with Image.open(path) as im:
        im.load()
        if channels == 1:
            im = im.convert("L")
        elif channels == 3 or im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.transpose(arr, (2, 0, 1))
    return torch.from_numpy(np.ascontiguousarray(arr))


def _center_square(im: Image.Image) -> Image.Image:
    w, h = im.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return im.crop((left, top, left + side, top + side))


def ingest_dataset(directory, image_shape, val_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Load every decodable image in ``directory`` (sorted by name).

    Images are centre-cropped to a square, resized to ``image_shape`` and
    scaled to [0, 1]. Unreadable files are skipped and counted.
    """
    c, h, w = image_shape
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, skipped = [], 0
    for path in files:
        try:
            with Image.open(path) as im:
                im = im.convert("L" if c == 1 else "RGB")
                im = _center_square(im)
                if im.size != (w, h):
                    im = im.resize((w, h), Image.BOX)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except Exception as exc:  # PIL raises a zoo of exception types
            log.warning("skipping %s: %s", path.name, exc)
            skipped += 1
            continue
        arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
        images.append(torch.from_numpy(np.ascontiguousarray(arr)))
    if skipped:
        log.info("skipped %d unreadable files in %s", skipped, directory)
    if len(images) < MIN_IMAGES:
        raise ValueError(f"{directory} has {len(images)} usable images; need at least {MIN_IMAGES}")
    train, val = split_indices(len(images), val_fraction, seed)
    return Dataset(torch.stack(images), train, val, source=str(directory), skipped=skipped)


def make_pair(op: DegradationOperator, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return x, downsample(op, x)


# --------------------------------------------------------------------------
# toy faces

_SUPERSAMPLE = 4
_SKIN = np.array([[0.96, 0.80, 0.69], [0.88, 0.67, 0.52], [0.76, 0.55, 0.40],
                  [0.55, 0.38, 0.26], [0.40, 0.27, 0.18]])
_HAIR = np.array([[0.10, 0.08, 0.06], [0.35, 0.22, 0.12], [0.75, 0.60, 0.30],
                  [0.55, 0.20, 0.08], [0.60, 0.60, 0.60]])


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def toy_face(rng: np.random.Generator, size: int = 32, channels: int = 3, noise: float = 0.02) -> np.ndarray:
    """One face-like image ``(C, size, size)`` quantized to 8-bit levels."""
    n = size * _SUPERSAMPLE
    f = n / 32.0  # geometry is authored on a 32-pixel canvas
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    img = np.empty((n, n, 3))
    top, bottom = rng.uniform(0.15, 0.95, 3), rng.uniform(0.15, 0.95, 3)
    ramp = (yy / n)[..., None]
    img[:] = top * (1 - ramp) + bottom * ramp

    cy, cx = rng.normal(17.0, 1.5) * f, rng.normal(16.0, 1.5) * f
    ry, rx = rng.uniform(10.0, 13.0) * f, rng.uniform(7.5, 10.5) * f
    tilt = rng.uniform(-0.25, 0.25)
    skin = np.clip(_SKIN[rng.integers(len(_SKIN))] + rng.normal(0, 0.04, 3), 0, 1)
    if rng.random() < 0.8:
        hair = np.clip(_HAIR[rng.integers(len(_HAIR))] + rng.normal(0, 0.04, 3), 0, 1)
        img[_ellipse(yy, xx, cy - rng.uniform(1.5, 3.5) * f, cx, ry * 1.05, rx * 1.15, tilt)] = hair
    img[_ellipse(yy, xx, cy, cx, ry, rx, tilt)] = skin

    c, s = np.cos(tilt), np.sin(tilt)

    def at(du, dv):  # head-frame offset -> canvas position
        return cy + s * du + c * dv, cx + c * du - s * dv

    eye_dv = -ry * rng.uniform(0.15, 0.3)
    eye_du = rx * rng.uniform(0.35, 0.5)
    eye_r = rng.uniform(1.0, 1.8) * f
    iris = np.clip(rng.uniform(0.0, 0.35, 3), 0, 1)
    for sign in (-1, 1):
        ey, ex = at(sign * eye_du, eye_dv)
        img[_ellipse(yy, xx, ey, ex, eye_r * 0.8, eye_r * 1.3, tilt)] = 0.97
        img[_ellipse(yy, xx, ey, ex, eye_r * 0.6, eye_r * 0.6)] = iris

    my, mx = at(0.0, ry * rng.uniform(0.4, 0.55))
    mouth = np.clip(np.array([0.7, 0.2, 0.25]) + rng.normal(0, 0.08, 3), 0, 1)
    img[_ellipse(yy, xx, my, mx, rng.uniform(0.5, 1.6) * f, rx * rng.uniform(0.3, 0.55), tilt)] = mouth

    img = img.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    if channels == 1:
        img = img @ np.array([0.299, 0.587, 0.114])
        img = img[..., None]
    img = img + rng.normal(0.0, noise, img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return np.transpose(img, (2, 0, 1)).astype(np.float32)


def toy_faces(n: int, seed: int = 0, size: int = 32, channels: int = 3, noise: float = 0.02) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(np.stack([toy_face(rng, size, channels, noise) for _ in range(n)]))


def write_toy_dataset(out_dir, n: int, seed: int = 0, size: int = 32) -> list[Path]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(n - 1)))
    paths = []
    for i, img in enumerate(toy_faces(n, seed, size)):
        p = out / f"face_{i:0{width}d}.png"
        save_image(img, p)
        paths.append(p)
    return paths
