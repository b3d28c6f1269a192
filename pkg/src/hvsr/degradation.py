"""Linear degradation operators ``y = H x`` and the consistency projection.

Two operator kinds are supported:

* ``block-average``: non-overlapping ``s x s`` window means. The Gram
  ``H H^T`` is ``I / s**2`` so every inverse is closed form.
* ``circular-filter``: periodic correlation with a normalized kernel followed
  by subsampling. The Gram is a circular convolution on the LR grid and is
  inverted by division in the Fourier domain.

All functions act on the last two axes, so ``(H, W)``, ``(C, H, W)`` and
``(B, C, H, W)`` tensors are accepted. Pixel values live in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch

BLOCK_AVERAGE = "block-average"
CIRCULAR_FILTER = "circular-filter"
KINDS = (BLOCK_AVERAGE, CIRCULAR_FILTER)

# positivity floor for the Gram symbol, relative to its maximum
_GRAM_RTOL = 1e-8
# frequency grid used to validate a kernel before any image size is known
_VALIDATION_LR_SIZE = 64


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationOperator:
    """``H_s``: low-pass filter then subsample by ``scale``.

    ``kernel`` is only used by the circular-filter kind; it is normalized to
    sum to one and aligned so that its centre (rounded down) sits on the
    centre of each ``scale x scale`` block.
    """

    kind: str = BLOCK_AVERAGE
    scale: int = 4
    kernel: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if int(self.scale) != self.scale or self.scale < 2:
            raise ValueError(f"scale must be an integer >= 2, got {self.scale!r}")
        object.__setattr__(self, "scale", int(self.scale))
        if self.kind == BLOCK_AVERAGE:
            if self.kernel is not None:
                raise ValueError("block-average operators take no kernel")
            return
        if self.kernel is None:
            raise ValueError("circular-filter operators need a kernel")
        k = np.array(self.kernel, dtype=np.float64)
        if k.ndim != 2 or k.size == 0:
            raise ValueError(f"kernel must be a non-empty 2-D grid, got shape {k.shape}")
        if not np.all(np.isfinite(k)):
            raise ValueError("kernel has non-finite coefficients")
        total = k.sum()
        if abs(total) < 1e-12:
            raise ValueError("kernel coefficients sum to zero; cannot normalize")
        k = k / total
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)
        n = _VALIDATION_LR_SIZE * self.scale
        if max(k.shape) > n:
            raise ValueError(f"kernel larger than the validation grid ({n})")
        symbol = _gram_symbol(k.tobytes(), k.shape, self.scale, n, n)
        _check_positive(symbol)

    @property
    def key(self) -> tuple:
        kern = None if self.kernel is None else (self.kernel.shape, self.kernel.tobytes())
        return (self.kind, self.scale, kern)

    def __hash__(self):
        return hash(self.key)

    def __eq__(self, other):
        return isinstance(other, DegradationOperator) and self.key == other.key

    def lr_shape(self, hr_shape: Sequence[int]) -> tuple[int, ...]:
        *lead, h, w = hr_shape
        if h % self.scale or w % self.scale:
            raise ShapeError(f"spatial dims {(h, w)} not divisible by scale {self.scale}")
        return (*lead, h // self.scale, w // self.scale)


def from_config(cfg: dict) -> DegradationOperator:
    """Build an operator from ``degradation.*`` keys.

    ``kernel`` is a row-major coefficient list (square kernels) or a nested
    list of rows.
    """
    kind = cfg.get("kind", BLOCK_AVERAGE)
    scale = cfg.get("scale", 4)
    kernel = cfg.get("kernel")
    if kernel is not None:
        arr = np.asarray(kernel, dtype=np.float64)
        if arr.ndim == 1:
            side = math.isqrt(arr.size)
            if side * side != arr.size:
                raise ValueError(f"flat kernel of length {arr.size} is not square")
            arr = arr.reshape(side, side)
        kernel = arr
    return DegradationOperator(kind=kind, scale=scale, kernel=kernel)


def box_kernel(size: int) -> np.ndarray:
    return np.full((size, size), 1.0 / size**2)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


# --------------------------------------------------------------------------
# circular-filter machinery


def _kernel_array(kernel: np.ndarray, scale: int, h: int, w: int) -> np.ndarray:
    """Embed ``kernel`` into a periodic ``h x w`` grid as a correlation mask.

    Position ``d`` holds the weight of ``x[m + d]`` in the filtered sample at
    ``m``.
    """
    kh, kw = kernel.shape
    oh, ow = (kh - scale) // 2, (kw - scale) // 2
    arr = np.zeros((h, w))
    for a in range(kh):
        for b in range(kw):
            arr[(a - oh) % h, (b - ow) % w] += kernel[a, b]
    return arr


@lru_cache(maxsize=64)
def _kernel_fft(kbytes: bytes, kshape: tuple, scale: int, h: int, w: int) -> np.ndarray:
    kernel = np.frombuffer(kbytes, dtype=np.float64).reshape(kshape)
    return np.fft.fft2(_kernel_array(kernel, scale, h, w))


@lru_cache(maxsize=64)
def _gram_symbol(kbytes: bytes, kshape: tuple, scale: int, h: int, w: int) -> np.ndarray:
    """Frequency response of ``H H^T`` on the ``(h/s, w/s)`` LR grid."""
    kf = _kernel_fft(kbytes, kshape, scale, h, w)
    autocorr = np.real(np.fft.ifft2(np.abs(kf) ** 2))
    return np.real(np.fft.fft2(autocorr[::scale, ::scale]))


def _check_positive(symbol: np.ndarray) -> None:
    top = symbol.max()
    low = symbol.min()
    if not top > 0 or low <= _GRAM_RTOL * top:
        raise ValueError(
            f"Gram operator is not invertible: frequency response min {low:.3e}, max {top:.3e}"
        )


def _spectra(op: DegradationOperator, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
    k = op.kernel
    kf = _kernel_fft(k.tobytes(), k.shape, op.scale, h, w)
    g = _gram_symbol(k.tobytes(), k.shape, op.scale, h, w)
    _check_positive(g)
    return torch.from_numpy(kf), torch.from_numpy(g)


def _check_hr(op: DegradationOperator, x: torch.Tensor) -> None:
    if x.ndim < 2:
        raise ShapeError(f"expected an image tensor, got shape {tuple(x.shape)}")
    op.lr_shape(x.shape)


# --------------------------------------------------------------------------
# public operations


def downsample(op: DegradationOperator, x: torch.Tensor) -> torch.Tensor:
    """Return ``H_s x``."""
    _check_hr(op, x)
    s = op.scale
    if op.kind == BLOCK_AVERAGE:
        *lead, h, w = x.shape
        return x.reshape(*lead, h // s, s, w // s, s).mean(dim=(-3, -1))
    h, w = x.shape[-2:]
    kf, _ = _spectra(op, h, w)
    xf = torch.fft.fft2(x.to(torch.float64))
    filtered = torch.fft.ifft2(torch.conj(kf) * xf).real
    return filtered[..., ::s, ::s].to(x.dtype)


def apply_adjoint(op: DegradationOperator, v: torch.Tensor) -> torch.Tensor:
    """Return ``H_s^T v`` on the HR grid."""
    if v.ndim < 2:
        raise ShapeError(f"expected an image tensor, got shape {tuple(v.shape)}")
    s = op.scale
    if op.kind == BLOCK_AVERAGE:
        up = v.repeat_interleave(s, dim=-2).repeat_interleave(s, dim=-1)
        return up / (s * s)
    *lead, lh, lw = v.shape
    kf, _ = _spectra(op, lh * s, lw * s)
    up = torch.zeros(*lead, lh * s, lw * s, dtype=torch.float64)
    up[..., ::s, ::s] = v.to(torch.float64)
    return torch.fft.ifft2(kf * torch.fft.fft2(up)).real.to(v.dtype)


def gram_apply(op: DegradationOperator, v: torch.Tensor) -> torch.Tensor:
    """Return ``H_s H_s^T v``."""
    if op.kind == BLOCK_AVERAGE:
        return v / op.scale**2
    lh, lw = v.shape[-2:]
    _, g = _spectra(op, lh * op.scale, lw * op.scale)
    return torch.fft.ifft2(g * torch.fft.fft2(v.to(torch.float64))).real.to(v.dtype)


def gram_inverse_apply(op: DegradationOperator, v: torch.Tensor) -> torch.Tensor:
    """Return ``(H_s H_s^T)^{-1} v``."""
    if v.ndim < 2:
        raise ShapeError(f"expected an image tensor, got shape {tuple(v.shape)}")
    if op.kind == BLOCK_AVERAGE:
        return v * op.scale**2
    lh, lw = v.shape[-2:]
    _, g = _spectra(op, lh * op.scale, lw * op.scale)
    return torch.fft.ifft2(torch.fft.fft2(v.to(torch.float64)) / g).real.to(v.dtype)


def pseudo_inverse(op: DegradationOperator, y: torch.Tensor) -> torch.Tensor:
    """``H^T (H H^T)^{-1} y``, the minimum-norm consistent image."""
    return apply_adjoint(op, gram_inverse_apply(op, y))


def project_consistent(op: DegradationOperator, x_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Project ``x_hat`` onto ``{x : H x = y}``.

    Computed in double precision and cast back to ``x_hat``'s dtype. The
    result is not clamped; clamping would break exact consistency.
    """
    _check_hr(op, x_hat)
    expected = op.lr_shape(x_hat.shape)
    if tuple(y.shape[-2:]) != tuple(expected[-2:]):
        raise ShapeError(f"LR shape {tuple(y.shape)} does not match {expected}")
    xd = x_hat.to(torch.float64)
    residual = y.to(torch.float64) - downsample(op, xd)
    return (xd + pseudo_inverse(op, residual)).to(x_hat.dtype)


def rmse(a, b) -> float:
    """Root mean square error on the 0-255 scale."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(torch.sqrt(torch.mean((255.0 * a - 255.0 * b) ** 2)))


def batch_rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image RMSE (0-255 scale) over all but the leading axis."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    d = 255.0 * (a.to(torch.float64) - b.to(torch.float64))
    return torch.sqrt(d.pow(2).flatten(1).mean(dim=1))


def lr_view(op: DegradationOperator | None, x: torch.Tensor) -> torch.Tensor:
    """``H_s x``, or ``x`` itself when ``op`` is None (the ``s = 1`` case)."""
    return x if op is None else downsample(op, x)


def upsample_nearest(y: torch.Tensor, scale: int) -> torch.Tensor:
    return y.repeat_interleave(scale, dim=-2).repeat_interleave(scale, dim=-1)
