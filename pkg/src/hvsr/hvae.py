"""A small very-deep-VAE style hierarchical VAE.

Latent groups are ordered coarsest first. The generative top-down path
(``theta``) produces each conditional prior ``p(z_l | z_<l)`` and absorbs the
sampled latent back into a residual stream. Inference (``phi``) runs a
deterministic bottom-up path over the image and then walks the *same*
top-down blocks, adding a posterior head per group that also sees the
bottom-up feature at that group's resolution.

Tensors are batched ``(B, C, H, W)`` throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import Rng, standard_normal

LOG_VAR_RANGE = (-10.0, 10.0)
LOG_SCALE_RANGE = (-7.0, 2.0)
LIKELIHOOD = "diagonal-gaussian"
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class HierarchySpec:
    """Latent layout and network widths.

    ``groups`` holds ``(channels, height, width)`` per latent group, coarsest
    first. ``widths`` maps a spatial resolution to the channel count of the
    deterministic feature maps at that resolution.
    """

    groups: tuple[tuple[int, int, int], ...]
    widths: tuple[tuple[int, int], ...]
    image_shape: tuple[int, int, int] = (3, 32, 32)
    blocks_per_res: int = 1
    bottleneck: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(v) for v in g) for g in self.groups))
        widths = self.widths.items() if isinstance(self.widths, dict) else self.widths
        object.__setattr__(self, "widths", tuple(sorted((int(r), int(w)) for r, w in widths)))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        c, h, w = self.image_shape
        if c not in (1, 3):
            raise ValueError(f"image channels must be 1 or 3, got {c}")
        if h != w:
            raise ValueError("only square images are supported")
        if not self.groups:
            raise ValueError("need at least one latent group")
        prev = 0
        for gc, gh, gw in self.groups:
            if gh != gw or gc < 1:
                raise ValueError(f"latent groups must be square with >= 1 channel, got {(gc, gh, gw)}")
            if gh < prev:
                raise ValueError("group resolutions must be non-decreasing")
            if h % gh:
                raise ValueError(f"group resolution {gh} does not divide image size {h}")
            prev = gh
        missing = [r for r in self.resolutions if r not in self.width_map]
        if missing:
            raise ValueError(f"no width given for resolutions {missing}")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def width_map(self) -> dict[int, int]:
        return dict(self.widths)

    @property
    def group_res(self) -> list[int]:
        return [g[1] for g in self.groups]

    @property
    def resolutions(self) -> list[int]:
        """Every feature resolution, finest first."""
        return sorted(set(self.group_res) | {self.image_shape[1]}, reverse=True)

    def to_dict(self) -> dict:
        return {
            "groups": [list(g) for g in self.groups],
            "widths": {str(r): w for r, w in self.widths},
            "image_shape": list(self.image_shape),
            "blocks_per_res": self.blocks_per_res,
            "bottleneck": self.bottleneck,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchySpec":
        widths = d["widths"]
        if isinstance(widths, dict):
            widths = {int(k): v for k, v in widths.items()}
        return cls(
            groups=tuple(tuple(g) for g in d["groups"]),
            widths=widths,
            image_shape=tuple(d.get("image_shape", (3, 32, 32))),
            blocks_per_res=d.get("blocks_per_res", 1),
            bottleneck=d.get("bottleneck", 0.5),
        )


def desk_spec() -> HierarchySpec:
    """32x32 RGB, resolutions {1, 4, 8, 16, 32}, eight latent groups."""
    return HierarchySpec(
        groups=((16, 1, 1), (16, 1, 1), (8, 4, 4), (8, 4, 4), (8, 8, 8), (4, 16, 16), (4, 16, 16), (4, 32, 32)),
        widths={1: 64, 4: 64, 8: 64, 16: 32, 32: 16},
        image_shape=(3, 32, 32),
    )


def micro_spec(channels: int = 1) -> HierarchySpec:
    """Two groups on 4x4 images, for finite-difference checks."""
    return HierarchySpec(
        groups=((2, 1, 1), (2, 4, 4)),
        widths={1: 4, 2: 4, 4: 4},
        image_shape=(channels, 4, 4),
        bottleneck=1.0,
    )


@dataclass
class DiagonalGaussian:
    mean: torch.Tensor
    log_var: torch.Tensor

    @classmethod
    def from_head(cls, out: torch.Tensor) -> "DiagonalGaussian":
        mean, log_var = out.chunk(2, dim=1)
        return cls(mean, log_var.clamp(*LOG_VAR_RANGE))

    @classmethod
    def standard(cls, shape, dtype=torch.float32) -> "DiagonalGaussian":
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_var.detach())


@dataclass
class LatentPrefix:
    """The first ``k`` sampled latent groups, each batched."""

    groups: list[torch.Tensor]
    batch_size: int

    @property
    def k(self) -> int:
        return len(self.groups)

    def truncate(self, k: int) -> "LatentPrefix":
        if not 0 <= k <= self.k:
            raise ValueError(f"cannot truncate a prefix of length {self.k} to {k}")
        return LatentPrefix(self.groups[:k], self.batch_size)

    def repeat(self, n: int) -> "LatentPrefix":
        """Repeat every row ``n`` times (row-major: row i -> rows i*n..i*n+n-1)."""
        return LatentPrefix([z.repeat_interleave(n, dim=0) for z in self.groups], self.batch_size * n)


@dataclass
class DecoderOutput:
    pixel_mean: torch.Tensor
    pixel_log_scale: torch.Tensor  # (C,), broadcast over pixels


@dataclass
class EncodeResult:
    prefix: LatentPrefix
    posteriors: list[DiagonalGaussian]
    priors: list[DiagonalGaussian]
    h: torch.Tensor | None = None


@dataclass
class ElboResult:
    elbo: torch.Tensor
    recon: torch.Tensor
    kl_per_group: list[torch.Tensor]


# --------------------------------------------------------------------------
# Gaussian algebra


def kl_elementwise(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"shape mismatch {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    diff = q.log_var - p.log_var
    return 0.5 * (torch.exp(diff) + (q.mean - p.mean) ** 2 * torch.exp(-p.log_var) - 1.0 - diff)


def kl_diag_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """KL(q || p) summed over every element."""
    return kl_elementwise(q, p).sum()


def sample_gaussian(params: DiagonalGaussian, rng: Rng) -> torch.Tensor:
    eps = standard_normal(params.mean.shape, rng, dtype=params.mean.dtype)
    return params.mean + torch.exp(0.5 * params.log_var) * eps


def pixel_log_likelihood(out: DecoderOutput, x: torch.Tensor) -> torch.Tensor:
    """Gaussian log-density summed over the last three axes ``(C, H, W)``."""
    if out.pixel_mean.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(out.pixel_mean.shape)} vs {tuple(x.shape)}")
    log_scale = out.pixel_log_scale.reshape(-1, 1, 1)
    z = (x - out.pixel_mean) * torch.exp(-log_scale)
    per_pixel = -0.5 * z**2 - log_scale - _HALF_LOG_2PI
    return per_pixel.sum(dim=(-3, -2, -1))


# --------------------------------------------------------------------------
# networks


class ConvBlock(nn.Module):
    """1x1 -> 3x3 -> 3x3 -> 1x1 bottleneck with GELU before each conv."""

    def __init__(self, c_in, c_mid, c_out, residual=False, use_3x3=True, zero_last=False, last_scale=1.0):
        super().__init__()
        k = 3 if use_3x3 else 1
        self.residual = residual
        self.c1 = nn.Conv2d(c_in, c_mid, 1)
        self.c2 = nn.Conv2d(c_mid, c_mid, k, padding=k // 2)
        self.c3 = nn.Conv2d(c_mid, c_mid, k, padding=k // 2)
        self.c4 = nn.Conv2d(c_mid, c_out, 1)
        with torch.no_grad():
            if zero_last:
                self.c4.weight.zero_()
                self.c4.bias.zero_()
            else:
                self.c4.weight.mul_(last_scale)

    def forward(self, x):
        h = self.c1(F.gelu(x))
        h = self.c2(F.gelu(h))
        h = self.c3(F.gelu(h))
        h = self.c4(F.gelu(h))
        return x + h if self.residual else h


def _mid(width: int, bottleneck: float) -> int:
    return max(1, int(round(width * bottleneck)))


class BottomUp(nn.Module):
    """Deterministic feature pyramid: residual blocks and average pooling.

    Returns a dict from resolution to feature map at every resolution in
    ``resolutions`` (all must be <= the input resolution).
    """

    def __init__(self, in_channels: int, in_res: int, resolutions: Sequence[int], widths: dict[int, int],
                 blocks_per_res: int = 1, bottleneck: float = 0.5, n_total_blocks: int | None = None):
        super().__init__()
        self.in_res = in_res
        self.resolutions = sorted(set(resolutions) | {in_res}, reverse=True)
        if self.resolutions[0] != in_res:
            raise ValueError("bottom-up resolutions exceed the input resolution")
        n_blocks = n_total_blocks or blocks_per_res * len(self.resolutions)
        scale = math.sqrt(1.0 / n_blocks)
        self.in_conv = nn.Conv2d(in_channels, widths[in_res], 3, padding=1)
        self.stages = nn.ModuleDict()
        self.adapters = nn.ModuleDict()
        prev = in_res
        for res in self.resolutions:
            w = widths[res]
            if widths[prev] != w:
                self.adapters[str(res)] = nn.Conv2d(widths[prev], w, 1)
            self.stages[str(res)] = nn.Sequential(*[
                ConvBlock(w, _mid(w, bottleneck), w, residual=True, use_3x3=res > 2, last_scale=scale)
                for _ in range(blocks_per_res)
            ])
            prev = res

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        h = self.in_conv(x)
        acts = {}
        for res in self.resolutions:
            if h.shape[-1] != res:
                h = F.avg_pool2d(h, h.shape[-1] // res)
            if str(res) in self.adapters:
                h = self.adapters[str(res)](h)
            h = self.stages[str(res)](h)
            acts[res] = h
        return acts


class TopDownBlock(nn.Module):
    """Generative half of a residual top-down block (prior head, latent
    projection, residual update). Group 0 has a fixed standard-normal prior
    and no prior head."""

    def __init__(self, width: int, z_channels: int, res: int, bottleneck: float, n_groups: int, first: bool):
        super().__init__()
        self.z_channels = z_channels
        self.first = first
        mid = _mid(width, bottleneck)
        use_3x3 = res > 2
        if not first:
            self.prior = ConvBlock(width, mid, 2 * z_channels + width, use_3x3=use_3x3, zero_last=True)
        self.z_proj = nn.Conv2d(z_channels, width, 1)
        self.resnet = ConvBlock(width, mid, width, residual=True, use_3x3=use_3x3,
                                last_scale=math.sqrt(1.0 / n_groups))
        with torch.no_grad():
            self.z_proj.weight.mul_(math.sqrt(1.0 / n_groups))

    def prior_params(self, h: torch.Tensor) -> tuple[DiagonalGaussian, torch.Tensor | None]:
        if self.first:
            shape = (h.shape[0], self.z_channels, *h.shape[-2:])
            return DiagonalGaussian.standard(shape, dtype=h.dtype), None
        out = self.prior(h)
        zc = self.z_channels
        return DiagonalGaussian.from_head(out[:, : 2 * zc]), out[:, 2 * zc:]

    def absorb(self, h: torch.Tensor, feat: torch.Tensor | None, z: torch.Tensor) -> torch.Tensor:
        if feat is not None:
            h = h + feat
        h = h + self.z_proj(z)
        return self.resnet(h)


class PosteriorHead(nn.Module):
    def __init__(self, width: int, feat_width: int, z_channels: int, res: int, bottleneck: float):
        super().__init__()
        self.net = ConvBlock(width + feat_width, _mid(width, bottleneck), 2 * z_channels, use_3x3=res > 2)

    def forward(self, h: torch.Tensor, feat: torch.Tensor) -> DiagonalGaussian:
        return DiagonalGaussian.from_head(self.net(torch.cat([h, feat], dim=1)))


class TopDown(nn.Module):
    """All generative (``theta``) parameters."""

    def __init__(self, spec: HierarchySpec):
        super().__init__()
        widths = spec.width_map
        n = spec.n_groups
        self.blocks = nn.ModuleList([
            TopDownBlock(widths[res], zc, res, spec.bottleneck, n, first=(l == 0))
            for l, (zc, res, _) in enumerate(spec.groups)
        ])
        stream_res = sorted(set(spec.group_res) | {spec.image_shape[1]})
        self.biases = nn.ParameterDict({
            str(r): nn.Parameter(torch.zeros(1, widths[r], r, r)) for r in stream_res
        })
        self.adapters = nn.ModuleDict()
        for lo, hi in zip(stream_res, stream_res[1:]):
            if widths[lo] != widths[hi]:
                self.adapters[str(hi)] = nn.Conv2d(widths[lo], widths[hi], 1)
        c, res, _ = spec.image_shape
        self.out_conv = nn.Conv2d(widths[res], c, 1)
        self.log_scale = nn.Parameter(torch.full((c,), -2.0))

    def enter(self, h: torch.Tensor | None, res: int, batch: int) -> torch.Tensor:
        """Move the residual stream to ``res``; adds the resolution's bias on entry."""
        bias = self.biases[str(res)]
        if h is None:
            return bias.expand(batch, -1, -1, -1)
        if h.shape[-1] == res:
            return h
        h = F.interpolate(h, size=(res, res), mode="nearest")
        if str(res) in self.adapters:
            h = self.adapters[str(res)](h)
        return h + bias

    def likelihood(self, h: torch.Tensor) -> DecoderOutput:
        log_scale = self.log_scale.clamp(*LOG_SCALE_RANGE)
        return DecoderOutput(self.out_conv(h), log_scale)


class Inference(nn.Module):
    """The HR encoder (``phi``): bottom-up path plus one posterior head per group."""

    def __init__(self, spec: HierarchySpec):
        super().__init__()
        c, res, _ = spec.image_shape
        widths = spec.width_map
        self.bottom_up = BottomUp(c, res, spec.group_res, widths, spec.blocks_per_res, spec.bottleneck)
        self.heads = nn.ModuleList([
            PosteriorHead(widths[gres], widths[gres], zc, gres, spec.bottleneck)
            for zc, gres, _ in spec.groups
        ])


PickFn = Callable[[int, torch.Tensor, DiagonalGaussian], torch.Tensor]


class HVAE(nn.Module):
    def __init__(self, spec: HierarchySpec):
        super().__init__()
        self.spec = spec
        self.theta = TopDown(spec)
        self.phi = Inference(spec)

    # ---- parameter partitions

    def theta_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("theta.")]

    def phi_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("phi.")]

    def sharing_map(self) -> dict[int, list[str]]:
        """Top-down parameters read by inference, per group."""
        return {
            l: [f"theta.blocks.{l}.{n}" for n, _ in block.named_parameters()]
            for l, block in enumerate(self.theta.blocks)
        }

    @property
    def dtype(self) -> torch.dtype:
        return self.theta.log_scale.dtype

    # ---- the shared walk

    def walk(self, batch: int, pick: PickFn, n_groups: int | None = None,
             start: tuple[int, torch.Tensor | None] = (0, None)) -> torch.Tensor:
        """Run top-down blocks; ``pick(l, h, prior)`` returns ``z_l``.

        ``start`` resumes from group ``l`` with stream ``h``.
        """
        n_groups = self.spec.n_groups if n_groups is None else n_groups
        first, h = start
        for l in range(first, n_groups):
            res = self.spec.groups[l][1]
            h = self.theta.enter(h, res, batch)
            block = self.theta.blocks[l]
            prior, feat = block.prior_params(h)
            z = pick(l, h, prior)
            h = block.absorb(h, feat, z)
        return h

    def decode_stream(self, h: torch.Tensor | None, batch: int) -> DecoderOutput:
        h = self.theta.enter(h, self.spec.image_shape[1], batch)
        return self.theta.likelihood(h)

    # ---- operations

    def prior_rollout(self, k: int, rng: Rng, batch: int = 1) -> LatentPrefix:
        if not 0 <= k <= self.spec.n_groups:
            raise ValueError(f"k={k} outside [0, {self.spec.n_groups}]")
        zs: list[torch.Tensor] = []

        def pick(l, h, prior):
            z = sample_gaussian(prior, rng)
            zs.append(z)
            return z

        self.walk(batch, pick, n_groups=k)
        return LatentPrefix(zs, batch)

    def prior_params(self, prefix: LatentPrefix) -> list[DiagonalGaussian]:
        """Conditional priors ``p(z_l | z_<l)`` for every group of ``prefix``."""
        priors = []

        def pick(l, h, prior):
            priors.append(prior)
            return prefix.groups[l]

        self.walk(prefix.batch_size, pick, n_groups=prefix.k)
        return priors

    def complete(self, prefix: LatentPrefix, rng: Rng) -> tuple[LatentPrefix, torch.Tensor]:
        """Keep the prefix, draw the remaining groups from the conditional prior."""
        self._check_prefix(prefix)
        zs = list(prefix.groups)

        def pick(l, h, prior):
            if l < prefix.k:
                return prefix.groups[l]
            z = sample_gaussian(prior, rng)
            zs.append(z)
            return z

        h = self.walk(prefix.batch_size, pick)
        return LatentPrefix(zs, prefix.batch_size), h

    def complete_and_decode(self, prefix: LatentPrefix, rng: Rng, mode: str = "sample") -> torch.Tensor:
        if mode not in ("sample", "mean"):
            raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
        _, h = self.complete(prefix, rng)
        out = self.decode_stream(h, prefix.batch_size)
        x = out.pixel_mean
        if mode == "sample":
            eps = standard_normal(x.shape, rng, dtype=x.dtype)
            x = x + torch.exp(out.pixel_log_scale).reshape(-1, 1, 1) * eps
        return x.clamp(0.0, 1.0)

    def bottom_up(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        if tuple(x.shape[1:]) != self.spec.image_shape:
            raise ValueError(f"image shape {tuple(x.shape[1:])} != spec {self.spec.image_shape}")
        return self.phi.bottom_up(x)

    def encode(self, x: torch.Tensor, rng: Rng, n_groups: int | None = None) -> EncodeResult:
        acts = self.bottom_up(x)
        zs, posts, priors = [], [], []

        def pick(l, h, prior):
            post = self.phi.heads[l](h, acts[self.spec.groups[l][1]])
            z = sample_gaussian(post, rng)
            zs.append(z)
            posts.append(post)
            priors.append(prior)
            return z

        h = self.walk(x.shape[0], pick, n_groups=n_groups)
        return EncodeResult(LatentPrefix(zs, x.shape[0]), posts, priors, h)

    def elbo(self, x: torch.Tensor, rng: Rng) -> ElboResult:
        enc = self.encode(x, rng)
        out = self.decode_stream(enc.h, x.shape[0])
        recon = pixel_log_likelihood(out, x)
        kls = [kl_elementwise(q, p).flatten(1).sum(dim=1) for q, p in zip(enc.posteriors, enc.priors)]
        return ElboResult(recon - torch.stack(kls).sum(dim=0), recon, kls)

    def _check_prefix(self, prefix: LatentPrefix) -> None:
        if prefix.k > self.spec.n_groups:
            raise ValueError(f"prefix has {prefix.k} groups, model has {self.spec.n_groups}")
        for l, z in enumerate(prefix.groups):
            if tuple(z.shape[1:]) != self.spec.groups[l]:
                raise ValueError(f"group {l} shape {tuple(z.shape[1:])} != spec {self.spec.groups[l]}")


# functional aliases

def prior_rollout(model: HVAE, k: int, rng: Rng, batch: int = 1) -> LatentPrefix:
    return model.prior_rollout(k, rng, batch)


def complete_and_decode(model: HVAE, prefix: LatentPrefix, rng: Rng, mode: str = "sample") -> torch.Tensor:
    return model.complete_and_decode(prefix, rng, mode)


def encode(model: HVAE, x: torch.Tensor, rng: Rng) -> EncodeResult:
    return model.encode(x, rng)


def elbo(model: HVAE, x: torch.Tensor, rng: Rng) -> ElboResult:
    return model.elbo(x, rng)
