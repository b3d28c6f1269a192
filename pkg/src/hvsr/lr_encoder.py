"""Low-resolution encoder ``q_psi(z_<k | y)`` and the super-resolution sampler.

The encoder owns only a bottom-up path over the LR image and one posterior
head per predicted group. The top-down stream that conditions each head is
computed by the (frozen) generative blocks of the parent VAE.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import seeding
from .degradation import DegradationOperator, ShapeError, downsample, project_consistent, rmse
from .hvae import (HVAE, BottomUp, DiagonalGaussian, HierarchySpec, LatentPrefix, PosteriorHead,
                   kl_elementwise, pixel_log_likelihood, sample_gaussian)

# published decoder layout of the FFHQ-256 very deep VAE (resolution x count, "m" = unpool block)
VDVAE_FFHQ256_DEC_BLOCKS = "1x2,4m1,4x3,8m4,8x4,16m8,16x9,32m16,32x21,64m32,64x13,128m64,128x7,256m128"


def parse_block_string(s: str) -> list[int]:
    """Group resolutions encoded by a decoder block string, coarsest first."""
    out = []
    for part in s.split(","):
        if "x" in part:
            res, count = part.split("x")
            out += [int(res)] * int(count)
        elif "m" in part:
            out.append(int(part.split("m")[0]))
        else:
            out.append(int(part))
    return out


def vdvae_ffhq256_spec() -> HierarchySpec:
    """Latent layout of the FFHQ-256 model: 66 groups of 16 channels, width 512.

    Building the network from this spec is possible but far beyond desk scale;
    it exists so the reference configurations resolve ``k`` honestly.
    """
    res = parse_block_string(VDVAE_FFHQ256_DEC_BLOCKS)
    return HierarchySpec(
        groups=tuple((16, r, r) for r in res),
        widths={r: 512 for r in set(res) | {256}},
        image_shape=(3, 256, 256),
        bottleneck=0.25,
    )


def select_k(layout: HierarchySpec | Sequence[int], lr_resolution: int) -> int:
    """Number of leading groups whose spatial size is <= ``lr_resolution``."""
    res = layout.group_res if isinstance(layout, HierarchySpec) else list(layout)
    k = 0
    for r in res:
        if r > lr_resolution:
            break
        k += 1
    return k


@dataclass
class SrSampleSet:
    lr_input: torch.Tensor  # (C, h, w)
    samples: torch.Tensor  # (n, C, H, W)
    projected: bool
    seeds: list[int]

    def __len__(self):
        return len(self.samples)


@dataclass
class ConditionalBound:
    bound: torch.Tensor
    recon: torch.Tensor
    loss: torch.Tensor


def _width_at(widths: dict[int, int], res: int) -> int:
    if res in widths:
        return widths[res]
    coarser = [r for r in widths if r <= res]
    return widths[max(coarser)] if coarser else widths[min(widths)]


class LrEncoder(nn.Module):
    def __init__(self, spec: HierarchySpec, scale: int, k: int | None = None, width_factor: float = 0.5):
        super().__init__()
        c, size, _ = spec.image_shape
        if size % scale:
            raise ValueError(f"scale {scale} does not divide image size {size}")
        self.spec = spec
        self.scale = int(scale)
        self.width_factor = float(width_factor)
        self.lr_res = size // scale
        self.k = select_k(spec, self.lr_res) if k is None else int(k)
        if not 1 <= self.k <= spec.n_groups:
            raise ValueError(f"k={self.k} outside [1, {spec.n_groups}]")
        hr_widths = spec.width_map
        feat_res = sorted({r for r in spec.resolutions if r <= self.lr_res} | {self.lr_res}, reverse=True)
        self.lr_widths = {r: max(1, int(round(_width_at(hr_widths, r) * width_factor))) for r in feat_res}
        self.psi = nn.ModuleDict({
            "bottom_up": BottomUp(c, self.lr_res, feat_res, self.lr_widths, spec.blocks_per_res, spec.bottleneck),
            "heads": nn.ModuleList([
                PosteriorHead(hr_widths[gres], self.lr_widths[min(gres, self.lr_res)], zc, gres, spec.bottleneck)
                for zc, gres, _ in spec.groups[: self.k]
            ]),
        })

    @classmethod
    def copy_of_hr_encoder(cls, model: HVAE, k: int) -> "LrEncoder":
        """Scale-1 encoder whose weights are an exact copy of the HR encoder's parts."""
        enc = cls(model.spec, 1, k=k, width_factor=1.0)
        enc.psi["bottom_up"].load_state_dict(model.phi.bottom_up.state_dict())
        for l in range(k):
            enc.psi["heads"][l].load_state_dict(model.phi.heads[l].state_dict())
        return enc

    def frozen_refs(self, model: HVAE) -> list[str]:
        """Names of the shared top-down parameters this encoder reads."""
        names = [n for l in range(self.k) for n in model.sharing_map()[l]]
        names += [n for n, _ in model.theta.named_parameters(prefix="theta") if n.startswith(("theta.biases", "theta.adapters"))]
        return sorted(names)

    def check_input(self, y: torch.Tensor) -> None:
        expected = (self.spec.image_shape[0], self.lr_res, self.lr_res)
        if tuple(y.shape[1:]) != expected:
            raise ShapeError(f"LR input shape {tuple(y.shape[1:])} does not match x{self.scale} input {expected}")

    def features(self, y: torch.Tensor) -> list[torch.Tensor]:
        """Per-group conditioning feature from the LR bottom-up path."""
        self.check_input(y)
        acts = self.psi["bottom_up"](y)
        feats = []
        for _, gres, _ in self.spec.groups[: self.k]:
            f = acts[min(gres, self.lr_res)]
            if gres > self.lr_res:
                f = F.interpolate(f, size=(gres, gres), mode="nearest")
            feats.append(f)
        return feats


def _teacher_pass(model: HVAE, lrenc: LrEncoder, x: torch.Tensor, y: torch.Tensor, rng, op=None):
    """HR posterior draws for ``l < k`` (constant w.r.t. every parameter) plus
    the LR encoder's parameters evaluated on the same stream."""
    if op is not None:
        err = rmse(downsample(op, x), y)
        if err > 1e-3:
            warnings.warn(f"(x, y) pair is inconsistent with the operator: rmse {err:.3g}", stacklevel=3)
    with torch.no_grad():
        acts = model.bottom_up(x)
        zs, posts, streams = [], [], []

        def pick(l, h, prior):
            post = model.phi.heads[l](h, acts[model.spec.groups[l][1]])
            z = sample_gaussian(post, rng)
            zs.append(z)
            posts.append(post)
            streams.append(h)
            return z

        h_k = model.walk(x.shape[0], pick, n_groups=lrenc.k)
    feats = lrenc.features(y)
    lr_posts = [lrenc.psi["heads"][l](streams[l], feats[l]) for l in range(lrenc.k)]
    return LatentPrefix(zs, x.shape[0]), posts, lr_posts, h_k


def _kl_sum(qs: list[DiagonalGaussian], ps: list[DiagonalGaussian]) -> torch.Tensor:
    return torch.stack([kl_elementwise(q, p).flatten(1).sum(dim=1) for q, p in zip(qs, ps)]).sum(dim=0)


def lr_encoder_loss(model: HVAE, lrenc: LrEncoder, x: torch.Tensor, y: torch.Tensor, rng,
                    op: DegradationOperator | None = None) -> torch.Tensor:
    """Per-example ``sum_{l<k} KL(q_phi(z_l | z_<l, x) || q_psi(z_l | z_<l, y))``.

    The conditioning ``z_<l`` is drawn from the HR encoder and shared by both
    sides. Only ``psi`` receives gradients.
    """
    _, posts, lr_posts, _ = _teacher_pass(model, lrenc, x, y, rng, op)
    return _kl_sum(posts, lr_posts)


def lr_encode_group_params(model: HVAE, lrenc: LrEncoder, y: torch.Tensor,
                           teacher_prefix: LatentPrefix) -> list[DiagonalGaussian]:
    """``q_psi(z_l | z_<l, y)`` for ``l < k`` with ``z_<l`` taken from ``teacher_prefix``."""
    if teacher_prefix.k < lrenc.k:
        raise ValueError(f"teacher prefix has {teacher_prefix.k} groups; encoder predicts {lrenc.k}")
    feats = lrenc.features(y)
    params = []

    def pick(l, h, prior):
        params.append(lrenc.psi["heads"][l](h, feats[l]))
        return teacher_prefix.groups[l]

    model.walk(y.shape[0], pick, n_groups=lrenc.k)
    return params


def lr_sample_prefix(model: HVAE, lrenc: LrEncoder, y: torch.Tensor, rng) -> tuple[LatentPrefix, list[DiagonalGaussian]]:
    """Draw ``z_<k ~ q_psi(. | y)`` feeding each sample forward."""
    feats = lrenc.features(y)
    zs, params = [], []

    def pick(l, h, prior):
        q = lrenc.psi["heads"][l](h, feats[l])
        z = sample_gaussian(q, rng)
        params.append(q)
        zs.append(z)
        return z

    model.walk(y.shape[0], pick, n_groups=lrenc.k)
    return LatentPrefix(zs, y.shape[0]), params


def conditional_elbo(model: HVAE, lrenc: LrEncoder, x: torch.Tensor, y: torch.Tensor, rng,
                     op: DegradationOperator | None = None) -> ConditionalBound:
    """Single-draw estimate of the conditional lower bound, returned decomposed.

    ``recon`` decodes after completing ``z_>=k`` from the conditional prior;
    ``loss`` is the LR-encoder KL on the same draw of ``z_<k``.
    """
    prefix, posts, lr_posts, h_k = _teacher_pass(model, lrenc, x, y, rng, op)
    loss = _kl_sum(posts, lr_posts)
    with torch.no_grad():
        def pick(l, h, prior):
            return sample_gaussian(prior, rng)

        h = model.walk(x.shape[0], pick, start=(lrenc.k, h_k))
        out = model.decode_stream(h, x.shape[0])
        recon = pixel_log_likelihood(out, x)
    return ConditionalBound(recon - loss, recon, loss)


@torch.no_grad()
def sr_sample(model: HVAE, lrenc: LrEncoder, y: torch.Tensor, n: int, project: bool = False,
              op: DegradationOperator | None = None, seed: int = 0, mode: str = "sample") -> SrSampleSet:
    """Draw ``n`` super-resolved images for one LR image ``y`` of shape ``(C, h, w)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if y.ndim == 4:
        if y.shape[0] != 1:
            raise ValueError("sr_sample takes a single LR image")
        y = y[0]
    lrenc.check_input(y[None])
    if project and op is None:
        raise ValueError("projection needs the degradation operator")
    if op is not None and op.scale != lrenc.scale:
        raise ShapeError(f"operator scale {op.scale} != encoder scale {lrenc.scale}")
    seeds = [seeding.derive_seed(seed, i) for i in range(n)]
    rngs = [torch.Generator().manual_seed(s) for s in seeds]
    y_rep = y[None].expand(n, -1, -1, -1).to(model.dtype)
    prefix, _ = lr_sample_prefix(model, lrenc, y_rep, rngs)
    samples = model.complete_and_decode(prefix, rngs, mode=mode)
    if project:
        samples = project_consistent(op, samples, y_rep)
    return SrSampleSet(y, samples, project, seeds)
