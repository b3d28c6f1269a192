"""Monte-Carlo estimators of low-resolution pairwise distance and consistency error.

Every stochastic cell draws from its own generator derived from
``(seed, stream tag, index...)``, so results do not depend on batching or on
the order cells are evaluated in.

All distances are RMSE on the 0-255 pixel scale.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from . import seeding
from .degradation import DegradationOperator, batch_rmse, lr_view
from .hvae import HVAE, LatentPrefix
from .lr_encoder import LrEncoder, SrSampleSet, sr_sample

# stream tags keep the derived seeds of different estimators apart
_CODE, _COMPLETION, _HR_POSTERIOR, _SR = 1, 2, 3, 4


@dataclass(frozen=True)
class EstimatorRow:
    k: int
    s: int
    mean: float
    std_error: float
    n_pairs: int


@dataclass
class EstimatorTable:
    rows: list[EstimatorRow] = field(default_factory=list)

    def get(self, k: int, s: int) -> EstimatorRow:
        for r in self.rows:
            if r.k == k and r.s == s:
                return r
        raise KeyError((k, s))

    @property
    def ks(self) -> list[int]:
        return sorted({r.k for r in self.rows})

    @property
    def scales(self) -> list[int]:
        return sorted({r.s for r in self.rows})


@dataclass
class StdMap:
    data: torch.Tensor  # (C, H, W)
    k: int
    n_samples: int


def _summarize(per_unit: np.ndarray) -> tuple[float, float]:
    """Mean and standard error over independent units (codes or images)."""
    n = len(per_unit)
    mean = float(per_unit.mean())
    se = float(per_unit.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def _pairwise_mean(samples: torch.Tensor) -> float:
    """Mean RMSE over all unordered pairs of the leading axis."""
    pairs = list(itertools.combinations(range(len(samples)), 2))
    a = samples[[i for i, _ in pairs]]
    b = samples[[j for _, j in pairs]]
    return float(batch_rmse(a, b).mean())


def _ops_for(s_list: Sequence[int], ops: Mapping[int, DegradationOperator | None] | None) -> dict:
    out = {}
    for s in s_list:
        if s == 1:
            out[s] = None
        elif ops is not None and s in ops:
            out[s] = ops[s]
        else:
            out[s] = DegradationOperator(scale=s)
    return out


# --------------------------------------------------------------------------
# estimators


@torch.no_grad()
def estimate_uk(model: HVAE, k_list: Iterable[int], s_list: Iterable[int],
                ops: Mapping[int, DegradationOperator | None] | None = None,
                n_codes: int = 50, n_samples: int = 5, seed: int = 0, mode: str = "sample") -> EstimatorTable:
    """Average pairwise distance after downsampling between completions of a shared prefix.

    For each code, a full latent is drawn from the prior and truncated to
    every ``k``; ``n_samples`` completions are decoded per ``k``. Per code the
    pairwise RMSE is averaged over all pairs; the reported value is the mean
    over codes, with the standard error taken across codes.

    ``s = 1`` means no downsampling. Operators default to block averaging.
    """
    k_list, s_list = sorted(set(k_list)), sorted(set(s_list))
    if n_codes < 1 or n_samples < 2:
        raise ValueError("need n_codes >= 1 and n_samples >= 2")
    L1 = model.spec.n_groups
    if any(not 0 <= k <= L1 for k in k_list):
        raise ValueError(f"k values must lie in [0, {L1}]")
    if any(s < 1 or model.spec.image_shape[1] % s for s in s_list):
        raise ValueError(f"scales must divide the image size {model.spec.image_shape[1]}")
    ops = _ops_for(s_list, ops)
    code_rngs = seeding.generators(seed, (_CODE,), n_codes)
    codes = model.prior_rollout(L1, code_rngs, batch=n_codes)
    per_code = {(k, s): np.empty(n_codes) for k in k_list for s in s_list}
    for k in k_list:
        prefix = codes.truncate(k).repeat(n_samples)
        rngs = [seeding.generator(seed, _COMPLETION, i, k, j) for i in range(n_codes) for j in range(n_samples)]
        x = model.complete_and_decode(prefix, rngs, mode=mode)
        x = x.reshape(n_codes, n_samples, *x.shape[1:])
        for s in s_list:
            for i in range(n_codes):
                per_code[(k, s)][i] = _pairwise_mean(lr_view(ops[s], x[i]))
    n_pairs = n_codes * math.comb(n_samples, 2)
    rows = [EstimatorRow(k, s, *_summarize(per_code[(k, s)]), n_pairs) for k in k_list for s in s_list]
    return EstimatorTable(rows)


# the model-only consistency-error formula is the same computation
estimate_ce_prior = estimate_uk


@torch.no_grad()
def estimate_ce_via_hr_encoder(model: HVAE, images: torch.Tensor, k: int, s: int,
                               op: DegradationOperator | None = None, n_samples: int = 5,
                               seed: int = 0, mode: str = "sample") -> EstimatorRow:
    """``E_x E_{q_phi(z_<k|x)} E_{p(x~|z_<k)} rmse(H x~, H x)``.

    A fresh posterior prefix is drawn for every completion.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    if s > 1 and op is None:
        op = DegradationOperator(scale=s)
    if s == 1:
        op = None
    n = len(images)
    x = images.to(model.dtype).repeat_interleave(n_samples, dim=0)
    rngs = [seeding.generator(seed, _HR_POSTERIOR, i, j) for i in range(n) for j in range(n_samples)]
    prefix = model.encode(x, rngs, n_groups=k).prefix if k > 0 else LatentPrefix([], len(x))
    x_tilde = model.complete_and_decode(prefix, rngs, mode=mode)
    d = batch_rmse(lr_view(op, x_tilde), lr_view(op, x)).numpy().reshape(n, n_samples)
    return EstimatorRow(k, s, *_summarize(d.mean(axis=1)), n * n_samples)


@torch.no_grad()
def estimate_ce_empirical(model: HVAE, lrenc: LrEncoder, images: torch.Tensor, op: DegradationOperator,
                          n_samples: int = 5, project: bool = False, seed: int = 0,
                          mode: str = "sample") -> EstimatorRow:
    """``E_y E_{p_SR(x|y)} rmse(H x, y)`` with ``y = H x`` for every dataset image."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    if op.scale != lrenc.scale:
        raise ValueError(f"operator scale {op.scale} != encoder scale {lrenc.scale}")
    per_image = np.empty(len(images))
    for i, x in enumerate(images):
        y = lr_view(op, x[None].to(model.dtype))[0]
        sset = sr_sample(model, lrenc, y, n_samples, project=project, op=op,
                         seed=seeding.derive_seed(seed, _SR, i), mode=mode)
        lr_samples = lr_view(op, sset.samples)
        per_image[i] = float(batch_rmse(lr_samples, y.expand_as(lr_samples)).mean())
    return EstimatorRow(lrenc.k, op.scale, *_summarize(per_image), len(images) * n_samples)


@torch.no_grad()
def pixelwise_std(model: HVAE, prefix: LatentPrefix, n_samples: int, seed: int = 0,
                  mode: str = "sample") -> StdMap:
    """Per-pixel population std over ``n_samples`` completions of a one-row prefix."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    if prefix.batch_size != 1:
        raise ValueError("pixelwise_std takes a single-row prefix")
    rngs = seeding.generators(seed, (_COMPLETION, prefix.k), n_samples)
    x = model.complete_and_decode(prefix.repeat(n_samples), rngs, mode=mode).to(torch.float64)
    return StdMap(x.std(dim=0, unbiased=False).to(torch.float32), prefix.k, n_samples)


def diversity_metrics(sset: SrSampleSet, op: DegradationOperator) -> tuple[float, float]:
    """Mean pairwise RMSE of the samples in HR space and after downsampling."""
    if len(sset) < 2:
        raise ValueError("need at least two samples")
    return _pairwise_mean(sset.samples), _pairwise_mean(lr_view(op, sset.samples))


# --------------------------------------------------------------------------
# output


def emit_table_csv(table: EstimatorTable, path) -> Path:
    """One row per ``k``; columns ``rmse_s{s}_mean, rmse_s{s}_stderr`` per scale."""
    if not table.rows:
        raise ValueError("empty table")
    path = Path(path)
    scales = table.scales
    header = ["k"] + [f"rmse_s{s}_{c}" for s in scales for c in ("mean", "stderr")]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for k in table.ks:
            row = [k]
            for s in scales:
                r = table.get(k, s)
                row += [repr(r.mean), repr(r.std_error)]
            w.writerow(row)
    return path


def read_table_csv(path) -> EstimatorTable:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = []
        for rec in reader:
            k = int(rec["k"])
            for col in reader.fieldnames[1:]:
                if col.endswith("_mean"):
                    s = int(col[len("rmse_s"):-len("_mean")])
                    rows.append(EstimatorRow(k, s, float(rec[col]), float(rec[f"rmse_s{s}_stderr"]), 0))
    return EstimatorTable(rows)


def save_std_map(smap: StdMap, path) -> tuple[Path, Path]:
    """Write an 8-bit grayscale PNG (channel mean, linearly scaled) and a sidecar JSON."""
    from PIL import Image

    path = Path(path)
    gray = smap.data.to(torch.float64).mean(dim=0).numpy()
    top = float(gray.max())
    scale = 255.0 / top if top > 0 else 0.0
    Image.fromarray(np.round(gray * scale).astype(np.uint8), mode="L").save(path, format="PNG")
    meta = path.with_suffix(".json")
    meta.write_text(json.dumps({
        "k": smap.k, "n_samples": smap.n_samples,
        "pixel_value": "std_on_0_1_scale * scale", "scale": scale, "max_std": top,
    }, indent=1) + "\n")
    return path, meta
