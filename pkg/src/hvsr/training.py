"""Training loops for the VAE (negative ELBO) and the LR encoder (KL matching).

Batch composition and sampling noise at step ``t`` are pure functions of
``(seed, t)``, so a run resumed from a saved training state replays exactly.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import seeding
from .checkpoint import parameter_hash, save_lr_encoder, save_vae
from .data import Dataset
from .degradation import DegradationOperator, downsample
from .errors import ParentMismatchError, TrainingAborted
from .hvae import HVAE
from .lr_encoder import LrEncoder, lr_encoder_loss

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_SKIPS = 50
_TRAIN, _VAL = 11, 12


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    max_iterations: int = 20_000
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-3
    max_lr_reductions: int = 3
    eval_interval: int = 250
    val_batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 200.0
    deterministic: bool = True

    def __post_init__(self):
        for f in ("batch_size", "learning_rate", "max_iterations", "plateau_patience", "plateau_threshold",
                  "eval_interval", "val_batch_size", "eps", "grad_clip_norm"):
            if not getattr(self, f) > 0:
                raise ValueError(f"train.{f} must be positive, got {getattr(self, f)!r}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"train.plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("optimizer betas must lie in [0, 1)")
        if self.seed < 0 or self.max_lr_reductions < 0:
            raise ValueError("seed and max_lr_reductions must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown train keys {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            default = getattr(cls, k)
            out[k] = type(default)(v) if not isinstance(default, bool) else bool(v)
        return cls(**out)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# plateau schedule


@dataclass
class PlateauSchedule:
    """Multiply the LR by ``factor`` after ``patience`` evaluations without a
    relative improvement larger than ``threshold``; at most ``max_reductions`` times."""

    lr: float
    patience: int = 10
    factor: float = 0.1
    threshold: float = 1e-3
    max_reductions: int = 3
    best: float = math.inf
    bad_evals: int = 0
    reductions: int = 0

    def step(self, value: float) -> bool:
        """Record one evaluation; returns whether it improved on the best.

        Non-finite values count as evaluations without improvement.
        """
        first = math.isinf(self.best)
        if math.isfinite(value) and (first or self.best - value > self.threshold * abs(self.best)):
            self.best = value
            self.bad_evals = 0
            return True
        self.bad_evals += 1
        if self.bad_evals >= self.patience and self.reductions < self.max_reductions:
            self.lr *= self.factor
            self.reductions += 1
            self.bad_evals = 0
        return False

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauSchedule":
        return cls(cfg.learning_rate, cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold,
                   cfg.max_lr_reductions)


def plateau_lrs(values, cfg: TrainConfig) -> list[float]:
    """LR in force after each evaluation of ``values``."""
    sched = PlateauSchedule.from_config(cfg)
    out = []
    for v in values:
        sched.step(v)
        out.append(sched.lr)
    return out


# --------------------------------------------------------------------------
# shared loop


@dataclass
class HistoryRow:
    step: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    history: list[HistoryRow] = field(default_factory=list)
    skipped_steps: int = 0
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def write_history_csv(history: list[HistoryRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.step, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
    return path


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _TRAIN, step])
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def set_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class _Loop:
    """Shared optimization skeleton; ``on_eval`` may read ``self.result`` and ``self.sched``."""

    def __init__(self, params, optimizer, cfg: TrainConfig, state: dict | None = None):
        self.params = params
        self.optimizer = optimizer
        self.cfg = cfg
        self.sched = PlateauSchedule.from_config(cfg)
        self.result = TrainResult()
        self.step = 0
        if state is not None:
            optimizer.load_state_dict(state["optimizer"])
            self.sched = PlateauSchedule(**state["schedule"])
            self.result.history = [HistoryRow(**r) for r in state["history"]]
            self.result.skipped_steps = state["skipped"]
            self.step = state["step"]

    def state(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "schedule": asdict(self.sched),
            "history": [asdict(r) for r in self.result.history],
            "skipped": self.result.skipped_steps,
            "step": self.step,
        }

    def _evaluate(self, train_mean, val_loss, on_eval):
        v = val_loss()
        metric = train_mean if v is None else v
        # without a validation split there is nothing to measure before the first step
        improved = self.sched.step(metric) if not (v is None and self.step == 0) else False
        self.result.history.append(HistoryRow(self.step, train_mean, math.nan if v is None else v, self.sched.lr))
        on_eval(self.step, improved)

    def run(self, batch_loss: Callable[[np.ndarray, torch.Generator], torch.Tensor],
            val_loss: Callable[[], float | None], n_train: int, on_eval: Callable[[int, bool], None]) -> TrainResult:
        cfg = self.cfg
        if self.step == 0 and not self.result.history:
            self._evaluate(math.nan, val_loss, on_eval)
        running, consecutive_skips = [], 0
        while self.step < cfg.max_iterations:
            for g in self.optimizer.param_groups:
                g["lr"] = self.sched.lr
            idx = batch_indices(n_train, cfg.batch_size, cfg.seed, self.step)
            loss = batch_loss(idx, seeding.generator(cfg.seed, _TRAIN, self.step))
            self.optimizer.zero_grad(set_to_none=True)
            ok = bool(torch.isfinite(loss))
            if ok:
                loss.backward()
                norm = torch.nn.utils.clip_grad_norm_(self.params, cfg.grad_clip_norm)
                ok = bool(torch.isfinite(norm))
            if ok:
                self.optimizer.step()
                running.append(float(loss.detach()))
                consecutive_skips = 0
            else:
                self.result.skipped_steps += 1
                consecutive_skips += 1
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                    raise TrainingAborted(f"{consecutive_skips} consecutive non-finite steps at step {self.step}")
            self.step += 1
            if self.step % cfg.eval_interval == 0 or self.step == cfg.max_iterations:
                self._evaluate(float(np.mean(running)) if running else math.nan, val_loss, on_eval)
                running = []
        return self.result


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


# --------------------------------------------------------------------------
# VAE


def vae_loss(model: HVAE, x: torch.Tensor, rng) -> torch.Tensor:
    """Negative ELBO per image dimension, averaged over the batch."""
    n_dims = math.prod(model.spec.image_shape)
    return (-model.elbo(x, rng).elbo / n_dims).mean()


def train_vae(model: HVAE, dataset: Dataset, cfg: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    """Adam on the negative ELBO with gradient clipping and a plateau LR schedule.

    With ``out_dir`` set, ``best.ckpt`` is written on every validation
    improvement and ``last.ckpt`` at the end; ``train_state.pt`` is refreshed
    at every evaluation so the run can be resumed with ``resume``.
    """
    set_determinism(cfg.deterministic)
    train = dataset.train.to(model.dtype)
    val = dataset.val[: cfg.val_batch_size].to(model.dtype)
    out_dir = _prepare(out_dir)
    state = torch.load(resume, weights_only=False) if resume is not None else None
    if state is not None:
        model.load_state_dict(state["model"])
    params = list(model.parameters())
    loop = _Loop(params, _adam(params, cfg), cfg, state)

    def batch_loss(idx, gen):
        model.train()
        return vae_loss(model, train[idx], gen)

    @torch.no_grad()
    def val_loss():
        if len(val) == 0:
            return None
        model.eval()
        return float(vae_loss(model, val, seeding.generator(cfg.seed, _VAL)))

    def on_eval(step, improved):
        if out_dir is None:
            return
        if improved and step > 0:
            loop.result.best_checkpoint = save_vae(out_dir / "best.ckpt", model, step=step, seed=cfg.seed)
        torch.save({"model": model.state_dict(), **loop.state()}, out_dir / "train_state.pt")

    result = loop.run(batch_loss, val_loss, len(train), on_eval)
    model.eval()
    if out_dir is not None:
        result.checkpoint = save_vae(out_dir / "last.ckpt", model, step=loop.step, seed=cfg.seed)
        write_history_csv(result.history, out_dir / "history.csv")
    return result


def _prepare(out_dir) -> Path | None:
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


# --------------------------------------------------------------------------
# LR encoder


def lrenc_loss(model: HVAE, lrenc: LrEncoder, x: torch.Tensor, y: torch.Tensor, rng) -> torch.Tensor:
    """KL matching loss per image dimension, averaged over the batch."""
    n_dims = math.prod(model.spec.image_shape)
    return (lr_encoder_loss(model, lrenc, x, y, rng) / n_dims).mean()


def train_lr_encoder(model: HVAE, lrenc: LrEncoder, dataset: Dataset, op: DegradationOperator | None,
                     cfg: TrainConfig, out_dir=None, parent_hash: str | None = None, resume=None) -> TrainResult:
    """Optimize only ``psi``; ``theta`` and ``phi`` are checked bit-identical afterwards.

    ``op=None`` trains on ``y = x`` (scale 1).
    """
    set_determinism(cfg.deterministic)
    if out_dir is not None and parent_hash is None:
        raise ValueError("saving an LR-encoder checkpoint needs the parent VAE hash")
    if (op.scale if op is not None else 1) != lrenc.scale:
        raise ValueError(f"operator scale does not match the encoder's x{lrenc.scale}")
    lr = (lambda x: x) if op is None else (lambda x: downsample(op, x))
    train = dataset.train.to(model.dtype)
    val = dataset.val[: cfg.val_batch_size].to(model.dtype)
    with torch.no_grad():
        train_y, val_y = lr(train), lr(val)
    out_dir = _prepare(out_dir)
    state = torch.load(resume, weights_only=False) if resume is not None else None
    if state is not None:
        if state.get("parent_hash") != parent_hash:
            raise ParentMismatchError("training state was produced against a different parent VAE")
        lrenc.load_state_dict(state["model"])

    frozen_before = parameter_hash(model)
    was_trainable = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    model.eval()
    params = list(lrenc.parameters())
    loop = _Loop(params, _adam(params, cfg), cfg, state)

    def batch_loss(idx, gen):
        lrenc.train()
        return lrenc_loss(model, lrenc, train[idx], train_y[idx], gen)

    @torch.no_grad()
    def val_loss():
        if len(val) == 0:
            return None
        lrenc.eval()
        return float(lrenc_loss(model, lrenc, val, val_y, seeding.generator(cfg.seed, _VAL)))

    def on_eval(step, improved):
        if out_dir is None:
            return
        if improved and step > 0:
            loop.result.best_checkpoint = save_lr_encoder(out_dir / "best.ckpt", lrenc, parent_hash,
                                                          step=step, seed=cfg.seed)
        torch.save({"model": lrenc.state_dict(), "parent_hash": parent_hash, **loop.state()},
                   out_dir / "train_state.pt")

    try:
        result = loop.run(batch_loss, val_loss, len(train), on_eval)
    finally:
        for p, flag in zip(model.parameters(), was_trainable):
            p.requires_grad_(flag)
    if parameter_hash(model) != frozen_before:
        raise RuntimeError("frozen VAE parameters changed during LR-encoder training")
    lrenc.eval()
    if out_dir is not None:
        result.checkpoint = save_lr_encoder(out_dir / "last.ckpt", lrenc, parent_hash, step=loop.step, seed=cfg.seed)
        write_history_csv(result.history, out_dir / "history.csv")
    return result
