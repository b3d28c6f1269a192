"""Command-line entry point: ``hvsr <command> [--config FILE] [--train.x V ...]``.

Exit codes: 0 success, 1 internal error, 2 user or config error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import torch

from . import analysis
from .checkpoint import content_hash, load_lr_encoder, load_vae
from .config import MODES, ExperimentConfig, load_config, parse_overrides
from .data import Dataset, from_tensor, ingest_dataset, load_image, save_image, toy_faces, write_toy_dataset
from .degradation import upsample_nearest
from .errors import CheckpointError, ConfigError, UserError
from .hvae import HVAE
from .lr_encoder import LrEncoder, sr_sample
from .training import set_determinism, train_lr_encoder, train_vae

log = logging.getLogger("hvsr")

# which config section `--train.*` addresses for each command
_TRAIN_SECTION = {"train-vae": "vae", "train-lrenc": "lrenc"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output root (overrides paths.out_dir)")
    common.add_argument("--run-name", help="run directory name; default <command>-<timestamp>")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hvsr", description="Hierarchical-VAE super-resolution experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toydata", parents=[common], help="write procedural toy face images")
    g.add_argument("dest", type=Path, help="directory to write PNG files into")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=32)

    t = sub.add_parser("train-vae", parents=[common], help="train the hierarchical VAE")
    t.add_argument("--resume", type=Path, help="train_state.pt of an interrupted run")

    t = sub.add_parser("train-lrenc", parents=[common], help="train the LR encoder against a frozen VAE")
    t.add_argument("--resume", type=Path, help="train_state.pt of an interrupted run")

    sub.add_parser("analyze-uk", parents=[common], help="tabulate U_k^s for the configured k and s lists")

    e = sub.add_parser("evaluate", parents=[common], help="the three consistency-error estimators side by side")
    e.add_argument("--project", action="store_true", help="also evaluate projected SR samples")

    s = sub.add_parser("super-resolve", parents=[common], help="sample HR images for one LR input")
    s.add_argument("input", type=Path, help="LR image file")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--project", action="store_true", help="apply the consistency projection")
    s.add_argument("--hr", type=Path, help="optional ground-truth HR image shown in the grid")
    s.add_argument("--mode", choices=("sample", "mean"), help="pixel decoding mode")
    return p


# --------------------------------------------------------------------------
# helpers


def _run_dir(cfg: ExperimentConfig, args) -> Path:
    root = Path(args.out) if args.out is not None else Path(cfg.paths.out_dir)
    name = args.run_name or f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run = root / name
    run.mkdir(parents=True, exist_ok=True)
    cfg.dump(run / "config.yaml")
    return run


def _dataset(cfg: ExperimentConfig, spec) -> Dataset:
    if cfg.paths.data_dir is not None:
        try:
            return ingest_dataset(cfg.paths.data_dir, spec.image_shape, cfg.data.val_fraction, cfg.seed)
        except (FileNotFoundError, ValueError) as e:
            raise UserError(str(e)) from e
    c, size, _ = spec.image_shape
    images = toy_faces(cfg.data.toy_n, seed=cfg.data.toy_seed, size=size, channels=c)
    return from_tensor(images, cfg.data.val_fraction, cfg.seed)


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is not set")
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{what} {path} not found" + (" (needed to verify the parent hash)"
                                                            if "vae" in what else ""))
    return path


def _load_vae(cfg) -> tuple[HVAE, str]:
    path = _need(cfg.paths.vae_checkpoint, "paths.vae_checkpoint")
    model, _ = load_vae(path)
    return model, content_hash(path)


def _load_pair(cfg):
    model, parent = _load_vae(cfg)
    path = _need(cfg.paths.lrenc_checkpoint, "paths.lrenc_checkpoint")
    lrenc, _ = load_lr_encoder(path, parent)
    return model, lrenc


def _eval_images(cfg, spec) -> torch.Tensor:
    ds = _dataset(cfg, spec)
    pool = ds.val if len(ds.val_idx) else ds.train
    return pool[: cfg.analysis.n_images]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(v)


# --------------------------------------------------------------------------
# commands


def cmd_gen_toydata(args, cfg) -> int:
    if args.n < 1:
        raise UserError(f"--n must be >= 1, got {args.n}")
    paths = write_toy_dataset(args.dest, args.n, seed=cfg.seed, size=args.size)
    print(f"wrote {len(paths)} images to {args.dest}")
    return 0


def cmd_train_vae(args, cfg) -> int:
    spec = cfg.hierarchy()
    run = _run_dir(cfg, args)
    torch.manual_seed(cfg.seed)
    model = HVAE(spec)
    ds = _dataset(cfg, spec)
    resume = _need(args.resume, "--resume state") if args.resume else None
    result = train_vae(model, ds, cfg.vae, out_dir=run, resume=resume)
    last = result.history[-1]
    print(f"final train_loss {_fmt(last.train_loss)} val_loss {_fmt(last.val_loss)} lr {last.lr!r}")
    print(f"checkpoint {result.checkpoint}")
    return 0


def cmd_train_lrenc(args, cfg) -> int:
    model, parent = _load_vae(cfg)
    if model.spec != cfg.hierarchy():
        log.warning("config spec differs from the checkpoint; using the checkpoint's")
    op = cfg.operator()
    run = _run_dir(cfg, args)
    torch.manual_seed(cfg.seed)
    k = cfg.lrenc.k
    lrenc = LrEncoder(model.spec, op.scale, k=k, width_factor=cfg.lrenc.width_factor)
    ds = _dataset(cfg, model.spec)
    result = train_lr_encoder(model, lrenc, ds, op, cfg.lrenc.train_config(), out_dir=run,
                              parent_hash=parent, resume=_need(args.resume, "--resume state") if args.resume else None)
    last = result.history[-1]
    print(f"k {lrenc.k} scale {lrenc.scale}")
    print(f"final train_loss {_fmt(last.train_loss)} val_loss {_fmt(last.val_loss)} lr {last.lr!r}")
    print(f"checkpoint {result.checkpoint}")
    return 0


def _ops(cfg, s_list) -> dict:
    return {s: (None if s == 1 else cfg.operator(scale=s)) for s in s_list}


def cmd_analyze_uk(args, cfg) -> int:
    model, _ = _load_vae(cfg)
    a = cfg.analysis
    k_list = a.k_list if a.k_list is not None else list(range(model.spec.n_groups + 1))
    run = _run_dir(cfg, args)
    # uk.csv holds the configured pixel mode; uk_sample.csv / uk_mean.csv label both
    ops = _ops(cfg, a.s_list)
    for mode in (a.mode, *(m for m in MODES if m != a.mode)):
        table = analysis.estimate_uk(model, k_list, a.s_list, ops=ops, n_codes=a.n_codes,
                                     n_samples=a.n_samples, seed=cfg.seed, mode=mode)
        names = ["uk.csv", f"uk_{mode}.csv"] if mode == a.mode else [f"uk_{mode}.csv"]
        for name in names:
            print(f"wrote {analysis.emit_table_csv(table, run / name)}")
    return 0


EVALUATE_COLUMNS = ["k", "s", "ce_empirical", "ce_empirical_stderr", "ce_empirical_projected",
                    "ce_empirical_projected_stderr", "ce_hr_encoder", "ce_hr_encoder_stderr",
                    "uk_prior", "uk_prior_stderr"]


def cmd_evaluate(args, cfg) -> int:
    model, lrenc = _load_pair(cfg)
    a = cfg.analysis
    op = cfg.operator(scale=lrenc.scale)
    images = _eval_images(cfg, model.spec)
    run = _run_dir(cfg, args)
    k, s = lrenc.k, lrenc.scale
    emp = analysis.estimate_ce_empirical(model, lrenc, images, op, a.n_samples, project=False,
                                         seed=cfg.seed, mode=a.mode)
    if args.project:
        proj = analysis.estimate_ce_empirical(model, lrenc, images, op, a.n_samples, project=True,
                                              seed=cfg.seed, mode=a.mode)
        proj_vals = (proj.mean, proj.std_error)
    else:
        proj_vals = (math.nan, math.nan)
    hr = analysis.estimate_ce_via_hr_encoder(model, images, k, s, op, a.n_samples, seed=cfg.seed, mode=a.mode)
    uk = analysis.estimate_uk(model, [k], [s], ops={s: op}, n_codes=a.n_codes, n_samples=a.n_samples,
                              seed=cfg.seed, mode=a.mode).get(k, s)
    values = [k, s, emp.mean, emp.std_error, *proj_vals, hr.mean, hr.std_error, uk.mean, uk.std_error]
    path = run / "evaluate.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(EVALUATE_COLUMNS) + "\n")
        f.write(",".join(str(v) if isinstance(v, int) else _fmt(v) for v in values) + "\n")
    for name, v in zip(EVALUATE_COLUMNS[2::2], values[2::2]):
        print(f"{name} {_fmt(v)}")
    print(f"wrote {path}")
    return 0


def _read_image(path: Path, channels: int) -> torch.Tensor:
    if not path.is_file():
        raise UserError(f"image {path} not found")
    try:
        return load_image(path, channels)
    except Exception as e:  # PIL raises many types for undecodable files
        raise UserError(f"cannot decode image {path}: {e}") from e


def cmd_super_resolve(args, cfg) -> int:
    if args.n < 1:
        raise UserError(f"--n must be >= 1, got {args.n}")
    model, lrenc = _load_pair(cfg)
    c, size, _ = model.spec.image_shape
    y = _read_image(args.input, c)
    if tuple(y.shape) != (c, lrenc.lr_res, lrenc.lr_res):
        raise UserError(f"{args.input}: expected a {lrenc.lr_res}x{lrenc.lr_res} image for x{lrenc.scale}, "
                        f"got {y.shape[2]}x{y.shape[1]}")
    hr = None
    if args.hr is not None:
        hr = _read_image(args.hr, c)
        if tuple(hr.shape) != model.spec.image_shape:
            raise UserError(f"{args.hr}: expected a {size}x{size} image")
    op = cfg.operator(scale=lrenc.scale)
    run = _run_dir(cfg, args)
    sset = sr_sample(model, lrenc, y, args.n, project=args.project, op=op, seed=cfg.seed,
                     mode=args.mode or cfg.analysis.mode)
    samples = sset.samples.clamp(0, 1)
    for i, x in enumerate(samples):
        save_image(x, run / f"sample_{i:03d}.png")
    panels = [upsample_nearest(y, lrenc.scale), *samples] + ([hr] if hr is not None else [])
    save_image(torch.cat(panels, dim=-1), run / "grid.png")
    print(f"wrote {args.n} samples and grid.png to {run}")
    return 0


COMMANDS = {
    "gen-toydata": cmd_gen_toydata,
    "train-vae": cmd_train_vae,
    "train-lrenc": cmd_train_lrenc,
    "analyze-uk": cmd_analyze_uk,
    "evaluate": cmd_evaluate,
    "super-resolve": cmd_super_resolve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest, _TRAIN_SECTION.get(args.command))
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        if args.command not in _TRAIN_SECTION:  # training commands follow their own setting
            set_determinism(True)
        return COMMANDS[args.command](args, cfg)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as e:
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
