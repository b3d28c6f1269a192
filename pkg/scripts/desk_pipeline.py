"""Run the whole desk experiment end to end through the CLI.

    python3 scripts/desk_pipeline.py --out runs/desk

Trains the VAE and the x4 LR encoder (about 25 minutes on one CPU core),
tabulates U_k^s, evaluates the consistency estimators and super-resolves one
held-out toy face. Pass ``--vae`` to reuse an already trained VAE checkpoint.
"""
import argparse
import sys
from pathlib import Path

from hvsr.cli import main
from hvsr.config import bundled_config, load_config
from hvsr.data import make_pair, save_image, toy_faces


def run(*argv) -> None:
    print("+ hvsr", " ".join(map(str, argv)), flush=True)
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


def pipeline() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=bundled_config("desk"))
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--vae", type=Path, help="skip VAE training and use this checkpoint")
    ap.add_argument("--n", type=int, default=8, help="number of SR samples")
    args = ap.parse_args()
    common = ["--config", args.config, "--out", args.out]

    vae = args.vae
    if vae is None:
        run("train-vae", *common, "--run-name", "vae")
        vae = args.out / "vae" / "last.ckpt"
    run("train-lrenc", *common, "--run-name", "lrenc", "--paths.vae_checkpoint", vae)
    lrenc = args.out / "lrenc" / "last.ckpt"
    ckpts = ["--paths.vae_checkpoint", vae, "--paths.lrenc_checkpoint", lrenc]

    run("analyze-uk", *common, "--run-name", "uk", *ckpts)
    run("evaluate", *common, "--run-name", "evaluate", "--project", *ckpts)

    # one held-out face (seed disjoint from the training set) as the SR input
    cfg = load_config(args.config)
    c, size, _ = cfg.hierarchy().image_shape
    x = toy_faces(1, seed=2024, size=size, channels=c)[0]
    _, y = make_pair(cfg.operator(), x)
    inputs = args.out / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)
    save_image(x, inputs / "hr.png")
    save_image(y, inputs / "lr.png")
    for name, extra in (("sr", []), ("sr-projected", ["--project"])):
        run("super-resolve", inputs / "lr.png", "--hr", inputs / "hr.png", "--n", args.n, *extra,
            *common, "--run-name", name, *ckpts)
    print(f"done; plot U_k with: python3 scripts/plot_uk.py {args.out / 'uk' / 'uk.csv'}")


if __name__ == "__main__":
    pipeline()
