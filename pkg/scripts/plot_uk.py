"""Plot U_k^s curves (one line per s, shaded +-2 standard errors) from uk.csv.

    python3 scripts/plot_uk.py runs/desk/uk/uk.csv [-o uk.png]

Needs the optional ``plots`` extra (matplotlib).
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from hvsr.analysis import read_table_csv  # noqa: E402


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv", type=Path)
    ap.add_argument("-o", "--output", type=Path)
    args = ap.parse_args()

    table = read_table_csv(args.csv)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for s in sorted({r.s for r in table.rows}):
        rows = sorted((r for r in table.rows if r.s == s), key=lambda r: r.k)
        k = [r.k for r in rows]
        m = [r.mean for r in rows]
        se = [r.std_error for r in rows]
        ax.plot(k, m, marker="o", ms=3, label=f"s = {s}")
        ax.fill_between(k, [a - 2 * b for a, b in zip(m, se)], [a + 2 * b for a, b in zip(m, se)], alpha=0.2)
    ax.set_xlabel("k (fixed latent groups)")
    ax.set_ylabel("average LR pairwise RMSE (0-255)")
    ax.legend()
    fig.tight_layout()
    out = args.output or args.csv.with_suffix(".png")
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
