"""Run one or both ablation matrices at desk scale and print the tables.

    python scripts/ablation.py --out runs/ablation --epochs 3
"""

import argparse
from pathlib import Path

from duolift.corpus import generate_corpus
from duolift.trainer import MATRICES, RunConfig, render_ablation, run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--matrix", choices=(*MATRICES, "both"), default="both")
    ap.add_argument("--count", type=int, default=6)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    corpus = out / "corpus"
    if not (corpus / "manifest.json").exists():
        generate_corpus(corpus, args.count, (args.size,) * 3, seed=args.seed)
    base = RunConfig(size=args.size, epochs=args.epochs, seed=args.seed, val_count=2)
    names = list(MATRICES) if args.matrix == "both" else [args.matrix]
    for name in names:
        report = run_ablation(base, MATRICES[name], corpus, out / name)
        print(f"## {name}\n")
        print(render_ablation(report))
        print()


if __name__ == "__main__":
    main()
