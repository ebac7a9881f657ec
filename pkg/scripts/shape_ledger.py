"""Print every named intermediate shape of the generator and the
discriminator grid at a given geometry, without allocating weights.

    python scripts/shape_ledger.py --size 128 --multiplier 1
"""

import argparse

import torch

from duolift.netspec import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, param_count


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--multiplier", type=float, default=1.0)
    ap.add_argument("--view", choices=("single", "double"), default="double")
    args = ap.parse_args()
    n = args.size
    with torch.device("meta"):
        g = Generator(GeneratorConfig(n, n, view=args.view, multiplier=args.multiplier))
        x = torch.empty(1, 1, n, n)
        trace = g.trace(x, x if args.view == "double" else None)
        d = Discriminator(DiscriminatorConfig(n, args.multiplier))
        grid = d(torch.empty(1, 1, n, n, n))
    print(f"geometry {n}^3, m = {args.multiplier}, {args.view} view")
    for name, t in trace.items():
        print(f"  {name:8s} {' x '.join(map(str, t.shape[1:]))}")
    print(f"  D grid   {' x '.join(map(str, grid.shape[2:]))}  ({d.cfg.blocks} blocks, channels {d.cfg.channels})")
    print(f"parameters: generator {param_count(g):,}  discriminator {param_count(d):,}")


if __name__ == "__main__":
    main()
