"""Short CNN or GAN training on a few phantoms, measured on the same set.

    python scripts/smoke.py --mode CNN --work /tmp/smoke
    python scripts/smoke.py --mode GAN --work /tmp/smoke --json out.json
"""

import argparse
import json
import logging
from dataclasses import replace

from duolift.smoke import CNN_SMOKE, GAN_SMOKE, fmt, run_smoke, smoke_samples


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mode", choices=("CNN", "GAN"), default="CNN")
    ap.add_argument("--work", default="runs/smoke", help="directory for the phantom corpus")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--lr", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--json", help="also write the summary here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = CNN_SMOKE if args.mode == "CNN" else GAN_SMOKE
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lr_g", args.lr), ("seed", args.seed))
                 if v is not None}
    cfg = replace(cfg, **overrides)
    res = run_smoke(cfg, smoke_samples(cfg, args.work), target_ratio=0.5 if cfg.mode == "GAN" else None)
    summary = res.summary()
    print(fmt(summary))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"config": res.config, "summary": summary, "total_g": res.total_g}, fh, indent=2)


if __name__ == "__main__":
    main()
