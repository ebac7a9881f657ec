"""Command line entry point: ``duolift {gen-data,train,eval,ablate,report}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  Every
subcommand writes ``command.json`` into its output directory with the
effective arguments, seed and sha256 of its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .corpus import corpus_digest, generate_corpus, load_corpus, read_manifest
from .metrics import MetricReport, aggregate, evaluate, render_table
from .trainer import ALIASES, MATRICES, ConfigError, RunConfig, Trainer, run_ablation, train, validate_matrix

log = logging.getLogger("duolift")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PLANES = {"coronal": 0, "axial": 1, "sagittal": 2}  # axis of the (D, H, W) volume held fixed


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_command(out: Path, name: str, args: argparse.Namespace, config: dict | None = None,
                  seed: int | None = None, inputs: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": name,
        "argv": sys.argv[1:],
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seed": seed,
        "inputs": inputs or {},
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out / "command.json"
    path.write_text(json.dumps(record, indent=2, default=str))
    return path


# gen-data

def cmd_gen_data(args) -> int:
    dims = tuple(args.dims) * (3 if len(args.dims) == 1 else 1)
    if len(dims) != 3:
        raise ConfigError(f"--dims takes 1 or 3 values, got {args.dims}")
    manifest = generate_corpus(args.out, args.count, dims, seed=args.seed, workers=args.workers)
    write_command(Path(args.out), "gen-data", args, {"count": args.count, "dims": list(dims)}, args.seed)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return EXIT_OK


# train

def _config_overrides(args) -> dict:
    """--set pairs first, so an explicit --<key> flag wins over them."""
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[ALIASES.get(k.strip(), k.strip())] = v.strip()
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            over[f.name] = v
    for alias, name in ALIASES.items():
        v = getattr(args, f"alias_{alias}", None)
        if v is not None:
            over[name] = v
    return over


def load_config(args) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    cfg = RunConfig.from_text(text, **_config_overrides(args))
    return cfg.validate()


def _check_corpus(cfg: RunConfig) -> Path:
    if not cfg.corpus:
        raise ConfigError("no corpus given (config key 'corpus' or --corpus)")
    dims = tuple(read_manifest(cfg.corpus)["dims"])
    if dims != (cfg.size,) * 3:
        raise ConfigError(f"geometry mismatch: config size {(cfg.size,) * 3}, corpus {dims}")
    return Path(cfg.corpus)


def cmd_train(args) -> int:
    cfg = load_config(args)
    corpus = _check_corpus(cfg)
    out = Path(cfg.out)
    inputs = {"corpus": corpus_digest(corpus)}
    if args.config:
        inputs["config"] = _sha256(Path(args.config))
    write_command(out, "train", args, asdict(cfg), cfg.seed, inputs)
    res = train(cfg, corpus, out, resume=args.resume)
    print(f"best epoch {res.best_epoch}  checkpoint {res.best_dir}")
    for k, v in res.best_metrics.items():
        print(f"  {k:12s} {'n/a' if v is None else f'{v:.4f}'}")
    return EXIT_OK


# eval

class OracleModel:
    """Checkpoint stand-in that returns each sample's stored target."""

    def reconstruct(self, samples):
        return [s.volume.copy() for s in samples]


def _load_model(checkpoint: str, dims):
    if checkpoint == "oracle":
        return OracleModel()
    trainer, manifest = Trainer.load(checkpoint)
    size = manifest["config"]["size"]
    if tuple(dims) != (size, size, size):
        raise ConfigError(f"geometry mismatch: checkpoint expects {(size, size, size)}, corpus has {tuple(dims)}")
    return trainer


def save_slices(target: np.ndarray, recon: np.ndarray, out_dir: Path, sample_id: str) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for plane, axis in PLANES.items():
        k = target.shape[axis] // 2
        a, b = np.take(target, k, axis), np.take(recon, k, axis)
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
        for ax, img, title in zip(axes, (a, b, np.abs(a - b)), ("target", "reconstruction", "|difference|")):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.set_title(title, fontsize=9)
            ax.axis("off")
        fig.suptitle(f"{sample_id} {plane} slice {k}", fontsize=9)
        path = out_dir / f"{sample_id}_{plane}.png"
        fig.savefig(path, dpi=80, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_eval(args) -> int:
    corpus = Path(args.corpus)
    dims = read_manifest(corpus)["dims"]
    model = _load_model(args.checkpoint, dims)
    samples = load_corpus(corpus)
    if args.split == "val":
        count = model.cfg.val_count if isinstance(model, Trainer) else args.val_count
        samples = samples[-count:]
    out = Path(args.out)
    inputs = {"corpus": corpus_digest(corpus)}
    if args.checkpoint != "oracle":
        inputs["generator"] = _sha256(Path(args.checkpoint) / "generator.pt")
    write_command(out, "eval", args, None, None, inputs)
    recons = model.reconstruct(samples)
    reports = []
    plot_dir = out / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    with open(out / "samples.jsonl", "w") as fh:
        for s, r in zip(samples, recons):
            if r.shape != s.volume.shape:
                raise ConfigError(f"geometry mismatch: reconstruction {r.shape} vs target {s.volume.shape}")
            rep = evaluate(s.volume, r, s.lung, s.vessel)
            reports.append(rep)
            fh.write(json.dumps({"id": s.id, **json.loads(rep.to_json())}) + "\n")
            if not args.no_plots:
                save_slices(s.volume, r, plot_dir, s.id)
    summary = aggregate(reports)
    table = render_table(summary, f"evaluation ({args.checkpoint})")
    (out / "metrics.md").write_text(table + "\n")
    (out / "metrics.json").write_text(json.dumps(asdict(summary), indent=2))
    print(table)
    return EXIT_OK


# ablate

def load_matrix(spec: str) -> list[dict]:
    if spec in MATRICES:
        return [dict(r) for r in MATRICES[spec]]
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"matrix must be one of {sorted(MATRICES)} or a JSON file, got {spec!r}")
    rows = json.loads(path.read_text())
    rows = rows.get("rows", rows) if isinstance(rows, dict) else rows
    if not isinstance(rows, list) or not all(isinstance(r, dict) for r in rows):
        raise ConfigError(f"{path}: expected a JSON list of row objects")
    return rows


def cmd_ablate(args) -> int:
    base = load_config(args)
    rows = load_matrix(args.matrix)
    validate_matrix(base, rows)  # every row checked before any training
    _check_corpus(base)
    out = Path(base.out)
    inputs = {"corpus": corpus_digest(base.corpus)}
    write_command(out, "ablate", args, {"base": asdict(base), "rows": rows}, base.seed, inputs)
    report = run_ablation(base, rows, base.corpus, out)
    print((out / "ablation.md").read_text())
    print(f"{len(report['rows'])} rows written to {out}")
    return EXIT_OK


# report

def collect_run(path: Path) -> dict[str, dict]:
    """Map ``column name -> {metric: value}`` for one run directory.

    Understands training runs (``report.json``), evaluation outputs
    (``metrics.json``) and ablation outputs (``ablation.json``, one column
    per row).
    """
    if (path / "ablation.json").exists():
        rep = json.loads((path / "ablation.json").read_text())
        return {f"{path.name}/{r['name']}": r["mean"] for r in rep["rows"]}
    if (path / "metrics.json").exists():
        return {path.name: json.loads((path / "metrics.json").read_text())["mean"]}
    if (path / "report.json").exists():
        return {path.name: json.loads((path / "report.json").read_text())["best_val"]}
    return {path.name: {}}


def merge_reports(run_dirs: list[Path]) -> dict:
    columns, missing = {}, []
    for d in run_dirs:
        cols = collect_run(Path(d))
        for name, values in cols.items():
            if not values:
                log.warning("no metrics found under %s", d)
            columns[name] = values
    metrics = list(MetricReport.FIELDS)
    for vals in columns.values():
        metrics += [m for m in vals if m not in metrics]
    for name, vals in columns.items():
        for m in metrics:
            if vals.get(m) is None:
                missing.append({"run": name, "metric": m})
    return {"runs": list(columns), "metrics": metrics, "values": columns, "missing": missing}


def render_report(merged: dict) -> str:
    runs = merged["runs"]
    lines = ["| metric | " + " | ".join(runs) + " |", "|---|" + "---|" * len(runs)]
    for m in merged["metrics"]:
        cells = []
        for r in runs:
            v = merged["values"][r].get(m)
            cells.append("missing" if v is None else f"{v:.4f}")
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    if merged["missing"]:
        lines.append(f"\n{len(merged['missing'])} missing cell(s).")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.runs]
    for d in dirs:
        if not d.is_dir():
            raise ConfigError(f"not a run directory: {d}")
    merged = merge_reports(dirs)
    out = Path(args.out)
    inputs = {}
    for d in dirs:
        for name in ("report.json", "metrics.json", "ablation.json"):
            if (d / name).exists():
                inputs[str(d / name)] = _sha256(d / name)
    write_command(out, "report", args, None, None, inputs)
    text = render_report(merged)
    (out / "report.md").write_text(text)
    (out / "report.json").write_text(json.dumps(merged, indent=2))
    print(text)
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    g = p.add_argument_group("config keys")
    for f in fields(RunConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="V")
    for alias, name in ALIASES.items():
        g.add_argument(f"--{alias}", dest=f"alias_{alias}", metavar="✓/✗", help=f"alias of --{name}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="duolift", description="Biplanar X-ray to CT reconstruction at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", type=int, nargs="+", default=[32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory, or 'oracle'")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("all", "val"), default="all")
    p.add_argument("--val-count", type=int, default=2, help="validation size for the oracle")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare an ablation matrix")
    _add_config_flags(p)
    p.add_argument("--matrix", required=True, help="table4, table5 or a JSON list of rows")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge metric tables from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
