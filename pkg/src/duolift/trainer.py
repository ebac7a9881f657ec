"""Training harness: alternating D/G updates with gradient accumulation,
step learning-rate schedule, validation-based checkpoint selection and the
ablation matrices.

Run directory layout::

    config.txt          effective RunConfig, flat ``key = value``
    manifest.json       config, seed, corpus digest, optimizer settings
    metrics.jsonl       one record per epoch (loss means, validation metrics)
    losses.log          header + one LossReport line per epoch
    checkpoints/best/   checkpoint with the highest validation PSNR(3D)
    checkpoints/latest/ checkpoint after the last finished epoch
    report.json/.md     best epoch and its validation metrics

A checkpoint directory holds ``manifest.json`` (config echo, epoch, metric
snapshot), ``generator.pt`` / ``discriminator.pt`` (state dicts keyed by
module path, e.g. ``decoder.res1.conv1.weight``), ``optim.pt`` and
``state.pt`` (RNG state and history needed to resume).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import losses as L
from .corpus import Sample, corpus_digest, load_corpus
from .metrics import MetricReport, aggregate, evaluate, psnr3d
from .netspec import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, param_count

log = logging.getLogger(__name__)

BASE_LR = {"CNN": 5e-4, "GAN": 1e-4}
ADAM_BETAS = {"CNN": (0.9, 0.999), "GAN": (0.5, 0.999)}
ALIASES = {"L": "lift", "DB": "duo_branch", "SL": "masked_sim", "DI": "masked_disc"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "CNN"
    view: str = "double"
    lift: bool = True  # L: replicate (True) or learned conv lift (False)
    duo_branch: bool = True  # DB: image-lifting branch
    masked_sim: bool | None = None  # SL: defaults to True in GAN mode, False in CNN mode
    masked_disc: bool = False  # DI: masked volumes into D
    lr_g: float | None = None
    lr_d: float | None = None
    epochs: int = 50
    schedule_drop_epoch: int = 70
    drop_factor: float = 0.1
    accumulation_steps: int = 4
    batch_size: int = 1
    seed: int = 0
    size: int = 32
    multiplier: float = 0.125
    dropout: float = 0.25
    alpha: float = 1.0
    beta: float = 0.01
    val_count: int = 2
    max_nonfinite: int = 3
    corpus: str = ""
    out: str = "runs/run"

    def __post_init__(self):
        if self.masked_sim is None:
            self.masked_sim = self.mode == "GAN"
        if self.lr_g is None:
            self.lr_g = BASE_LR.get(self.mode, BASE_LR["CNN"])
        if self.lr_d is None and self.mode == "GAN":
            self.lr_d = self.lr_g

    def errors(self) -> list[str]:
        errs = []
        if self.mode not in L.MODES:
            errs.append(f"mode must be one of {L.MODES}, got {self.mode!r}")
        if self.view not in ("single", "double"):
            errs.append(f"view must be 'single' or 'double', got {self.view!r}")
        if self.masked_disc and self.mode != "GAN":
            errs.append("DI (masked_disc) requires GAN mode")
        if self.mode == "GAN" and not (self.lr_d and self.lr_d > 0):
            errs.append("GAN mode requires a positive lr_d")
        if not (self.lr_g and self.lr_g > 0):
            errs.append("lr_g must be positive")
        for name in ("epochs", "accumulation_steps", "batch_size", "val_count"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.schedule_drop_epoch < 0:
            errs.append("schedule_drop_epoch must be >= 0")
        if not 0 < self.drop_factor <= 1:
            errs.append("drop_factor must lie in (0, 1]")
        for make in (self.generator_config, self.discriminator_config):
            try:
                make()
            except ValueError as exc:
                errs.append(str(exc))
        return errs

    def validate(self) -> "RunConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("invalid run config:\n  " + "\n  ".join(errs))
        return self

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            input_size=self.size, output_size=self.size, view=self.view, multiplier=self.multiplier,
            dropout=self.dropout, lift="repeat" if self.lift else "conv", duo_branch=self.duo_branch,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(input_size=self.size, multiplier=self.multiplier)

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta)

    # flat key = value text
    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = v
        raw.update(overrides)
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw, errs = {}, []
        for key, value in raw.items():
            name = ALIASES.get(key, key).replace("-", "_")
            if name not in types:
                errs.append(f"unknown config key {key!r}")
                continue
            try:
                kw[name] = _coerce(value, types[name])
            except ValueError as exc:
                errs.append(f"{key}: {exc}")
        if errs:
            raise ConfigError("invalid run config:\n  " + "\n  ".join(errs))
        return cls(**kw)


def _coerce(value, typ: str):
    if not isinstance(value, str):
        return value
    v = value.strip()
    if v == "None" or (v == "" and typ != "str"):
        return None
    if typ.startswith("bool"):
        low = v.lower()
        if low in ("1", "true", "yes", "on", "✓"):
            return True
        if low in ("0", "false", "no", "off", "✗"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ.startswith("int"):
        return int(v)
    if typ.startswith("float"):
        return float(v)
    return v


def lr_at(epoch: int, cfg: RunConfig, base: float | None = None) -> float:
    base = cfg.lr_g if base is None else base
    return base if epoch < cfg.schedule_drop_epoch else base * cfg.drop_factor


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class EpochStats:
    epoch: int
    loss: L.LossReport
    val: dict
    seconds: float

    def to_record(self) -> dict:
        return {"epoch": self.epoch, "loss": asdict(self.loss), "val": self.val, "seconds": self.seconds}


def to_batch(samples: list[Sample]):
    """Stack samples into (frontal, lateral, volume, lung) tensors."""
    fr = torch.from_numpy(np.stack([s.frontal for s in samples]))[:, None].float()
    la = torch.from_numpy(np.stack([s.lateral for s in samples]))[:, None].float()
    vol = torch.from_numpy(np.stack([s.volume for s in samples]))[:, None].float()
    lung = torch.from_numpy(np.stack([s.lung for s in samples]))[:, None].float()
    return fr, la, vol, lung


class Trainer:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        set_determinism(cfg.seed)
        self.G = Generator(cfg.generator_config())
        self.D = Discriminator(cfg.discriminator_config()) if cfg.mode == "GAN" else None
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr_g, betas=ADAM_BETAS[cfg.mode])
        self.opt_d = (torch.optim.Adam(self.D.parameters(), lr=cfg.lr_d, betas=ADAM_BETAS[cfg.mode])
                      if self.D is not None else None)
        self.pending = 0  # micro-batches accumulated since the last update
        self.nonfinite = 0
        self.epoch = 0

    def generate(self, fr, la, training: bool):
        self.G.train(training)
        return self.G(fr, la if self.cfg.view == "double" else None)

    def _disc_input(self, vol, lung):
        return vol * lung if self.cfg.masked_disc else vol

    def d_step(self, real, fake, lung) -> torch.Tensor:
        """Accumulate D gradients for one micro-batch; ``fake`` must be detached."""
        if self.D is None:
            raise ConfigError("d_step is only available in GAN mode")
        if fake.requires_grad:
            raise ValueError("d_step needs a detached fake volume")
        self.D.train()
        adv_d = L.adv_discriminator_loss(self.D(self._disc_input(real, lung)),
                                         self.D(self._disc_input(fake, lung)))
        loss = self.cfg.beta * adv_d
        if not torch.isfinite(loss):
            self._incident("discriminator loss")
            return adv_d.detach()
        (loss / self.cfg.accumulation_steps).backward()
        return adv_d.detach()

    def g_step(self, fake, real, lung) -> dict:
        """Accumulate G gradients for one micro-batch; returns loss parts."""
        cfg = self.cfg
        mse, l1 = L.recon_losses(real, fake)
        parts = {"recon_mse": mse, "recon_l1": l1}
        if cfg.masked_sim:
            parts["inside_mse"], parts["inside_l1"] = L.masked_losses(real, fake, lung)
        if self.D is not None:
            self.D.requires_grad_(False)
            try:
                parts["adv_g"] = L.adv_generator_loss(self.D(self._disc_input(fake, lung)))
            finally:
                self.D.requires_grad_(True)
        out = L.compose(parts, cfg.weights, cfg.mode, cfg.masked_sim)
        if not torch.isfinite(torch.as_tensor(out["total_g"])):
            self._incident("generator loss")
            return {k: float("nan") for k in out}
        (out["total_g"] / cfg.accumulation_steps).backward()
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in out.items()}

    def _incident(self, what: str):
        self.nonfinite += 1
        log.warning("non-finite %s at epoch %d (incident %d)", what, self.epoch, self.nonfinite)
        if self.nonfinite > self.cfg.max_nonfinite:
            raise FloatingPointError(
                f"halting: {self.nonfinite} non-finite losses exceed max_nonfinite={self.cfg.max_nonfinite}"
            )

    def micro_batch(self, samples: list[Sample]) -> L.LossReport:
        """D step then G step on one micro-batch, stepping optimizers every
        ``accumulation_steps`` micro-batches."""
        fr, la, real, lung = to_batch(samples)
        fake = self.generate(fr, la, training=True)
        adv_d = self.d_step(real, fake.detach(), lung) if self.D is not None else 0.0
        out = self.g_step(fake, real, lung)
        out["adv_d"] = float(adv_d) if self.cfg.mode == "GAN" else 0.0
        out["total_d"] = self.cfg.beta * out["adv_d"]
        self.pending += 1
        if self.pending == self.cfg.accumulation_steps:
            self.update()
        return L.LossReport(**out)

    def update(self):
        if self.pending == 0:
            return
        if self.pending != self.cfg.accumulation_steps:
            # partial group at epoch end: rescale the sum to a mean
            scale = self.cfg.accumulation_steps / self.pending
            for p in self._params():
                if p.grad is not None:
                    p.grad.mul_(scale)
        for opt in (self.opt_d, self.opt_g):
            if opt is not None:
                opt.step()
                opt.zero_grad(set_to_none=True)
        self.pending = 0

    def _params(self):
        yield from self.G.parameters()
        if self.D is not None:
            yield from self.D.parameters()

    def set_lr(self, epoch: int):
        for g in self.opt_g.param_groups:
            g["lr"] = lr_at(epoch, self.cfg, self.cfg.lr_g)
        if self.opt_d is not None:
            for g in self.opt_d.param_groups:
                g["lr"] = lr_at(epoch, self.cfg, self.cfg.lr_d)

    def train_epoch(self, samples: list[Sample]) -> L.LossReport:
        self.set_lr(self.epoch)
        order = np.random.default_rng([self.cfg.seed, self.epoch]).permutation(len(samples))
        bs = self.cfg.batch_size
        reports = [self.micro_batch([samples[j] for j in order[i:i + bs]])
                   for i in range(0, len(order), bs)]
        self.update()
        self.epoch += 1
        finite = [r for r in reports if math.isfinite(r.total_g)]
        if not finite:
            raise FloatingPointError(f"epoch {self.epoch - 1}: every micro-batch was non-finite")
        return L.LossReport.mean(finite)

    @torch.no_grad()
    def reconstruct(self, samples: list[Sample]) -> list[np.ndarray]:
        out = []
        for s in samples:
            fr, la, _, _ = to_batch([s])
            out.append(self.generate(fr, la, training=False)[0, 0].numpy())
        return out

    def evaluate(self, samples: list[Sample]) -> list[MetricReport]:
        return [evaluate(s.volume, r, s.lung, s.vessel) for s, r in zip(samples, self.reconstruct(samples))]

    @torch.no_grad()
    def discriminator_means(self, samples: list[Sample]) -> tuple[float, float]:
        """Mean D output on real and on generated volumes (eval mode)."""
        if self.D is None:
            raise ConfigError("no discriminator in CNN mode")
        self.D.eval()
        real, fake = [], []
        for s, r in zip(samples, self.reconstruct(samples)):
            _, _, vol, lung = to_batch([s])
            real.append(self.D(self._disc_input(vol, lung)).mean().item())
            fake.append(self.D(self._disc_input(torch.from_numpy(r)[None, None], lung)).mean().item())
        return float(np.mean(real)), float(np.mean(fake))

    # checkpoints
    def save(self, path, metrics: dict | None = None, history: list | None = None, best=None):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save(self.G.state_dict(), path / "generator.pt")
        if self.D is not None:
            torch.save(self.D.state_dict(), path / "discriminator.pt")
        torch.save({"g": self.opt_g.state_dict(), "d": self.opt_d.state_dict() if self.opt_d else None},
                   path / "optim.pt")
        torch.save({"torch_rng": torch.get_rng_state(), "nonfinite": self.nonfinite}, path / "state.pt")
        manifest = {
            "config": asdict(self.cfg), "epoch": self.epoch, "metrics": metrics or {},
            "history": history or [], "best": best,
            "optimizer": {"name": "Adam", "betas": ADAM_BETAS[self.cfg.mode]},
            "param_count": {"generator": param_count(self.G),
                            "discriminator": param_count(self.D) if self.D is not None else 0},
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path) -> tuple["Trainer", dict]:
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        t = cls(RunConfig(**manifest["config"]))
        t.G.load_state_dict(torch.load(path / "generator.pt"))
        if t.D is not None:
            t.D.load_state_dict(torch.load(path / "discriminator.pt"))
        opt = torch.load(path / "optim.pt")
        t.opt_g.load_state_dict(opt["g"])
        if t.opt_d is not None and opt["d"] is not None:
            t.opt_d.load_state_dict(opt["d"])
        state = torch.load(path / "state.pt")
        torch.set_rng_state(state["torch_rng"])
        t.nonfinite = state["nonfinite"]
        t.epoch = manifest["epoch"]
        return t, manifest


def split_corpus(samples: list[Sample], val_count: int) -> tuple[list[Sample], list[Sample]]:
    if len(samples) <= val_count:
        raise ConfigError(f"corpus of {len(samples)} samples cannot hold {val_count} validation samples")
    return samples[:-val_count], samples[-val_count:]


@dataclass
class TrainResult:
    best_dir: Path
    best_epoch: int
    best_metrics: dict
    history: list[EpochStats] = field(default_factory=list)
    trainer: Trainer | None = None


def train(cfg: RunConfig, corpus=None, run_dir=None, resume=None, epochs: int | None = None) -> TrainResult:
    """Train on a corpus directory (or sample list), keeping the checkpoint
    with the best validation PSNR(3D).

    ``resume`` points at a checkpoint directory; training continues from its
    epoch up to ``cfg.epochs`` (or ``epochs`` when given).
    """
    cfg.validate()
    corpus = corpus if corpus is not None else cfg.corpus
    samples = load_corpus(corpus) if isinstance(corpus, (str, Path)) else list(corpus)
    if not samples:
        raise ConfigError("empty corpus")
    train_set, val_set = split_corpus(samples, cfg.val_count)
    run = Path(run_dir or cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(f"run directory {run} is owned by another live process") from None
    try:
        return _train(cfg, train_set, val_set, run, resume, epochs or cfg.epochs, corpus)
    finally:
        lock.release()


def _train(cfg, train_set, val_set, run: Path, resume, total_epochs: int, corpus) -> TrainResult:
    if resume is not None:
        trainer, manifest = Trainer.load(resume)
        history = [EpochStats(h["epoch"], L.LossReport(**h["loss"]), h["val"], h["seconds"])
                   for h in manifest["history"]]
        best = manifest["best"]
    else:
        trainer, history, best = Trainer(cfg), [], None
        (run / "config.txt").write_text(cfg.to_text())
        digest = corpus_digest(corpus) if isinstance(corpus, (str, Path)) else None
        (run / "manifest.json").write_text(json.dumps({
            "config": asdict(cfg), "seed": cfg.seed, "corpus": str(corpus) if digest else None,
            "corpus_sha256": digest, "optimizer": {"name": "Adam", "betas": ADAM_BETAS[cfg.mode]},
            "selection_metric": "val psnr3d", "update_order": "D then G per micro-batch",
        }, indent=2))
        (run / "losses.log").write_text("epoch " + " ".join(L.LossReport.FIELDS) + "\n")
        (run / "metrics.jsonl").write_text("")

    while trainer.epoch < total_epochs:
        t0 = time.perf_counter()
        epoch = trainer.epoch
        loss = trainer.train_epoch(train_set)
        val = aggregate(trainer.evaluate(val_set)).mean
        stats = EpochStats(epoch, loss, val, time.perf_counter() - t0)
        history.append(stats)
        with open(run / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(stats.to_record()) + "\n")
        with open(run / "losses.log", "a") as fh:
            fh.write(f"{epoch} {loss.to_line()}\n")
        log.info("epoch %d total_g %.4f val psnr3d %.3f (%.1fs)", epoch, loss.total_g, val["psnr3d"],
                 stats.seconds)
        records = [h.to_record() for h in history]
        if best is None or val["psnr3d"] > best["metrics"]["psnr3d"]:
            best = {"epoch": epoch, "metrics": val}
            trainer.save(run / "checkpoints" / "best", val, records, best)
        trainer.save(run / "checkpoints" / "latest", val, records, best)

    report = {"best_epoch": best["epoch"], "best_val": best["metrics"], "epochs": len(history),
              "config": asdict(cfg)}
    (run / "report.json").write_text(json.dumps(report, indent=2))
    lines = [f"best epoch: {best['epoch']}", "", "| metric | value |", "|---|---|"]
    lines += [f"| {k} | {'n/a' if v is None else f'{v:.4f}'} |" for k, v in best["metrics"].items()]
    (run / "report.md").write_text("\n".join(lines) + "\n")
    return TrainResult(run / "checkpoints" / "best", best["epoch"], best["metrics"], history, trainer)


# ablation matrices: name, then RunConfig overrides
TABLE4 = [
    {"name": "L+DB", "mode": "CNN", "lift": True, "duo_branch": True},
    {"name": "conv-lift+DB", "mode": "CNN", "lift": False, "duo_branch": True},
    {"name": "L only", "mode": "CNN", "lift": True, "duo_branch": False},
]
TABLE5 = [
    {"name": "Ablation 1", "mode": "GAN", "masked_sim": False, "masked_disc": False},
    {"name": "Ablation 2", "mode": "CNN", "masked_sim": True, "masked_disc": False},
    {"name": "Ablation 3", "mode": "GAN", "masked_sim": False, "masked_disc": True},
    {"name": "DuoLift-GAN", "mode": "GAN", "masked_sim": True, "masked_disc": False},
]
MATRICES = {"table4": TABLE4, "table5": TABLE5}


def row_config(base: RunConfig, row: dict) -> RunConfig:
    raw = {k: v for k, v in asdict(base).items()}
    row = dict(row)
    if "G" in row and not _coerce(row.pop("G"), "bool"):
        raise ConfigError("every row needs the generator (G = ✓)")
    if "D" in row:
        gan = _coerce(row.pop("D"), "bool")
        if row.setdefault("mode", "GAN" if gan else "CNN") != ("GAN" if gan else "CNN"):
            raise ConfigError(f"D = {'✓' if gan else '✗'} contradicts mode = {row['mode']}")
    overrides = {ALIASES.get(k, k): v for k, v in row.items() if k != "name"}
    if "mode" in overrides and overrides["mode"] != base.mode:
        # mode-dependent defaults follow the row's mode unless set explicitly
        for k in ("lr_g", "lr_d", "masked_sim"):
            if k not in overrides:
                raw[k] = None
    raw.update(overrides)
    return RunConfig.from_mapping(raw)


def validate_matrix(base: RunConfig, rows: list[dict]) -> list[RunConfig]:
    """Build every row's config, collecting all errors before any training."""
    cfgs, errs = [], []
    for i, row in enumerate(rows):
        try:
            cfgs.append(row_config(base, row).validate())
        except ValueError as exc:  # ConfigError included
            errs.append(f"row {i} ({row.get('name', '?')}): {exc}")
    if errs:
        raise ConfigError("invalid ablation matrix:\n" + "\n".join(errs))
    return cfgs


def run_ablation(base: RunConfig, rows: list[dict], corpus, out_dir) -> dict:
    """Train and evaluate every row on the same corpus and seed."""
    cfgs = validate_matrix(base, rows)
    samples = load_corpus(corpus) if isinstance(corpus, (str, Path)) else list(corpus)
    _, val_set = split_corpus(samples, base.val_count)
    out = Path(out_dir)
    report_rows = []
    for i, (row, cfg) in enumerate(zip(rows, cfgs)):
        res = train(cfg, samples, out / f"row_{i:02d}")
        trainer, _ = Trainer.load(res.best_dir)
        summary = aggregate(trainer.evaluate(val_set))
        report_rows.append({
            "name": row.get("name", f"row {i}"),
            "flags": {"G": True, "D": cfg.mode == "GAN", "L": cfg.lift, "DB": cfg.duo_branch,
                      "SL": cfg.masked_sim, "DI": cfg.masked_disc},
            "mean": summary.mean, "std": summary.std, "n": summary.n,
            "best_epoch": res.best_epoch,
            "params_g": param_count(trainer.G),
            "run_dir": str(out / f"row_{i:02d}"),
        })
    report = {"seed": base.seed, "corpus": str(corpus) if isinstance(corpus, (str, Path)) else None,
              "rows": report_rows}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report, indent=2))
    (out / "ablation.md").write_text(render_ablation(report))
    return report


def render_ablation(report: dict, flags=("G", "D", "L", "DB", "SL", "DI"),
                    metrics=("psnr2d", "psnr3d", "ssim2d", "ssim3d", "dice_lung", "dice_vessel")) -> str:
    mark = {True: "✓", False: "✗"}
    head = ["row", *flags, *metrics]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in report["rows"]:
        cells = [r["name"]] + [mark[bool(r["flags"][f])] for f in flags]
        for m in metrics:
            mu, sd = r["mean"].get(m), r["std"].get(m)
            cells.append("n/a" if mu is None else f"{mu:.3f} ± {sd:.3f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def untrained_psnr(cfg: RunConfig, samples: list[Sample]) -> float:
    t = Trainer(cfg)
    return float(np.mean([psnr3d(s.volume, r) for s, r in zip(samples, t.reconstruct(samples))]))
