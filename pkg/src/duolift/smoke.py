"""Short desk-scale training runs on a handful of phantoms.

Both smokes train and measure on the same samples: they check that the
optimisation machinery moves in the right direction, not generalisation.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Sample, generate_corpus, load_corpus
from .metrics import aggregate
from .trainer import RunConfig, Trainer

log = logging.getLogger(__name__)


@dataclass
class SmokeConfig:
    mode: str = "CNN"
    count: int = 8
    size: int = 32
    epochs: int = 50
    seed: int = 0
    lr_g: float | None = None
    accumulation_steps: int = 1
    dropout: float = 0.25
    masked_sim: bool | None = None  # None: the mode default
    budget_s: float = 20 * 60  # stop early rather than overrun

    def run_config(self) -> RunConfig:
        return RunConfig(mode=self.mode, size=self.size, epochs=self.epochs, seed=self.seed,
                         lr_g=self.lr_g, accumulation_steps=self.accumulation_steps,
                         dropout=self.dropout, masked_sim=self.masked_sim)


# Settings used by the acceptance smokes. The full-scale learning rates
# are meant for 100 epochs on real CT; with 8 phantoms and a 50
# epoch cap, one update per sample and a larger step are needed.
CNN_SMOKE = SmokeConfig(mode="CNN", lr_g=3e-3)
GAN_SMOKE = SmokeConfig(mode="GAN", lr_g=1e-3)


@dataclass
class SmokeResult:
    config: dict
    epochs_run: int
    seconds: float
    initial: dict
    final: dict
    total_g: list[float] = field(default_factory=list)
    d_real: float | None = None
    d_fake: float | None = None

    @property
    def psnr_gain(self) -> float:
        return self.final["psnr3d"] - self.initial["psnr3d"]

    @property
    def total_g_ratio(self) -> float:
        return min(self.total_g[1:] or self.total_g) / self.total_g[0]

    def summary(self) -> dict:
        out = {"epochs_run": self.epochs_run, "seconds": round(self.seconds, 1),
               "psnr_before": self.initial["psnr3d"], "psnr_after": self.final["psnr3d"],
               "psnr_gain": self.psnr_gain, "dice_lung": self.final["dice_lung"],
               "total_g_first": self.total_g[0], "total_g_last": self.total_g[-1],
               "total_g_ratio": self.total_g_ratio}
        if self.d_real is not None:
            out.update(d_real=self.d_real, d_fake=self.d_fake, d_margin=self.d_real - self.d_fake)
        return out


def smoke_samples(cfg: SmokeConfig, work_dir) -> list[Sample]:
    """Generate (or reuse) the smoke corpus under ``work_dir``."""
    path = Path(work_dir) / f"corpus_{cfg.count}x{cfg.size}_s{cfg.seed}"
    if not (path / "manifest.json").exists():
        generate_corpus(path, cfg.count, (cfg.size,) * 3, seed=cfg.seed)
    return load_corpus(path)


def run_smoke(cfg: SmokeConfig, samples: list[Sample], target_ratio: float | None = None) -> SmokeResult:
    """Train ``cfg.epochs`` epochs on ``samples`` and measure on the same set.

    With ``target_ratio`` set, GAN runs stop once the epoch mean of total_g
    has fallen below that fraction of the first epoch's mean.
    """
    rc = cfg.run_config().validate()
    t = Trainer(rc)
    initial = aggregate(t.evaluate(samples)).mean
    totals = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        rep = t.train_epoch(samples)
        totals.append(rep.total_g)
        log.info("smoke %s epoch %d total_g %.4f", cfg.mode, epoch, rep.total_g)
        if target_ratio is not None and len(totals) > 1 and totals[-1] < target_ratio * totals[0]:
            break
        if time.perf_counter() - t0 > cfg.budget_s:
            log.warning("smoke budget of %.0fs spent after %d epochs", cfg.budget_s, epoch + 1)
            break
    final = aggregate(t.evaluate(samples)).mean
    result = SmokeResult(config=vars(cfg).copy(), epochs_run=len(totals), seconds=time.perf_counter() - t0,
                         initial=initial, final=final, total_g=totals)
    if t.D is not None:
        result.d_real, result.d_fake = t.discriminator_means(samples)
    return result


def fmt(values: dict) -> str:
    return " ".join(f"{k}={v:.4f}" if isinstance(v, float) and np.isfinite(v) else f"{k}={v}"
                    for k, v in values.items())
