"""Generator / discriminator objectives.

Similarity terms average over the whole grid (masked terms included, which
divide by the full voxel count rather than the mask size).  Adversarial
terms average ``-log`` probabilities over the discriminator's 5x5x5 grid,
with probabilities clamped to ``[EPS, 1 - EPS]``.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import torch

EPS = 1e-7
MODES = ("CNN", "GAN")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


@dataclass
class LossReport:
    recon_mse: float = 0.0
    recon_l1: float = 0.0
    inside_mse: float = 0.0
    inside_l1: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    FIELDS = ("recon_mse", "recon_l1", "inside_mse", "inside_l1", "adv_g", "adv_d", "total_g", "total_d")

    def to_line(self) -> str:
        """Space-separated values in ``FIELDS`` order, 6 decimals."""
        return " ".join(f"{v:.6f}" for v in astuple(self))

    @classmethod
    def from_line(cls, line: str) -> "LossReport":
        vals = [float(v) for v in line.split()]
        if len(vals) != len(cls.FIELDS):
            raise ValueError(f"expected {len(cls.FIELDS)} values, got {len(vals)}")
        return cls(*vals)

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            raise ValueError("no reports to average")
        n = len(reports)
        return cls(*[sum(getattr(r, f.name) for r in reports) / n for f in fields(cls)])


def _same_shape(a, b, what="volumes"):
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_losses(target: torch.Tensor, recon: torch.Tensor):
    _same_shape(target, recon)
    diff = target - recon
    return (diff ** 2).mean(), diff.abs().mean()


def masked_losses(target: torch.Tensor, recon: torch.Tensor, mask: torch.Tensor):
    _same_shape(target, recon)
    _same_shape(target, mask, "volume and mask")
    mask = mask.to(recon.dtype)
    return recon_losses(target * mask, recon * mask)


def _check_probs(p: torch.Tensor):
    if not torch.isfinite(p).all():
        raise ValueError("discriminator output contains non-finite values")


def adv_generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    _check_probs(d_fake)
    return -torch.log(d_fake.clamp(EPS, 1 - EPS)).mean()


def adv_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    _same_shape(d_real, d_fake, "probability grids")
    _check_probs(d_real)
    _check_probs(d_fake)
    return (-torch.log(d_real.clamp(EPS, 1 - EPS)).mean()
            - torch.log1p(-d_fake.clamp(EPS, 1 - EPS)).mean())


def compose(parts: dict, weights: LossWeights, mode: str, use_masked: bool) -> dict:
    """Zero out disabled terms and add ``total_g`` / ``total_d``.

    Works on floats or tensors.  In CNN mode the adversarial terms vanish;
    with ``use_masked`` false the inside terms vanish.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out = {name: parts.get(name, 0.0) for name in LossReport.FIELDS[:6]}
    if mode == "CNN":
        out["adv_g"] = out["adv_d"] = 0.0
    if not use_masked:
        out["inside_mse"] = out["inside_l1"] = 0.0
    sim = out["recon_mse"] + out["recon_l1"] + out["inside_mse"] + out["inside_l1"]
    out["total_g"] = weights.alpha * sim + weights.beta * out["adv_g"]
    out["total_d"] = weights.beta * out["adv_d"]
    return out


def total_losses(parts: dict, weights: LossWeights | None = None, mode: str = "GAN",
                 use_masked: bool = True) -> LossReport:
    out = compose(parts, weights or LossWeights(), mode, use_masked)
    return LossReport(**{k: float(v) for k, v in out.items()})
