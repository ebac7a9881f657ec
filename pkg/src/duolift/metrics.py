"""Reconstruction metrics: PSNR and SSIM in 2D (per slice) and 3D, DICE,
and a pluggable per-slice perceptual distance.

2D metrics slice along ``SLICE_AXIS`` (axis 1, height), i.e. axial slices
of a ``(D, H, W)`` volume.  SSIM uses an 11-wide Gaussian window with
sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1, and averages over every
position where the window fits entirely inside the image (no padding).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .phantom import grid_of, threshold_segment

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SLICE_AXIS = 1
WIN = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(grid_of(x), dtype=np.float64)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _psnr(mse: float, max_val: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def psnr3d(target, recon, max_val: float = 1.0) -> float:
    a, b = _arr(target), _arr(recon)
    _check_pair(a, b)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    return _psnr(float(np.mean((a - b) ** 2)), max_val)


def psnr2d(target, recon, max_val: float = 1.0, axis: int = SLICE_AXIS) -> float:
    a, b = _arr(target), _arr(recon)
    _check_pair(a, b)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    other = tuple(i for i in range(a.ndim) if i != axis)
    mses = np.mean((a - b) ** 2, axis=other)
    return float(np.mean([_psnr(float(m), max_val) for m in mses]))


def gaussian_window(size: int = WIN, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray, axes) -> np.ndarray:
    """Separable correlation over ``axes``, keeping only full-window positions."""
    for ax in axes:
        x = np.tensordot(sliding_window_view(x, len(g), axis=ax), g, axes=([-1], [0]))
    return x


def _ssim_map(a, b, axes) -> np.ndarray:
    g = gaussian_window()
    for ax in axes:
        if a.shape[ax] < WIN:
            raise ValueError(f"axis {ax} has {a.shape[ax]} voxels, fewer than the {WIN}-wide window")
    c1, c2 = K1 ** 2, K2 ** 2
    mu_a, mu_b = _filter_valid(a, g, axes), _filter_valid(b, g, axes)
    saa = _filter_valid(a * a, g, axes) - mu_a ** 2
    sbb = _filter_valid(b * b, g, axes) - mu_b ** 2
    sab = _filter_valid(a * b, g, axes) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim2d(target, recon, axis: int = SLICE_AXIS) -> float:
    a, b = _arr(target), _arr(recon)
    _check_pair(a, b)
    axes = tuple(i for i in range(a.ndim) if i != axis)
    m = _ssim_map(a, b, axes)
    per_slice = np.moveaxis(m, axis, 0).reshape(m.shape[axis], -1).mean(1)
    return float(per_slice.mean())


def ssim3d(target, recon) -> float:
    a, b = _arr(target), _arr(recon)
    _check_pair(a, b)
    return float(np.mean(_ssim_map(a, b, (0, 1, 2))))


def dice(a, b) -> float:
    a, b = grid_of(a).astype(bool), grid_of(b).astype(bool)
    _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


class PerceptualBackend(Protocol):
    def __call__(self, x: np.ndarray, y: np.ndarray) -> float: ...


def rms_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Per-slice L2 backend: root-mean-square intensity difference."""
    return float(np.sqrt(np.mean((np.asarray(x, float) - np.asarray(y, float)) ** 2)))


def lpips_mean(target, recon, backend: Callable | None, axis: int = SLICE_AXIS) -> float | None:
    """Mean over slices of ``backend(target_slice, recon_slice)``.

    Returns ``None`` when no backend is configured or the backend fails.
    """
    if backend is None:
        return None
    a, b = _arr(target), _arr(recon)
    _check_pair(a, b)
    try:
        vals = [float(backend(np.take(a, k, axis), np.take(b, k, axis))) for k in range(a.shape[axis])]
    except Exception as exc:  # backend failures must not stop an evaluation
        log.warning("perceptual backend failed: %s", exc)
        return None
    return float(np.mean(vals))


@dataclass
class Thresholds:
    lung: float = 0.35  # air / lung below, soft tissue above
    vessel: float = 0.75
    body: float = 0.1  # anything above is patient, not background air
    wall: int = 2  # voxels of chest wall between skin and lung


def segment_lung(volume, t: float = Thresholds.lung, t_vessel: float = Thresholds.vessel,
                 t_body: float = Thresholds.body, wall: int = Thresholds.wall) -> np.ndarray:
    """Lung = voxels inside the body, at least ``wall`` voxels from the skin,
    that are darker than soft tissue or brighter than it (vessels), with
    remaining holes (nodules) filled.

    The body comes from a low threshold so a blurred chest wall that dips
    under ``t`` does not open the body to the outside air.
    """
    v = np.asarray(getattr(volume, "data", volume))
    body = ndimage.binary_fill_holes(v >= t_body)
    inner = ndimage.binary_erosion(body, iterations=wall) if wall else body
    return ndimage.binary_fill_holes(inner & ((v < t) | (v >= t_vessel)))


def segment_vessel(volume, lung: np.ndarray, t: float = Thresholds.vessel) -> np.ndarray:
    return threshold_segment(volume, t, label="vessel").data.astype(bool) & lung


@dataclass
class MetricReport:
    psnr2d: float
    psnr3d: float
    ssim2d: float
    ssim3d: float
    lpips: float | None = None
    dice_lung: float | None = None
    dice_vessel: float | None = None

    FIELDS = ("psnr2d", "psnr3d", "ssim2d", "ssim3d", "lpips", "dice_lung", "dice_vessel")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def evaluate(target, recon, lung_gt=None, vessel_gt=None, thresholds: Thresholds | None = None,
             backend: Callable | None = None) -> MetricReport:
    th = thresholds or Thresholds()
    a, b = _arr(target), _arr(recon)
    _check_pair(a, b)
    rep = MetricReport(
        psnr2d=psnr2d(a, b), psnr3d=psnr3d(a, b), ssim2d=ssim2d(a, b), ssim3d=ssim3d(a, b),
        lpips=lpips_mean(a, b, backend),
    )
    if lung_gt is not None:
        lung = segment_lung(b, th.lung, th.vessel, th.body, th.wall)
        rep.dice_lung = dice(lung_gt, lung)
        if vessel_gt is not None:
            rep.dice_vessel = dice(vessel_gt, segment_vessel(b, lung, th.vessel))
    return rep


@dataclass
class Summary:
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    n: int = 0


def aggregate(reports: list[MetricReport]) -> Summary:
    """Mean and population std per metric; absent values are skipped."""
    s = Summary(n=len(reports))
    for name in MetricReport.FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        s.mean[name] = float(np.mean(vals)) if vals else None
        s.std[name] = float(np.std(vals)) if vals else None
    return s


def render_table(summary: Summary, title: str = "") -> str:
    """Markdown table, one row per metric, ``mean ± std``."""
    lines = [f"### {title}", ""] if title else []
    lines += ["| metric | mean ± std |", "|---|---|"]
    for name in MetricReport.FIELDS:
        m, s = summary.mean.get(name), summary.std.get(name)
        cell = "n/a" if m is None else f"{m:.4f} ± {s:.4f}"
        lines.append(f"| {name} | {cell} |")
    lines.append(f"\n(n = {summary.n})")
    return "\n".join(lines)
