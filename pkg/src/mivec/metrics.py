"""PSNR, SSIM, bits-per-pixel and Bjontegaard delta-rate."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError
from .seqdata import to_bytes

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    ssim: float
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and self.bpp > 0):
            raise ValidationError(f"bpp must be positive and finite, got {self.bpp}")
        if not (math.isfinite(self.psnr) and math.isfinite(self.ssim)):
            raise ValidationError("RD point quality values must be finite")


@dataclass
class BDRateReport:
    bd_rate_percent: float
    anchor_coefficients: list[float] = field(default_factory=list)
    test_coefficients: list[float] = field(default_factory=list)
    interval: tuple[float, float] = (0.0, 0.0)


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse_bytes(a, b) -> float:
    a, b = _check_pair(a, b)
    diff = to_bytes(a).astype(np.float64) - to_bytes(b).astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(a, b) -> float:
    """PSNR in dB on the 8-bit scale, capped at 99 dB."""
    mse = mse_bytes(a, b)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


@lru_cache(maxsize=None)
def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = np.einsum("hwk,k->hw", sliding_window_view(img, len(g), axis=1), g)
    return np.einsum("hwk,k->hw", sliding_window_view(rows, len(g), axis=0), g)


def ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float = 255.0) -> float:
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5) per channel on 8-bit values, averaged."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValidationError(f"SSIM needs frames of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    x = to_bytes(a).astype(np.float64)
    y = to_bytes(b).astype(np.float64)
    return float(np.mean([ssim_channel(x[..., c], y[..., c]) for c in range(x.shape[-1])]))


def bpp(total_bits: int, num_views: int, num_frames: int, height: int, width: int) -> float:
    return total_bits / (num_views * num_frames * height * width)


def bd_rate(
    anchor: Sequence[RDPoint],
    test: Sequence[RDPoint],
    quality_key: str = "psnr",
) -> BDRateReport:
    """Bjontegaard delta-rate in percent; negative means the test curve saves rate."""
    if quality_key not in ("psnr", "ssim"):
        raise ValidationError(f"quality_key must be 'psnr' or 'ssim', got {quality_key!r}")
    if len(anchor) < 4 or len(test) < 4:
        raise ValidationError("BD-rate needs at least four points per curve")
    qa = np.array([getattr(p, quality_key) for p in anchor], dtype=np.float64)
    qt = np.array([getattr(p, quality_key) for p in test], dtype=np.float64)
    ra = np.log10([p.bpp for p in anchor])
    rt = np.log10([p.bpp for p in test])
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not lo < hi:
        raise ValidationError(f"quality ranges do not overlap ({lo:.4f} >= {hi:.4f})")
    pa = np.polyfit(qa, ra, 3)
    pt = np.polyfit(qt, rt, 3)
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    mean_diff = (area_t - area_a) / (hi - lo)
    return BDRateReport(
        float((10.0**mean_diff - 1.0) * 100.0),
        pa.tolist(),
        pt.tolist(),
        (float(lo), float(hi)),
    )


def write_rd_csv(path, points: Iterable[RDPoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "bpp", "psnr", "ssim"])
        for p in points:
            writer.writerow([p.label, repr(p.bpp), repr(p.psnr), repr(p.ssim)])


def read_rd_csv(path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [RDPoint(float(r["bpp"]), float(r["psnr"]), float(r["ssim"]), r.get("label", "")) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed RD csv {path}: {exc}") from exc


def plot_rd(curves: dict[str, Sequence[RDPoint]], path) -> None:
    """Write PSNR and SSIM rate-distortion curves side by side (format from suffix)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name, pts in curves.items():
        pts = sorted(pts, key=lambda p: p.bpp)
        xs = [p.bpp for p in pts]
        axes[0].plot(xs, [p.psnr for p in pts], marker="o", label=name)
        axes[1].plot(xs, [p.ssim for p in pts], marker="o", label=name)
    for ax, ylab in zip(axes, ("PSNR (dB)", "SSIM")):
        ax.set_xlabel("bpp")
        ax.set_ylabel(ylab)
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
