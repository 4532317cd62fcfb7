"""PSNR, SSIM and a pluggable perceptual distance.

All metrics take ``(H, W, C)`` arrays in [0, 1] and compute in float64.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

from .errors import MetricError, ShapeError
from .imaging import degrade, mod_crop, rgb_to_y
from .sr_models import predict

log = logging.getLogger(__name__)

PSNR_CAP = 100.0

PerceptualPlugin = Callable[[np.ndarray, np.ndarray], float]
_PLUGINS: dict[str, PerceptualPlugin] = {}


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(max_val ** 2 / mse), PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         max_val: float = 1.0, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, averaged over channels."""
    a, b = _pair(a, b)
    h, w = a.shape[:2]
    if window % 2 == 0:
        raise MetricError(f"SSIM window must be odd, got {window}")
    if min(h, w) < window:
        raise MetricError(f"image {h}x{w} is smaller than the {window}px SSIM window")
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    g = gaussian_window(window, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.clip(np.mean(vals), -1.0, 1.0))


def register_perceptual(name: str, fn: PerceptualPlugin) -> None:
    _PLUGINS[name] = fn


def unregister_perceptual(name: str) -> None:
    _PLUGINS.pop(name, None)


def get_perceptual(name: str | None) -> PerceptualPlugin | None:
    return _PLUGINS.get(name) if name else None


def perceptual(a, b, plugin: PerceptualPlugin | str | None) -> float | None:
    """Plugin distance, or ``None`` when no plugin is available."""
    fn = get_perceptual(plugin) if isinstance(plugin, str) or plugin is None else plugin
    if fn is None:
        return None
    a, b = _pair(a, b)
    d = float(fn(a, b))
    if not d >= 0:
        raise MetricError(f"perceptual plugin returned {d}; distances must be >= 0")
    return d


@dataclass
class ImageMetrics:
    name: str
    psnr: float | None = None
    ssim: float | None = None
    perceptual: float | None = None
    error: str | None = None


@dataclass
class MetricsReport:
    dataset: str
    model: str
    images: list[ImageMetrics] = field(default_factory=list)

    @property
    def ok(self) -> list[ImageMetrics]:
        return [m for m in self.images if m.error is None]

    def _mean(self, attr) -> float | None:
        vals = [getattr(m, attr) for m in self.ok]
        if not vals or any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    @property
    def psnr(self):
        return self._mean("psnr")

    @property
    def ssim(self):
        return self._mean("ssim")

    @property
    def perceptual(self):
        return self._mean("perceptual")

    def row(self) -> dict:
        return {"dataset": self.dataset, "model": self.model, "psnr": self.psnr,
                "ssim": self.ssim, "perceptual": self.perceptual,
                "n_images": len(self.ok), "n_errors": len(self.images) - len(self.ok)}


def make_testset(images, scale: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """``(name, HR)`` pairs to ``(name, LR, HR)`` with HR mod-cropped to the scale."""
    out = []
    for name, hr in images:
        hr = mod_crop(hr, scale)
        out.append((name, degrade(hr, scale), hr))
    return out


def evaluate_model(model, testset, dataset_name: str = "test", plugin=None,
                   crop_border: int = 0, y_only: bool = False,
                   predict_fn=None) -> MetricsReport:
    """Super-resolve every ``(name, LR, HR)`` item and score it against HR."""
    predict_fn = predict_fn or (lambda lr: predict(model, lr))
    report = MetricsReport(dataset_name, getattr(model, "architecture", type(model).__name__))
    for name, lr, hr in testset:
        try:
            sr = predict_fn(lr)
            if sr.shape != hr.shape:
                raise ShapeError(f"SR output {sr.shape} vs HR {hr.shape}")
            a, b = sr, hr
            if y_only:
                a, b = rgb_to_y(a), rgb_to_y(b)
            if crop_border:
                a = a[crop_border:-crop_border, crop_border:-crop_border]
                b = b[crop_border:-crop_border, crop_border:-crop_border]
            report.images.append(ImageMetrics(name, psnr(a, b), ssim(a, b),
                                              perceptual(a, b, plugin)))
        except Exception as exc:
            log.warning("evaluation of %s failed: %s", name, exc)
            report.images.append(ImageMetrics(name, error=f"{type(exc).__name__}: {exc}"))
    return report
