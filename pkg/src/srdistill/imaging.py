"""Image primitives: layout conversion, PNG I/O and a differentiable bicubic resize.

Images at module boundaries are ``float64`` numpy arrays of shape ``(H, W, C)``
with values in ``[0, 1]``.  Anything that has to be differentiated goes through
torch tensors laid out as ``(..., C, H, W)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, IngestError, ShapeError

__all__ = [
    "DegradationConfig",
    "cubic",
    "resize_weights",
    "bicubic_resize",
    "mod_crop",
    "degrade",
    "upscale",
    "to_tensor",
    "to_image",
    "read_png",
    "write_png",
    "rgb_to_y",
]


@dataclass(frozen=True)
class DegradationConfig:
    scale: int = 2
    method: str = "bicubic"

    def __post_init__(self):
        if not isinstance(self.scale, (int, np.integer)) or self.scale < 1:
            raise ConfigError(f"scale must be a positive integer, got {self.scale!r}")
        if self.method != "bicubic":
            raise ConfigError(f"unsupported degradation method {self.method!r}")


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (a = -0.5, the PIL/MATLAB choice)."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=128)
def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` matrix resampling one axis.

    The kernel is stretched by the downscale factor (antialiasing) and taps
    falling outside the image are dropped with the rest renormalised.
    """
    ratio = n_in / n_out
    support_scale = max(ratio, 1.0)
    support = 2.0 * support_scale
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * ratio
        lo = max(int(math.floor(center - support)), 0)
        hi = min(int(math.ceil(center + support)) + 1, n_in)
        taps = np.arange(lo, hi)
        k = cubic((taps + 0.5 - center) / support_scale)
        w[i, lo:hi] = k / k.sum()
    w.setflags(write=False)
    return w


def bicubic_resize(t: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize the last two axes of ``t``; differentiable in ``t``."""
    h, w = t.shape[-2:]
    if (h, w) == (out_h, out_w):
        return t
    wh = _weights_tensor(h, out_h, t.dtype).to(t.device)
    ww = _weights_tensor(w, out_w, t.dtype).to(t.device)
    return wh @ t @ ww.T


@lru_cache(maxsize=256)
def _weights_tensor(n_in: int, n_out: int, dtype: torch.dtype) -> torch.Tensor:
    return torch.tensor(resize_weights(n_in, n_out), dtype=dtype)


def mod_crop(t, scale: int):
    """Center-crop the spatial axes to the largest multiple of ``scale``.

    Works for numpy ``(H, W, C)`` images and torch ``(..., C, H, W)`` tensors.
    """
    if isinstance(t, np.ndarray):
        h, w = t.shape[:2]
    else:
        h, w = t.shape[-2:]
    nh, nw = h - h % scale, w - w % scale
    if nh == 0 or nw == 0:
        raise ShapeError(f"image {h}x{w} is smaller than scale {scale}")
    top, left = (h - nh) // 2, (w - nw) // 2
    if isinstance(t, np.ndarray):
        return t[top:top + nh, left:left + nw]
    return t[..., top:top + nh, left:left + nw]


def _as_scale(config) -> int:
    if isinstance(config, DegradationConfig):
        return config.scale
    return DegradationConfig(scale=config).scale


def degrade(hr, config) -> np.ndarray | torch.Tensor:
    """Bicubic downsampling by ``config.scale`` (an int is accepted too).

    numpy input returns numpy; tensor input stays in the autograd graph.
    """
    scale = _as_scale(config)
    if isinstance(hr, np.ndarray):
        return to_image(degrade(to_tensor(hr), scale))
    hr = mod_crop(hr, scale)
    if scale == 1:
        return hr
    h, w = hr.shape[-2:]
    return bicubic_resize(hr, h // scale, w // scale).clamp(0.0, 1.0)


def upscale(lr: torch.Tensor, scale: int) -> torch.Tensor:
    """Bicubic upsampling used as the pre-upsampling stage of SRCNN and VDSR."""
    h, w = lr.shape[-2:]
    return bicubic_resize(lr, h * scale, w * scale)


def to_tensor(img: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """``(H, W, C)`` array to ``(C, H, W)`` tensor (``(N, H, W, C)`` batches too)."""
    arr = np.ascontiguousarray(np.moveaxis(np.asarray(img), -1, -3))
    return torch.as_tensor(arr, dtype=dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach().cpu().double().numpy(), -3, -1).copy()


def read_png(path: str | Path, channels: int = 3) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = "RGB" if channels == 3 else "L"
            arr = np.asarray(im.convert(mode))
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise IngestError(f"cannot decode image {Path(path).name}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, img: np.ndarray) -> None:
    q = quantize(img)
    if q.shape[-1] == 1:
        q = q[:, :, 0]
    Image.fromarray(q).save(path, format="PNG")


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma on a [0, 1] scale, returned as ``(H, W, 1)``."""
    y = (16.0 + 65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2]) / 255.0
    return y[..., None]
