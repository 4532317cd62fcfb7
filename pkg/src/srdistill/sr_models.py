"""SRCNN / VDSR / EDSR at configurable size, the MSE trainer and flat gradients."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, TrainingError
from .imaging import upscale

log = logging.getLogger(__name__)

DEFAULT_CONFIGS = {
    "srcnn": {"channels": 3, "kernels": [9, 5, 5], "widths": [32, 16]},
    "vdsr": {"channels": 3, "depth": 8, "width": 32},
    "edsr": {"channels": 3, "blocks": 4, "width": 32, "res_scale": 1.0},
}


class SRModel(nn.Module):
    architecture: str = ""

    def __init__(self, scale: int, arch_config: dict):
        super().__init__()
        self.scale = scale
        self.arch_config = arch_config
        self.channels = arch_config["channels"]

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.architecture} expects (N, {self.channels}, H, W), "
                             f"got {tuple(x.shape)}")
        return x

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class SRCNN(SRModel):
    architecture = "srcnn"

    def __init__(self, scale, arch_config):
        super().__init__(scale, arch_config)
        k1, k2, k3 = arch_config["kernels"]
        n1, n2 = arch_config["widths"]
        c = self.channels
        self.conv1 = nn.Conv2d(c, n1, k1, padding=k1 // 2)
        self.conv2 = nn.Conv2d(n1, n2, k2, padding=k2 // 2)
        self.conv3 = nn.Conv2d(n2, c, k3, padding=k3 // 2)

    def forward(self, x):
        x = upscale(self.check_input(x), self.scale)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.conv3(x)


class VDSR(SRModel):
    """Residual conv stack on the bicubic-upsampled input."""

    architecture = "vdsr"

    def __init__(self, scale, arch_config):
        super().__init__(scale, arch_config)
        depth, width, c = arch_config["depth"], arch_config["width"], self.channels
        if depth < 2:
            raise ConfigError(f"VDSR depth must be >= 2, got {depth}")
        chans = [c] + [width] * (depth - 1) + [c]
        self.layers = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans, chans[1:]))

    def forward(self, x):
        up = upscale(self.check_input(x), self.scale)
        h = up
        for conv in self.layers[:-1]:
            h = F.relu(conv(h))
        return up + self.layers[-1](h)


class ResBlock(nn.Module):
    def __init__(self, width, res_scale):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.conv2(F.relu(self.conv1(x)))


def _upsampler(width: int, scale: int) -> nn.Sequential:
    if scale == 1:
        return nn.Sequential()
    if scale == 3:
        return nn.Sequential(nn.Conv2d(width, 9 * width, 3, padding=1), nn.PixelShuffle(3))
    if scale & (scale - 1):
        raise ConfigError(f"EDSR upsampler supports scales 1, 3 and powers of two, got {scale}")
    layers = []
    for _ in range(int(math.log2(scale))):
        layers += [nn.Conv2d(width, 4 * width, 3, padding=1), nn.PixelShuffle(2)]
    return nn.Sequential(*layers)


class EDSR(SRModel):
    """Residual trunk on the native LR input followed by a sub-pixel upsampler."""

    architecture = "edsr"

    def __init__(self, scale, arch_config):
        super().__init__(scale, arch_config)
        width, c = arch_config["width"], self.channels
        self.head = nn.Conv2d(c, width, 3, padding=1)
        self.body = nn.Sequential(*(ResBlock(width, arch_config["res_scale"])
                                    for _ in range(arch_config["blocks"])))
        self.body_tail = nn.Conv2d(width, width, 3, padding=1)
        self.upsampler = _upsampler(width, scale)
        self.tail = nn.Conv2d(width, c, 3, padding=1)

    def forward(self, x):
        x = self.check_input(x)
        h = self.head(x)
        h = h + self.body_tail(self.body(h))
        return self.tail(self.upsampler(h))


ARCHITECTURES = {"srcnn": SRCNN, "vdsr": VDSR, "edsr": EDSR}


def build_model(architecture: str, scale: int, arch_config: dict | None = None,
                rng_seed: int = 0) -> SRModel:
    arch = architecture.lower()
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {architecture!r}; "
                          f"choose from {sorted(ARCHITECTURES)}")
    if not isinstance(scale, (int, np.integer)) or scale < 1:
        raise ConfigError(f"scale must be a positive integer, got {scale!r}")
    unknown = set(arch_config or {}) - set(DEFAULT_CONFIGS[arch])
    if unknown:
        raise ConfigError(f"unknown {arch} config keys: {sorted(unknown)}")
    cfg = {**DEFAULT_CONFIGS[arch], **(arch_config or {})}
    with torch.random.fork_rng():
        torch.manual_seed(rng_seed)
        return ARCHITECTURES[arch](int(scale), cfg)


def forward(model: SRModel, lr_batch: torch.Tensor) -> torch.Tensor:
    return model(lr_batch)


def sr_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(pred, target)


@dataclass(frozen=True)
class GradientVector:
    """Per-parameter gradients in the model's ``named_parameters`` order."""

    names: tuple[str, ...]
    grads: tuple[torch.Tensor, ...]

    def __len__(self):
        return sum(g.numel() for g in self.grads)

    @property
    def num_layers(self) -> int:
        return len(self.grads)

    def flat(self) -> torch.Tensor:
        return torch.cat([g.reshape(-1) for g in self.grads])

    def scaled(self, factors: Sequence[float]) -> "GradientVector":
        return GradientVector(self.names, tuple(g * f for g, f in zip(self.grads, factors)))


def flat_gradient(model: SRModel, batch, create_graph: bool = False) -> GradientVector:
    """Gradient of ``sr_loss`` on ``batch = (lr, hr, ...)`` w.r.t. every parameter.

    With ``create_graph`` the result stays differentiable w.r.t. the batch, which
    is what gradient matching needs on the synthetic side.
    """
    lr, hr = batch[0], batch[1]
    named = [(n, p) for n, p in model.named_parameters()]
    loss = sr_loss(model(lr), hr)
    grads = torch.autograd.grad(loss, [p for _, p in named], create_graph=create_graph,
                                allow_unused=True)
    grads = tuple(torch.zeros_like(p) if g is None else g for (_, p), g in zip(named, grads))
    if not create_graph:
        grads = tuple(g.detach() for g in grads)
    return GradientVector(tuple(n for n, _ in named), grads)


@dataclass
class TrainSchedule:
    steps: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def make_optimizer(params, name: str, lr: float, momentum: float = 0.9):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    raise ConfigError(f"unknown optimizer {name!r}")


def train(model: SRModel, dataset, schedule: TrainSchedule):
    """Minimise MSE on batches drawn from ``dataset.sample(batch_size, rng)``.

    Trains ``model`` in place and returns it with the per-step loss history.
    """
    history: list[float] = []
    if schedule.steps == 0:
        return model, history
    if getattr(dataset, "scale", model.scale) != model.scale:
        raise ConfigError(f"dataset scale {dataset.scale} != model scale {model.scale}")
    rng = np.random.default_rng(schedule.rng_seed)
    opt = make_optimizer(model.parameters(), schedule.optimizer, schedule.learning_rate)
    dtype = next(model.parameters()).dtype
    model.train()
    for step in range(schedule.steps):
        lr, hr = dataset.sample(schedule.batch_size, rng)[:2]
        loss = sr_loss(model(lr.to(dtype)), hr.to(dtype))
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
    model.eval()
    return model, history


@torch.no_grad()
def predict(model: SRModel, lr_image: np.ndarray) -> np.ndarray:
    """Super-resolve one ``(H, W, C)`` image; output clipped to [0, 1]."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.moveaxis(lr_image, -1, 0)[None].copy(), dtype=dtype)
    y = model(x)[0].clamp(0, 1)
    return np.moveaxis(y.double().numpy(), 0, -1)


def save_checkpoint(model: SRModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"architecture": model.architecture, "scale": model.scale,
                "arch_config": model.arch_config, "state_dict": model.state_dict()}, path)
    return path


def load_checkpoint(path) -> SRModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    model = build_model(ckpt["architecture"], ckpt["scale"], ckpt["arch_config"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
