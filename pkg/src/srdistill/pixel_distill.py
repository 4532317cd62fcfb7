"""Gradient-matching distillation of SR training data in pixel space.

Each pseudo-label (one source image) owns ``ipc`` synthetic HR images.  Their LR
partners are always ``degrade(hr)`` so gradients reach the pixels through both
the network input and the regression target.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .data_prep import DatasetManifest, PatchDataset, PatchGroup, save_dataset
from .errors import ConfigError, DataError, DistillationError, ShapeError
from .imaging import bicubic_resize, degrade, to_image, to_tensor
from .sr_models import (
    GradientVector,
    SRModel,
    TrainSchedule,
    build_model,
    flat_gradient,
    load_checkpoint,
    train,
)

log = logging.getLogger(__name__)


def grad_match_loss(g_syn: GradientVector, g_real: GradientVector,
                    mode: str = "layerwise") -> torch.Tensor:
    """Sum over parameters of the cosine distance between two gradients.

    A parameter whose gradient vanishes on exactly one side costs 1; on both
    sides it costs 0.  ``mode="whole"`` treats the concatenation as one layer.
    """
    if g_syn.names != g_real.names or any(a.shape != b.shape
                                          for a, b in zip(g_syn.grads, g_real.grads)):
        raise ShapeError("gradient partitions differ")
    if mode == "whole":
        pairs = [(g_syn.flat(), g_real.flat())]
    elif mode == "layerwise":
        pairs = list(zip(g_syn.grads, g_real.grads))
    else:
        raise ConfigError(f"unknown matching mode {mode!r}")
    total = torch.zeros((), dtype=torch.float64)
    for a, b in pairs:
        a, b = a.reshape(-1).double(), b.reshape(-1).double()
        na, nb = a.norm(), b.norm()
        a_zero, b_zero = na.item() == 0.0, nb.item() == 0.0
        if a_zero and b_zero:
            continue
        if a_zero or b_zero:
            total = total + 1.0
            continue
        total = total + (1.0 - (a @ b) / (na * nb))
    return total


@dataclass
class SyntheticSet:
    """Trainable HR images stored as one ``(labels, ipc, C, H, W)`` leaf tensor."""

    images: torch.Tensor
    scale: int
    mode: str = "pixel"

    @property
    def num_labels(self) -> int:
        return self.images.shape[0]

    @property
    def ipc(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[-1]

    def image(self, label: int, k: int = 0) -> np.ndarray:
        return to_image(self.images[label, k])

    def as_groups(self) -> list[PatchGroup]:
        return [PatchGroup(f"syn_{c:05d}", c, [self.image(c, k) for k in range(self.ipc)],
                           [(0, 0)] * self.ipc)
                for c in range(self.num_labels)]


@dataclass
class DistillConfig:
    iterations: int = 1000
    ipc: int = 1
    synth_size: int = 96
    synth_lr: float = 0.1
    momentum: float = 0.5
    batch_real: int = 8
    patch_size: int | None = None  # None: whole sub-images
    net_update_steps: int = 0
    net_update_lr: float = 1e-4
    net_batch: int = 8
    reference: str = "random_init"
    init: str = "downscale"
    architecture: str = "srcnn"
    checkpoint: str | None = None
    match_mode: str = "layerwise"
    snapshot_every: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.synth_lr < 0 or self.net_update_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.reference not in ("random_init", "pretrained"):
            raise ConfigError(f"unknown reference {self.reference!r}")
        if self.init not in ("noise", "downscale"):
            raise ConfigError(f"unknown init strategy {self.init!r}")


@dataclass
class DistillHistory:
    losses: list[float] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    def smoothed(self, window: int) -> np.ndarray:
        """Trailing moving average; entry ``i`` averages ``losses[i-window+1 : i+1]``."""
        x = np.asarray(self.losses, dtype=np.float64)
        c = np.cumsum(np.insert(x, 0, 0.0))
        idx = np.arange(1, len(x) + 1)
        lo = np.maximum(idx - window, 0)
        return (c[idx] - c[lo]) / (idx - lo)


def _source_image(group: PatchGroup) -> np.ndarray:
    return group.source if group.source is not None else group.sub_images[0]


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    t = bicubic_resize(to_tensor(img), size, size).clamp(0, 1)
    return to_image(t)


def init_synthetic(manifest: DatasetManifest, ipc: int, synth_size: int, strategy: str,
                   rng_seed: int = 0, scale: int | None = None,
                   dtype=torch.float32) -> SyntheticSet:
    scale = scale or manifest.scale
    if synth_size < scale or synth_size % scale:
        raise ConfigError(f"synth_size {synth_size} must be a positive multiple of scale {scale}")
    if ipc < 1:
        raise ConfigError(f"ipc must be >= 1, got {ipc}")
    rng = np.random.default_rng(rng_seed)
    channels = manifest.groups[0].sub_images[0].shape[-1]
    shape = (manifest.num_groups, ipc, channels, synth_size, synth_size)
    if strategy == "noise":
        data = rng.uniform(0.0, 1.0, shape)
    elif strategy == "downscale":
        data = np.empty(shape)
        for c, g in enumerate(manifest.groups):
            src = _source_image(g)
            data[c, 0] = np.moveaxis(resize_image(src, synth_size), -1, 0)
            h, w = src.shape[:2]
            for k in range(1, ipc):
                side = int(rng.integers(max(min(h, w) // 2, 1), min(h, w) + 1))
                r, col = rng.integers(h - side + 1), rng.integers(w - side + 1)
                crop = src[r:r + side, col:col + side]
                data[c, k] = np.moveaxis(resize_image(crop, synth_size), -1, 0)
    else:
        raise ConfigError(f"unknown init strategy {strategy!r}")
    images = torch.tensor(data, dtype=dtype, requires_grad=True)
    return SyntheticSet(images, scale)


def synthetic_pair(y_s: torch.Tensor, scale: int) -> tuple[torch.Tensor, torch.Tensor]:
    return degrade(y_s, scale), y_s


def _step_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def match_label(model: SRModel, y_s: torch.Tensor, real, scale: int,
                mode: str = "layerwise") -> torch.Tensor:
    """Matching loss for one label's synthetic HR batch against a real batch."""
    dtype = next(model.parameters()).dtype
    g_real = flat_gradient(model, (real[0].to(dtype), real[1].to(dtype)))
    g_syn = flat_gradient(model, synthetic_pair(y_s.to(dtype), scale), create_graph=True)
    return grad_match_loss(g_syn, g_real, mode)


def distill_step(S: SyntheticSet, manifest: DatasetManifest, model: SRModel,
                 config: DistillConfig, optimizer: torch.optim.Optimizer | None = None,
                 iteration: int = 0):
    """One matching update of every label's synthetic images; returns ``(S, loss)``."""
    if model.scale != S.scale:
        raise ConfigError(f"model scale {model.scale} != synthetic scale {S.scale}")
    if S.num_labels != manifest.num_groups:
        raise DataError(f"{S.num_labels} synthetic labels for {manifest.num_groups} groups")
    for g in manifest.groups:
        if len(g) == 0:
            raise DataError(f"group {g.pseudo_label} ({g.source_id}) is empty")
    if optimizer is None:
        optimizer = torch.optim.SGD([S.images], lr=config.synth_lr, momentum=config.momentum)
    patch = config.patch_size or min(manifest.groups[0].size)
    dataset = PatchDataset(manifest.groups, patch, S.scale)
    rng = _step_rng(config.rng_seed, iteration)
    grad = torch.zeros_like(S.images)
    total = 0.0
    for c in range(S.num_labels):
        real = dataset.sample(config.batch_real, rng, group=c)
        loss = match_label(model, S.images[c], real, S.scale, config.match_mode)
        if loss.requires_grad:
            grad += torch.autograd.grad(loss, S.images)[0]
        total += loss.item()
    optimizer.zero_grad(set_to_none=True)
    S.images.grad = grad
    optimizer.step()
    with torch.no_grad():
        S.images.clamp_(0.0, 1.0)
    return S, total


def _snapshot(S: SyntheticSet) -> np.ndarray:
    return S.images.detach().cpu().numpy().copy()


def distill(manifest: DatasetManifest, config: DistillConfig,
            model_factory: Callable[[int], SRModel] | None = None):
    """Alternate matching steps with optional reference-network updates.

    ``model_factory(seed)`` builds the reference network.  With
    ``reference="pretrained"`` the network is built (or loaded from
    ``config.checkpoint``) once; with ``"random_init"`` it is rebuilt from a
    fresh seed every iteration.
    """
    scale = manifest.scale
    if model_factory is None:
        def model_factory(seed):
            return build_model(config.architecture, scale, rng_seed=seed)

    S = init_synthetic(manifest, config.ipc, config.synth_size, config.init,
                       config.rng_seed, scale)
    history = DistillHistory()
    if config.snapshot_every:
        history.snapshots[0] = _snapshot(S)
    optimizer = torch.optim.SGD([S.images], lr=config.synth_lr, momentum=config.momentum)
    model = None
    if config.reference == "pretrained":
        model = load_checkpoint(config.checkpoint) if config.checkpoint else model_factory(config.rng_seed)
    for it in range(config.iterations):
        if config.reference == "random_init":
            model = model_factory(config.rng_seed * 1_000_003 + it)
        S, loss = distill_step(S, manifest, model, config, optimizer, iteration=it)
        if not math.isfinite(loss):
            raise DistillationError(f"non-finite matching loss at iteration {it}")
        history.losses.append(loss)
        if config.net_update_steps > 0:
            schedule = TrainSchedule(config.net_update_steps, config.net_batch,
                                     config.net_update_lr, "adam", config.rng_seed + it)
            patch = min(config.patch_size or S.size, S.size)
            train(model, PatchDataset(S.as_groups(), patch, scale), schedule)
        if config.snapshot_every and (it + 1) % config.snapshot_every == 0:
            history.snapshots[it + 1] = _snapshot(S)
        if it % 100 == 0:
            log.info("pixel distill iter %d loss %.5f", it, loss)
    return S, history


def synthetic_manifest(groups: list[PatchGroup], scale: int, size: int, name: str,
                       extra: dict | None = None) -> DatasetManifest:
    return DatasetManifest(corpus_name=name, scale=scale, sub_image_size=size, stride=size,
                           groups=groups, extra=extra or {})


def export_synthetic(S: SyntheticSet, out_dir, name: str = "synthetic", extra: dict | None = None):
    meta = {"kind": "synthetic", "mode": S.mode, "ipc": S.ipc, **(extra or {})}
    manifest = synthetic_manifest(S.as_groups(), S.scale, S.size, name, meta)
    return save_dataset(manifest, out_dir)
