"""Distillation in the input latent space of a frozen image generator.

The generator is an interface: anything exposing ``latent_dim``, ``out_size``,
``parameters_list()`` and ``decode(z, params=None)`` works.  The built-in
``ConvDecoder`` is a small desk-scale stand-in that can be pretrained as the
decoder half of an autoencoder on the real corpus.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .data_prep import DatasetManifest, PatchDataset, PatchGroup, save_dataset
from .errors import ConfigError, DataError, DistillationError, InversionError
from .imaging import bicubic_resize, to_image, to_tensor
from .metrics import psnr
from .pixel_distill import (
    DistillHistory,
    _source_image,
    _step_rng,
    match_label,
    synthetic_manifest,
)
from .sr_models import SRModel, build_model, load_checkpoint

log = logging.getLogger(__name__)


class ConvDecoder(nn.Module):
    """``z -> (C, out_size, out_size)``: a linear stem on a 4x4 grid, then
    nearest-upsample + conv stages, sigmoid output."""

    def __init__(self, latent_dim: int = 64, out_size: int = 64, width: int = 64,
                 channels: int = 3, base: int = 4):
        super().__init__()
        stages = math.log2(out_size / base) if out_size >= base else -1
        if stages < 0 or stages != int(stages):
            raise ConfigError(f"out_size {out_size} must be {base} times a power of two")
        self.latent_dim, self.out_size, self.base = latent_dim, out_size, base
        self.config = {"latent_dim": latent_dim, "out_size": out_size, "width": width,
                       "channels": channels, "base": base}
        self.stem = nn.Linear(latent_dim, width * base * base)
        widths = [width]
        for i in range(int(stages)):
            widths.append(max(width // 2 ** ((i + 1) // 2), 16))
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(widths, widths[1:]))
        self.out = nn.Conv2d(widths[-1], channels, 3, padding=1)
        self.width = width

    def forward(self, z):
        h = self.stem(z).view(z.shape[0], self.width, self.base, self.base)
        h = F.leaky_relu(h, 0.2)
        for conv in self.convs:
            h = F.leaky_relu(conv(F.interpolate(h, scale_factor=2, mode="nearest")), 0.2)
        return torch.sigmoid(self.out(h))


class Generator:
    """Frozen-by-default wrapper exposing ``decode`` with optional parameter deltas."""

    def __init__(self, module: nn.Module):
        self.module = module.eval()
        self.latent_dim = module.latent_dim
        self.out_size = module.out_size
        for p in self.module.parameters():
            p.requires_grad_(False)

    def parameters_list(self) -> list[torch.Tensor]:
        return list(self.module.parameters())

    def param_names(self) -> list[str]:
        return [n for n, _ in self.module.named_parameters()]

    def decode(self, z: torch.Tensor, params=None) -> torch.Tensor:
        """Decode ``(d,)`` or ``(N, d)`` codes to ``(N, C, g, g)`` images in [0, 1]."""
        if z.ndim == 1:
            z = z.unsqueeze(0)
        if params is None:
            return self.module(z)
        return functional_call(self.module, dict(zip(self.param_names(), params)), (z,))

    def decode_with_deltas(self, z: torch.Tensor, deltas=None) -> torch.Tensor:
        if deltas is None:
            return self.decode(z)
        return self.decode(z, [p + d for p, d in zip(self.parameters_list(), deltas)])

    def state(self) -> dict:
        return {"config": self.module.config, "state_dict": self.module.state_dict()}


def build_toy_generator(latent_dim: int = 64, out_size: int = 64, rng_seed: int = 0,
                        width: int = 64, channels: int = 3) -> Generator:
    with torch.random.fork_rng():
        torch.manual_seed(rng_seed)
        return Generator(ConvDecoder(latent_dim, out_size, width, channels))


def load_generator(path) -> Generator:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    module = ConvDecoder(**ckpt["config"])
    module.load_state_dict(ckpt["state_dict"])
    return Generator(module)


class ConvEncoder(nn.Module):
    def __init__(self, latent_dim, in_size, channels=3, width=32):
        super().__init__()
        layers, c, s = [], channels, in_size
        while s > 4:
            layers += [nn.Conv2d(c, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c, s = width, s // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c * s * s, latent_dim)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


def resize_to(img: np.ndarray, size: int) -> torch.Tensor:
    """``(H, W, C)`` image to a ``(C, size, size)`` float32 tensor."""
    return bicubic_resize(to_tensor(img), size, size).clamp(0, 1).float()


def pretrain_autoencoder(generator: Generator, images, steps: int = 1000, batch_size: int = 16,
                         lr: float = 2e-3, rng_seed: int = 0) -> list[float]:
    """Fit the generator as the decoder of an autoencoder on ``images``.

    ``images`` are ``(H, W, C)`` arrays; each is resized to the generator's
    output size.  Returns the loss history; the generator is updated in place.
    """
    data = torch.stack([resize_to(im, generator.out_size) for im in images])
    with torch.random.fork_rng():
        torch.manual_seed(rng_seed)
        encoder = ConvEncoder(generator.latent_dim, generator.out_size, data.shape[1])
    decoder = generator.module.train()
    for p in decoder.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam([*encoder.parameters(), *decoder.parameters()], lr=lr)
    rng = np.random.default_rng(rng_seed)
    history = []
    for _ in range(steps):
        idx = torch.as_tensor(rng.integers(len(data), size=batch_size))
        x = data[idx]
        loss = F.mse_loss(decoder(encoder(x)), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
    for p in decoder.parameters():
        p.requires_grad_(False)
    decoder.eval()
    return history


class InversionResult(NamedTuple):
    z: torch.Tensor
    deltas: tuple[torch.Tensor, ...] | None
    psnr: float


def _seeded_latent(dim: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(dim, generator=g)


def invert(generator: Generator, target, steps: int = 300, tune_generator: bool = False,
           rng_seed: int = 0, lr: float = 1e-2, tune_steps: int | None = None,
           tune_lr: float = 1e-3) -> InversionResult:
    """Fit a latent code to ``target``, then optionally pivotal-tune the generator.

    ``target`` is an ``(H, W, C)`` image (resized to the generator output if
    needed) or a ``(C, g, g)`` tensor.
    """
    g = generator.out_size
    if isinstance(target, np.ndarray):
        target = resize_to(target, g)
    target = target.detach().float().unsqueeze(0)
    z = _seeded_latent(generator.latent_dim, rng_seed).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=lr)
    for step in range(steps):
        loss = F.mse_loss(generator.decode(z), target)
        if not torch.isfinite(loss):
            raise InversionError(f"non-finite inversion loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    z = z.detach()

    deltas = None
    if tune_generator:
        base = generator.parameters_list()
        tuned = [p.detach().clone().requires_grad_(True) for p in base]
        opt = torch.optim.Adam(tuned, lr=tune_lr)
        for step in range(steps // 2 if tune_steps is None else tune_steps):
            loss = F.mse_loss(generator.decode(z, tuned), target)
            if not torch.isfinite(loss):
                raise InversionError(f"non-finite pivotal-tuning loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        deltas = tuple((t - p).detach() for t, p in zip(tuned, base))

    with torch.no_grad():
        recon = generator.decode_with_deltas(z, deltas)[0]
    return InversionResult(z, deltas, psnr(to_image(recon), to_image(target[0])))


@dataclass
class LatentSet:
    """Codes ``(labels, ipc, latent_dim)`` plus optional per-sample generator deltas."""

    codes: torch.Tensor
    generator: Generator
    scale: int
    deltas: list[list[tuple[torch.Tensor, ...] | None]] | None = None
    mode: str = "latent"

    @property
    def num_labels(self) -> int:
        return self.codes.shape[0]

    @property
    def ipc(self) -> int:
        return self.codes.shape[1]

    @property
    def size(self) -> int:
        return self.generator.out_size

    def decode(self, label: int) -> torch.Tensor:
        """Images for one label, differentiable w.r.t. ``codes``."""
        z = self.codes[label]
        if self.deltas is None:
            return self.generator.decode(z)
        return torch.cat([self.generator.decode_with_deltas(z[k:k + 1], self.deltas[label][k])
                          for k in range(self.ipc)])

    @torch.no_grad()
    def decoded_images(self) -> np.ndarray:
        """All decoded images as ``(labels, ipc, C, g, g)``."""
        return np.stack([self.decode(c).numpy() for c in range(self.num_labels)])

    def as_groups(self) -> list[PatchGroup]:
        imgs = self.decoded_images()
        return [PatchGroup(f"latent_{c:05d}", c,
                           [np.moveaxis(imgs[c, k], 0, -1).astype(np.float64) for k in range(self.ipc)],
                           [(0, 0)] * self.ipc)
                for c in range(self.num_labels)]


def inversion_targets(group: PatchGroup, ipc: int, size: int, rng: np.random.Generator):
    """Slot 0 is the whole source image; further slots are random square crops."""
    src = _source_image(group)
    h, w = src.shape[:2]
    out = [resize_to(src, size)]
    for _ in range(1, ipc):
        side = int(rng.integers(max(min(h, w) // 2, 1), min(h, w) + 1))
        r, c = rng.integers(h - side + 1), rng.integers(w - side + 1)
        out.append(resize_to(src[r:r + side, c:c + side], size))
    return out


def _inversion_seed(seed: int, label: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, label, slot]).generate_state(1)[0])


def init_latent(manifest: DatasetManifest, generator: Generator, ipc: int = 1,
                inversion_steps: int = 300, rng_seed: int = 0, tune_generator: bool = False,
                tune_steps: int | None = None, lr: float = 1e-2, tune_lr: float = 1e-3,
                scale: int | None = None) -> LatentSet:
    scale = scale or manifest.scale
    if generator.out_size % scale:
        raise ConfigError(f"generator output {generator.out_size} not divisible by scale {scale}")
    rng = np.random.default_rng(rng_seed)
    codes = torch.empty(manifest.num_groups, ipc, generator.latent_dim)
    deltas = [] if tune_generator else None
    recon = []
    for c, group in enumerate(manifest.groups):
        row = []
        for k, target in enumerate(inversion_targets(group, ipc, generator.out_size, rng)):
            try:
                res = invert(generator, target, inversion_steps, tune_generator,
                             _inversion_seed(rng_seed, c, k), lr, tune_steps, tune_lr)
            except InversionError as exc:
                raise InversionError(f"label {c}: {exc}") from exc
            codes[c, k] = res.z
            row.append(res.deltas)
            recon.append(res.psnr)
        if deltas is not None:
            deltas.append(row)
    log.info("inverted %d labels, mean recon PSNR %.2f dB", manifest.num_groups, np.mean(recon))
    return LatentSet(codes.requires_grad_(True), generator, scale, deltas)


@dataclass
class LatentConfig:
    iterations: int = 1000
    ipc: int = 1
    latent_dim: int = 64
    out_size: int = 64
    latent_lr: float = 1e-3
    batch_real: int = 8
    patch_size: int | None = None
    reference: str = "pretrained"
    architecture: str = "srcnn"
    checkpoint: str | None = None
    inversion_steps: int = 300
    inversion_lr: float = 1e-2
    tune_generator: bool = True
    tune_steps: int | None = None
    tune_lr: float = 1e-3
    ae_pretrain_steps: int = 1000
    match_mode: str = "layerwise"
    snapshot_every: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.latent_lr < 0:
            raise ConfigError("latent_lr must be >= 0")
        if self.reference not in ("random_init", "pretrained"):
            raise ConfigError(f"unknown reference {self.reference!r}")


def latent_distill_step(L: LatentSet, manifest: DatasetManifest, model: SRModel,
                        config: LatentConfig, optimizer: torch.optim.Optimizer | None = None,
                        iteration: int = 0):
    if L.size % model.scale or model.scale != L.scale:
        raise ConfigError(f"model scale {model.scale} incompatible with latent set "
                          f"(scale {L.scale}, size {L.size})")
    if L.num_labels != manifest.num_groups:
        raise DataError(f"{L.num_labels} latent labels for {manifest.num_groups} groups")
    if optimizer is None:
        optimizer = torch.optim.Adam([L.codes], lr=config.latent_lr)
    patch = config.patch_size or min(manifest.groups[0].size)
    dataset = PatchDataset(manifest.groups, patch, L.scale)
    rng = _step_rng(config.rng_seed, iteration)
    grad = torch.zeros_like(L.codes)
    total = 0.0
    for c in range(L.num_labels):
        real = dataset.sample(config.batch_real, rng, group=c)
        loss = match_label(model, L.decode(c), real, L.scale, config.match_mode)
        if not torch.isfinite(loss):
            raise DistillationError(f"non-finite matching loss for label {c}")
        if loss.requires_grad:
            grad += torch.autograd.grad(loss, L.codes)[0]
        total += loss.item()
    optimizer.zero_grad(set_to_none=True)
    L.codes.grad = grad
    optimizer.step()
    return L, total


def latent_distill(manifest: DatasetManifest, config: LatentConfig, generator: Generator,
                   model_factory: Callable[[int], SRModel] | None = None,
                   latent_set: LatentSet | None = None):
    """Optimise latent codes by gradient matching.

    Starts from ``latent_set`` when given (e.g. a shared inversion baseline),
    otherwise inverts every label first.  The generator stays frozen.
    """
    scale = manifest.scale
    if model_factory is None:
        def model_factory(seed):
            return build_model(config.architecture, scale, rng_seed=seed)
    if latent_set is None:
        latent_set = init_latent(manifest, generator, config.ipc, config.inversion_steps,
                                 config.rng_seed, config.tune_generator, config.tune_steps,
                                 config.inversion_lr, config.tune_lr, scale)
    L = LatentSet(latent_set.codes.detach().clone().requires_grad_(True), latent_set.generator,
                  latent_set.scale, latent_set.deltas)
    history = DistillHistory()
    if config.snapshot_every:
        history.snapshots[0] = L.decoded_images()
    optimizer = torch.optim.Adam([L.codes], lr=config.latent_lr)
    model = None
    if config.reference == "pretrained":
        model = load_checkpoint(config.checkpoint) if config.checkpoint else model_factory(config.rng_seed)
    for it in range(config.iterations):
        if config.reference == "random_init":
            model = model_factory(config.rng_seed * 1_000_003 + it)
        try:
            L, loss = latent_distill_step(L, manifest, model, config, optimizer, iteration=it)
        except DistillationError as exc:
            raise DistillationError(f"iteration {it}: {exc}") from exc
        history.losses.append(loss)
        if config.snapshot_every and (it + 1) % config.snapshot_every == 0:
            history.snapshots[it + 1] = L.decoded_images()
        if it % 100 == 0:
            log.info("latent distill iter %d loss %.5f", it, loss)
    return L, history


def export_latent(L: LatentSet, out_dir, name: str = "latent", extra: dict | None = None) -> Path:
    """Decoded images as a dataset artifact plus ``codes.bin``/``codes.json`` and the generator."""
    out_dir = Path(out_dir)
    meta = {"kind": "synthetic", "mode": "latent", "ipc": L.ipc, **(extra or {})}
    save_dataset(synthetic_manifest(L.as_groups(), L.scale, L.size, name, meta), out_dir)
    codes = L.codes.detach().numpy().astype("<f4")
    codes.tofile(out_dir / "codes.bin")
    header = {"latent_dim": L.generator.latent_dim, "num_labels": L.num_labels, "ipc": L.ipc,
              "dtype": "float32-le", "order": "label-major", "scale": L.scale,
              "labels": list(range(L.num_labels)), "generator": "generator.pt"}
    (out_dir / "codes.json").write_text(json.dumps(header, indent=1))
    torch.save({**L.generator.state(), "deltas": L.deltas}, out_dir / "generator.pt")
    return out_dir


def load_latent(path) -> LatentSet:
    path = Path(path)
    header = json.loads((path / "codes.json").read_text())
    codes = np.fromfile(path / "codes.bin", dtype="<f4").reshape(
        header["num_labels"], header["ipc"], header["latent_dim"])
    ckpt = torch.load(path / header["generator"], map_location="cpu", weights_only=True)
    module = ConvDecoder(**ckpt["config"])
    module.load_state_dict(ckpt["state_dict"])
    return LatentSet(torch.tensor(codes), Generator(module), header["scale"], ckpt["deltas"])
