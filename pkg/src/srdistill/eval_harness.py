"""Experiment grid: build dataset variants, train SR models on each, tabulate metrics."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .data_prep import MANIFEST_NAME, DatasetManifest, PatchDataset, ingest_corpus, load_dataset
from .errors import ConfigError, DumpError
from .imaging import write_png
from .latent_distill import (
    Generator,
    LatentConfig,
    LatentSet,
    build_toy_generator,
    export_latent,
    init_latent,
    latent_distill,
    load_generator,
    load_latent,
    pretrain_autoencoder,
)
from .metrics import MetricsReport, evaluate_model, make_testset
from .pixel_distill import DistillConfig, DistillHistory, distill, export_synthetic, init_synthetic
from .sr_models import TrainSchedule, build_model, save_checkpoint, train

log = logging.getLogger(__name__)

VARIANTS = (
    "original",
    "downscaled_baseline",
    "inversion_baseline",
    "syn_pixel_noise",
    "syn_pixel_downscale",
    "syn_pixel_pretrained",
    "syn_latent",
)
# published reduction figure, reported next to the measured ratios for comparison
CLAIMED_REDUCTION = 0.9112


@dataclass
class ExperimentSpec:
    variants: list[str]
    architectures: list[str] = field(default_factory=lambda: ["srcnn"])
    train_scale: int = 2
    distill_scale: int = 2
    seed: int = 0
    train: dict = field(default_factory=lambda: {"steps": 2000, "batch_size": 16,
                                                 "learning_rate": 1e-4, "optimizer": "adam"})
    patch_size: int = 32
    testsets: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    source: str | None = None
    distill: dict = field(default_factory=dict)
    latent: dict = field(default_factory=dict)
    reference_steps: int = 2000
    train_repeats: int = 1
    arch_configs: dict = field(default_factory=dict)
    perceptual: str | None = None
    crop_border: int = 0
    y_only: bool = False

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown dataset variants {unknown}; choose from {list(VARIANTS)}")
        if self.train_repeats < 1:
            raise ConfigError(f"train_repeats must be >= 1, got {self.train_repeats}")
        if self.train_scale < 1 or self.distill_scale < 1:
            raise ConfigError(f"scales must be positive, got x{self.train_scale}/x{self.distill_scale}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown experiment spec keys: {unknown}")
        return cls(**d)


@dataclass
class CellResult:
    variant: str
    architecture: str
    testset: str
    metrics: MetricsReport | None = None
    error: str | None = None
    train_seconds: float = 0.0
    final_loss: float | None = None


@dataclass
class ReductionStats:
    synthetic_images: int
    original_sub_images: int
    count_ratio: float
    pixel_ratio: float
    byte_ratio: float | None
    claimed_reduction: float = CLAIMED_REDUCTION

    @property
    def count_reduction(self) -> float:
        return 1.0 - self.count_ratio

    @property
    def pixel_reduction(self) -> float:
        return 1.0 - self.pixel_ratio

    @property
    def byte_reduction(self) -> float | None:
        return None if self.byte_ratio is None else 1.0 - self.byte_ratio

    def as_dict(self) -> dict:
        return {**dataclasses.asdict(self), "count_reduction": self.count_reduction,
                "pixel_reduction": self.pixel_reduction, "byte_reduction": self.byte_reduction}


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    cells: dict[tuple[str, str, str], CellResult] = field(default_factory=dict)
    reduction: dict[str, ReductionStats] = field(default_factory=dict)
    histories: dict[str, DistillHistory] = field(default_factory=dict)
    runtimes: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def psnr(self, variant, arch, testset=None) -> float:
        """Mean PSNR of one (variant, arch), averaged over testsets when none is given."""
        keys = [k for k in self.cells if k[0] == variant and k[1] == arch
                and (testset is None or k[2] == testset)]
        vals = [self.cells[k].metrics.psnr for k in keys if self.cells[k].metrics is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list[dict]:
        out = []
        for (variant, arch, testset), cell in self.cells.items():
            m = cell.metrics
            out.append({"scale": self.spec.train_scale, "variant": variant, "architecture": arch,
                        "testset": testset,
                        "psnr": m.psnr if m else None, "ssim": m.ssim if m else None,
                        "perceptual": m.perceptual if m else None,
                        "train_seconds": round(cell.train_seconds, 3),
                        "error": cell.error})
        return out

    def image_rows(self) -> list[dict]:
        out = []
        for (variant, arch, testset), cell in self.cells.items():
            for im in (cell.metrics.images if cell.metrics else []):
                out.append({"variant": variant, "architecture": arch, "testset": testset,
                            "image": im.name, "psnr": im.psnr, "ssim": im.ssim,
                            "perceptual": im.perceptual, "error": im.error})
        return out

    def table(self) -> str:
        """Plain-text table: one row per (variant, architecture), PSNR/SSIM per testset."""
        testsets = list(dict.fromkeys(k[2] for k in self.cells))
        lines = ["variant | arch | " + " | ".join(f"{t} PSNR  SSIM  LPIPS" for t in testsets)]
        for variant, arch in dict.fromkeys((k[0], k[1]) for k in self.cells):
            parts = []
            for t in testsets:
                cell = self.cells[(variant, arch, t)]
                m = cell.metrics
                if m is None or m.psnr is None:
                    parts.append(f"error: {cell.error}")
                else:
                    lp = "-" if m.perceptual is None else f"{m.perceptual:.4f}"
                    parts.append(f"{m.psnr:.4f} {m.ssim:.4f} {lp}")
            lines.append(f"{variant} | {arch} | " + " | ".join(parts))
        return "\n".join(lines)

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = f"x{self.spec.train_scale}"
        _write_csv(out_dir / f"table_{tag}.csv", self.rows())
        _write_csv(out_dir / f"images_{tag}.csv", self.image_rows())
        spec = dataclasses.asdict(self.spec)
        spec["testsets"] = {k: v if isinstance(v, (str, Path)) else f"<{len(v)} in-memory images>"
                            for k, v in self.spec.testsets.items()}
        summary = {"spec": spec, "cells": self.rows(),
                   "reduction": {k: v.as_dict() for k, v in self.reduction.items()},
                   "runtimes": self.runtimes, "artifacts": self.artifacts}
        (out_dir / f"summary_{tag}.json").write_text(json.dumps(summary, indent=1, default=str))
        (out_dir / f"table_{tag}.txt").write_text(self.table() + "\n")
        return out_dir


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cell_seed(seed: int, architecture: str, scale: int, repeat: int = 0) -> int:
    """Training seed shared by every variant for one architecture, scale and repeat."""
    arch_id = sum(ord(c) * 31 ** i for i, c in enumerate(architecture)) % 100_003
    entropy = [seed, arch_id, scale] + ([repeat] if repeat else [])
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def reduction_stats(manifest: DatasetManifest, synthetic: DatasetManifest) -> ReductionStats:
    byte_ratio = None
    if manifest.root is not None and synthetic.root is not None:
        byte_ratio = synthetic.stored_bytes() / manifest.stored_bytes()
    return ReductionStats(
        synthetic_images=synthetic.num_sub_images,
        original_sub_images=manifest.num_sub_images,
        count_ratio=synthetic.num_sub_images / manifest.num_sub_images,
        pixel_ratio=synthetic.sub_image_pixels() / manifest.sub_image_pixels(),
        byte_ratio=byte_ratio,
    )


def _tile(img_chw: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.asarray(img_chw, dtype=np.float64), 0, -1)


def evolution_dump(histories, every_k: int, out_dir, label: int = 0, slot: int = 0,
                   pad: int = 2) -> Path:
    """Grid PNG: one row per history, one column per snapshot at iterations 0, k, 2k, ...

    ``histories`` is a single ``DistillHistory`` or a name -> history mapping.
    """
    if isinstance(histories, DistillHistory):
        histories = {"run": histories}
    rows = []
    for name, h in histories.items():
        iters = sorted(i for i in h.snapshots if i % every_k == 0)
        if not iters:
            raise DumpError(f"history {name!r} has no snapshots at multiples of {every_k}")
        rows.append([_tile(h.snapshots[i][label, slot]) for i in iters])
    ncol = max(len(r) for r in rows)
    size = max(t.shape[0] for r in rows for t in r)
    ch = rows[0][0].shape[-1]
    grid = np.ones((len(rows) * (size + pad) - pad, ncol * (size + pad) - pad, ch))
    for i, r in enumerate(rows):
        for j, t in enumerate(r):
            y, x = i * (size + pad), j * (size + pad)
            grid[y:y + t.shape[0], x:x + t.shape[1]] = t
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "evolution.png"
    write_png(path, grid)
    return path


def snapshot_deltas(history: DistillHistory) -> list[float]:
    """Mean absolute change between consecutive snapshots."""
    iters = sorted(history.snapshots)
    return [float(np.mean(np.abs(history.snapshots[b] - history.snapshots[a])))
            for a, b in zip(iters, iters[1:])]


def save_history(history: DistillHistory, out_dir) -> None:
    out_dir = Path(out_dir)
    _write_csv(out_dir / "history.csv",
               [{"iteration": i, "loss": v} for i, v in enumerate(history.losses)])
    if history.snapshots:
        np.savez_compressed(out_dir / "snapshots.npz",
                            **{f"it{k:06d}": v for k, v in history.snapshots.items()})


def load_history(out_dir) -> DistillHistory | None:
    out_dir = Path(out_dir)
    if not (out_dir / "history.csv").exists():
        return None
    with (out_dir / "history.csv").open() as f:
        losses = [float(r["loss"]) for r in csv.DictReader(f)]
    snaps = {}
    if (out_dir / "snapshots.npz").exists():
        with np.load(out_dir / "snapshots.npz") as z:
            snaps = {int(k[2:]): z[k] for k in z.files}
    return DistillHistory(losses, snaps)


class VariantBuilder:
    """Builds (or reuses) one artifact per dataset variant under ``work_dir``.

    Shared ingredients (pretrained reference SRCNN, generator, inversion codes)
    are computed at most once and cached on disk.
    """

    def __init__(self, spec: ExperimentSpec, work_dir):
        self.spec = spec
        self.work_dir = Path(work_dir)
        self.histories: dict[str, DistillHistory] = {}
        self.runtimes: dict[str, float] = {}
        self._source: DatasetManifest | None = None
        self._generator: Generator | None = None
        self._inversion: LatentSet | None = None

    @property
    def source(self) -> DatasetManifest:
        if self._source is None:
            if self.spec.source is None:
                raise ConfigError("building variants requires 'source' (a prepared dataset)")
            self._source = load_dataset(self.spec.source)
            if self._source.scale != self.spec.distill_scale:
                log.info("source prepared at x%d; distilling at x%d", self._source.scale,
                         self.spec.distill_scale)
                self._source.scale = self.spec.distill_scale
        return self._source

    def distill_config(self, **kw) -> DistillConfig:
        return DistillConfig(**{"rng_seed": self.spec.seed, **self.spec.distill, **kw})

    def latent_config(self, **kw) -> LatentConfig:
        return LatentConfig(**{"rng_seed": self.spec.seed, **self.spec.latent, **kw})

    def reference_checkpoint(self) -> str:
        path = self.work_dir / "reference_srcnn.pt"
        if not path.exists():
            t = time.perf_counter()
            model = build_model("srcnn", self.spec.distill_scale, rng_seed=self.spec.seed)
            sched = TrainSchedule(self.spec.reference_steps, self.spec.train["batch_size"],
                                  self.spec.train["learning_rate"], self.spec.train["optimizer"],
                                  self.spec.seed)
            train(model, PatchDataset(self.source.groups, self.spec.patch_size,
                                      self.spec.distill_scale), sched)
            save_checkpoint(model, path)
            self.runtimes["reference_srcnn"] = time.perf_counter() - t
        return str(path)

    def generator(self) -> Generator:
        if self._generator is None:
            path = self.work_dir / "generator.pt"
            if path.exists():
                self._generator = load_generator(path)
            else:
                t = time.perf_counter()
                cfg = self.latent_config()
                gen = build_toy_generator(cfg.latent_dim, cfg.out_size, cfg.rng_seed)
                images = [im for g in self.source.groups for im in g.sub_images]
                images += [g.source for g in self.source.groups if g.source is not None]
                pretrain_autoencoder(gen, images, cfg.ae_pretrain_steps, rng_seed=cfg.rng_seed)
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save(gen.state(), path)
                self._generator = gen
                self.runtimes["generator_pretrain"] = time.perf_counter() - t
        return self._generator

    def inversion(self) -> LatentSet:
        if self._inversion is None:
            path = self.work_dir / "artifacts" / "inversion_baseline"
            if (path / "codes.json").exists():
                self._inversion = load_latent(path)
                self._inversion.codes.requires_grad_(True)
            else:
                t = time.perf_counter()
                cfg = self.latent_config()
                self._inversion = init_latent(self.source, self.generator(), cfg.ipc,
                                              cfg.inversion_steps, cfg.rng_seed,
                                              cfg.tune_generator, cfg.tune_steps,
                                              cfg.inversion_lr, cfg.tune_lr,
                                              self.spec.distill_scale)
                self.runtimes["inversion"] = time.perf_counter() - t
        return self._inversion

    def path(self, variant: str) -> Path:
        if variant in self.spec.artifacts:
            return Path(self.spec.artifacts[variant])
        if variant == "original":
            return Path(self.spec.source) if self.spec.source else self.work_dir / "original"
        return self.work_dir / "artifacts" / variant

    def build(self, variant: str) -> Path:
        path = self.path(variant)
        if (path / MANIFEST_NAME).exists():
            hist = load_history(path)
            if hist is not None:
                self.histories.setdefault(variant, hist)
            return path
        t = time.perf_counter()
        path = build_variant(variant, self, path)
        self.runtimes[variant] = time.perf_counter() - t
        return path


def build_variant(variant: str, builder: VariantBuilder, out_dir: Path) -> Path:
    src = builder.source
    if variant == "original":
        return Path(src.root)
    if variant in ("downscaled_baseline", "inversion_baseline"):
        return build_baseline(variant, src, out_dir, builder)
    if variant.startswith("syn_pixel_"):
        kw = {"syn_pixel_noise": {"init": "noise", "reference": "random_init"},
              "syn_pixel_downscale": {"init": "downscale", "reference": "random_init"},
              "syn_pixel_pretrained": {"init": "downscale", "reference": "pretrained"}}[variant]
        if kw["reference"] == "pretrained":
            kw["checkpoint"] = builder.reference_checkpoint()
        S, hist = distill(src, builder.distill_config(**kw))
        export_synthetic(S, out_dir, variant, {"variant": variant})
    elif variant == "syn_latent":
        cfg = builder.latent_config()
        if cfg.reference == "pretrained" and cfg.checkpoint is None:
            cfg = dataclasses.replace(cfg, checkpoint=builder.reference_checkpoint())
        L, hist = latent_distill(src, cfg, builder.generator(), latent_set=builder.inversion())
        export_latent(L, out_dir, variant, {"variant": variant})
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    save_history(hist, out_dir)
    builder.histories[variant] = hist
    return out_dir


def build_baseline(variant: str, manifest: DatasetManifest, out_dir, builder: VariantBuilder | None = None,
                   config: DistillConfig | None = None) -> Path:
    """Undistilled reference datasets: the corpus itself, its downscaled
    initialisation, or its decoded inversion codes."""
    if variant == "original":
        if manifest.root is None:
            raise ConfigError("original variant needs a saved manifest")
        return Path(manifest.root)
    if variant == "downscaled_baseline":
        cfg = config or (builder.distill_config() if builder else DistillConfig())
        S = init_synthetic(manifest, cfg.ipc, cfg.synth_size, "downscale", cfg.rng_seed, manifest.scale)
        return export_synthetic(S, out_dir, variant, {"variant": variant})
    if variant == "inversion_baseline":
        if builder is None:
            raise ConfigError("inversion baseline needs a generator (pass a VariantBuilder)")
        return export_latent(builder.inversion(), out_dir, variant, {"variant": variant})
    raise ConfigError(f"unknown baseline variant {variant!r}")


def load_testsets(testsets: Mapping) -> dict[str, list]:
    out = {}
    for name, ts in testsets.items():
        out[name] = ingest_corpus(ts) if isinstance(ts, (str, Path)) else list(ts)
    return out


def run_grid(spec: ExperimentSpec, work_dir=None, builder: VariantBuilder | None = None
             ) -> ExperimentReport:
    """Train every architecture on every variant and evaluate on every testset.

    Variant artifacts are HR images built at ``distill_scale``; training at
    another scale only changes the degradation applied when sampling batches.
    """
    if not spec.testsets:
        raise ConfigError("experiment spec lists no testsets")
    builder = builder or VariantBuilder(spec, work_dir or Path("runs") / "grid")
    report = ExperimentReport(spec)
    tests = {name: make_testset(imgs, spec.train_scale)
             for name, imgs in load_testsets(spec.testsets).items()}
    original = None
    for variant in spec.variants:
        try:
            path = builder.build(variant)
            manifest = load_dataset(path)
            report.artifacts[variant] = str(path)
        except Exception as exc:
            log.exception("building %s failed", variant)
            for arch in spec.architectures:
                for t in tests:
                    report.cells[(variant, arch, t)] = CellResult(
                        variant, arch, t, error=f"build: {type(exc).__name__}: {exc}")
            continue
        if variant == "original":
            original = manifest
        for arch in spec.architectures:
            _run_cell(spec, report, variant, arch, manifest, tests)
    report.histories.update(builder.histories)
    report.runtimes.update(builder.runtimes)
    if original is None and spec.source:
        try:
            original = load_dataset(builder.path("original"))
        except Exception:
            original = None
    if original is not None:
        for variant, path in report.artifacts.items():
            report.reduction[variant] = reduction_stats(original, load_dataset(path))
    return report


def _run_cell(spec, report, variant, arch, manifest, tests):
    """Train ``spec.train_repeats`` seeded models; per-image rows of all repeats
    are pooled, so the cell mean is the mean over repeats."""
    seconds, finals = 0.0, []
    pooled = {t: MetricsReport(t, f"{arch}@{variant}") for t in tests}
    for r in range(spec.train_repeats):
        t0 = time.perf_counter()
        try:
            sched = TrainSchedule(rng_seed=cell_seed(spec.seed, arch, spec.train_scale, r), **spec.train)
            model = build_model(arch, spec.train_scale, spec.arch_configs.get(arch),
                                rng_seed=sched.rng_seed)
            data = PatchDataset(manifest.groups, spec.patch_size, spec.train_scale)
            model, losses = train(model, data, sched)
            seconds += time.perf_counter() - t0
        except Exception as exc:
            log.exception("training %s/%s failed", variant, arch)
            for t in tests:
                report.cells[(variant, arch, t)] = CellResult(
                    variant, arch, t, error=f"train: {type(exc).__name__}: {exc}")
            return
        finals.append(losses[-1] if losses else None)
        for tname, testset in tests.items():
            metrics = evaluate_model(model, testset, tname, spec.perceptual, spec.crop_border, spec.y_only)
            for im in metrics.images:
                if spec.train_repeats > 1:
                    im.name = f"{im.name}#r{r}"
                pooled[tname].images.append(im)
    final = None if any(f is None for f in finals) else float(np.mean(finals))
    for tname in tests:
        report.cells[(variant, arch, tname)] = CellResult(
            variant, arch, tname, pooled[tname], train_seconds=seconds, final_loss=final)
    report.runtimes[f"train/{variant}/{arch}"] = seconds


def _rebase(p, base: Path | None):
    if base is None or not isinstance(p, str):
        return p
    p = Path(p)
    return str(p if p.is_absolute() else base / p)


def run_grids(doc: Mapping, work_dir, base_dir=None) -> list[ExperimentReport]:
    """Run one grid per entry of an optional ``scales`` list, sharing built
    variants between them. Relative paths resolve against ``base_dir``."""
    doc = dict(doc)
    doc.pop("evolution_every", None)
    scales = doc.pop("scales", None) or [doc.get("train_scale", 2)]
    base = Path(base_dir) if base_dir is not None else None
    if "source" in doc:
        doc["source"] = _rebase(doc["source"], base)
    for key in ("testsets", "artifacts"):
        if key in doc:
            doc[key] = {k: _rebase(v, base) for k, v in doc[key].items()}
    builder = None
    reports = []
    for s in scales:
        spec = ExperimentSpec.from_dict({**doc, "train_scale": int(s)})
        builder = builder or VariantBuilder(spec, work_dir)
        reports.append(run_grid(spec, builder=builder))
    return reports
