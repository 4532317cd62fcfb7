"""Corpus ingest, sub-image extraction, pseudo-labelling and dataset artifacts."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import (
    DataError,
    EmptyCorpusError,
    ExtractionError,
    IntegrityError,
    SamplingError,
)
from .imaging import degrade, read_png, to_tensor, write_png

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class PatchGroup:
    """All sub-images cut from one source image, sharing one pseudo-label.

    ``source`` is kept when the sub-images are windows of a larger image so the
    artifact can store one file plus offsets instead of every window.
    """

    source_id: str
    pseudo_label: int
    sub_images: list[np.ndarray]
    origin_offsets: list[tuple[int, int]]
    source: np.ndarray | None = None

    def __post_init__(self):
        if len(self.sub_images) != len(self.origin_offsets):
            raise DataError(f"group {self.source_id}: {len(self.sub_images)} images but "
                            f"{len(self.origin_offsets)} offsets")
        shapes = {im.shape for im in self.sub_images}
        if len(shapes) > 1:
            raise DataError(f"group {self.source_id}: mixed sub-image shapes {sorted(shapes)}")

    def __len__(self):
        return len(self.sub_images)

    @property
    def size(self) -> tuple[int, int]:
        return self.sub_images[0].shape[:2]


@dataclass
class DatasetManifest:
    corpus_name: str
    scale: int
    sub_image_size: int
    stride: int
    groups: list[PatchGroup]
    checksums: dict[str, str] = field(default_factory=dict)
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_sub_images(self) -> int:
        return sum(len(g) for g in self.groups)

    def sub_image_pixels(self) -> int:
        return sum(int(np.prod(im.shape[:2])) for g in self.groups for im in g.sub_images)

    def stored_bytes(self) -> int:
        if self.root is None:
            raise DataError("manifest has not been saved; no stored bytes to count")
        files = [self.root / MANIFEST_NAME, *(self.root / f for f in self.checksums)]
        return sum(f.stat().st_size for f in files)


def ingest_corpus(directory, channels: int = 3, extensions: Sequence[str] = IMAGE_EXTS):
    """Load every image in ``directory`` (sorted by filename) as ``(stem, image)``."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in extensions)
    if not paths:
        raise EmptyCorpusError(f"no images found in {directory}")
    return [(p.stem, read_png(p, channels)) for p in paths]


def window_offsets(n: int, size: int, stride: int) -> list[int]:
    """Window starts along one axis; a final window flush with the edge is added if needed."""
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts


def extract_subimages(hr: np.ndarray, size: int, stride: int):
    """Overlapping ``size``-square windows of ``hr`` as ``[((row, col), view), ...]``."""
    h, w = hr.shape[:2]
    if stride < 1:
        raise ExtractionError(f"stride must be >= 1, got {stride}")
    if size < 1 or size > min(h, w):
        raise ExtractionError(f"sub-image size {size} does not fit a {h}x{w} image")
    return [((r, c), hr[r:r + size, c:c + size])
            for r in window_offsets(h, size, stride)
            for c in window_offsets(w, size, stride)]


def assign_pseudo_labels(corpus, size: int, stride: int) -> list[PatchGroup]:
    if not corpus:
        raise EmptyCorpusError("cannot label an empty corpus")
    groups = []
    for label, (source_id, img) in enumerate(corpus):
        windows = extract_subimages(img, size, stride)
        groups.append(PatchGroup(
            source_id=str(source_id),
            pseudo_label=label,
            sub_images=[view for _, view in windows],
            origin_offsets=[off for off, _ in windows],
            source=img,
        ))
    return groups


class Batch(NamedTuple):
    lr: torch.Tensor
    hr: torch.Tensor
    labels: torch.Tensor


class PatchDataset:
    """Random HR crops from pseudo-labelled sub-images, paired with their bicubic LR."""

    def __init__(self, groups: Sequence[PatchGroup], patch_size: int, scale: int,
                 dtype=torch.float32):
        if not groups:
            raise SamplingError("no groups to sample from")
        for g in groups:
            if len(g) == 0:
                raise DataError(f"group {g.pseudo_label} ({g.source_id}) is empty")
            h, w = g.size
            if patch_size > min(h, w):
                raise SamplingError(f"patch size {patch_size} exceeds sub-image {h}x{w} "
                                    f"of group {g.pseudo_label}")
        if patch_size % scale:
            raise SamplingError(f"patch size {patch_size} not divisible by scale {scale}")
        self.groups = list(groups)
        self.patch_size = patch_size
        self.scale = scale
        self.dtype = dtype

    def sample(self, batch_size: int, rng: np.random.Generator, group: int | None = None) -> Batch:
        """Draw a batch; ``group`` restricts sampling to one index into ``groups``."""
        if batch_size < 1:
            raise SamplingError(f"batch size must be >= 1, got {batch_size}")
        p = self.patch_size
        crops, labels = [], []
        for _ in range(batch_size):
            g = self.groups[group if group is not None else rng.integers(len(self.groups))]
            sub = g.sub_images[rng.integers(len(g))]
            h, w = sub.shape[:2]
            r, c = rng.integers(h - p + 1), rng.integers(w - p + 1)
            crops.append(sub[r:r + p, c:c + p])
            labels.append(g.pseudo_label)
        hr = to_tensor(np.stack(crops))
        lr = degrade(hr, self.scale)
        return Batch(lr.to(self.dtype), hr.to(self.dtype), torch.tensor(labels))


def sample_training_batch(groups, patch_size: int, batch_size: int, scale: int,
                          rng_seed: int) -> Batch:
    rng = np.random.default_rng(rng_seed)
    return PatchDataset(groups, patch_size, scale).sample(batch_size, rng)


def build_manifest(corpus, corpus_name: str, scale: int, size: int, stride: int) -> DatasetManifest:
    return DatasetManifest(corpus_name=corpus_name, scale=scale, sub_image_size=size,
                           stride=stride, groups=assign_pseudo_labels(corpus, size, stride))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(manifest: DatasetManifest, out_dir) -> Path:
    """Write PNGs plus ``manifest.json``; returns the artifact directory."""
    if not manifest.groups:
        raise DataError("refusing to save a dataset with no groups")
    labels = [g.pseudo_label for g in manifest.groups]
    if labels != list(range(len(labels))):
        raise DataError(f"pseudo-labels must be 0..{len(labels) - 1} in order, got {labels[:10]}...")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    checksums, entries = {}, []
    for g in manifest.groups:
        entry = {"source_id": g.source_id, "pseudo_label": g.pseudo_label,
                 "offsets": [list(map(int, o)) for o in g.origin_offsets],
                 "size": list(g.size)}
        if g.source is not None:
            name = f"images/g{g.pseudo_label:05d}_source.png"
            write_png(out_dir / name, g.source)
            entry["source_file"] = name
            checksums[name] = _sha256(out_dir / name)
        else:
            entry["files"] = []
            for k, img in enumerate(g.sub_images):
                name = f"images/g{g.pseudo_label:05d}_{k:03d}.png"
                write_png(out_dir / name, img)
                entry["files"].append(name)
                checksums[name] = _sha256(out_dir / name)
        entries.append(entry)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "corpus_name": manifest.corpus_name,
        "scale": manifest.scale,
        "sub_image_size": manifest.sub_image_size,
        "stride": manifest.stride,
        "extra": manifest.extra,
        "groups": entries,
        "checksums": checksums,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(doc, indent=1))
    manifest.checksums = checksums
    manifest.root = out_dir
    log.info("saved %d groups (%d sub-images) to %s", manifest.num_groups,
             manifest.num_sub_images, out_dir)
    return out_dir


def _checked_read(root: Path, name: str, checksums: dict, channels: int) -> np.ndarray:
    path = root / name
    if not path.exists():
        raise IntegrityError(f"missing dataset file {name}")
    if checksums.get(name) != _sha256(path):
        raise IntegrityError(f"checksum mismatch for {name}")
    return read_png(path, channels)


def load_dataset(path, channels: int = 3) -> DatasetManifest:
    path = Path(path)
    root = path.parent if path.is_file() else path
    doc = json.loads((root / MANIFEST_NAME).read_text())
    checksums = doc["checksums"]
    groups = []
    for e in doc["groups"]:
        offsets = [tuple(o) for o in e["offsets"]]
        if "source_file" in e:
            src = _checked_read(root, e["source_file"], checksums, channels)
            h, w = e["size"]
            subs = [src[r:r + h, c:c + w] for r, c in offsets]
        else:
            src = None
            subs = [_checked_read(root, f, checksums, channels) for f in e["files"]]
        groups.append(PatchGroup(e["source_id"], e["pseudo_label"], subs, offsets, src))
    labels = [g.pseudo_label for g in groups]
    if labels != list(range(len(labels))):
        raise IntegrityError(f"{root}: pseudo-labels are not contiguous from 0")
    return DatasetManifest(doc["corpus_name"], doc["scale"], doc["sub_image_size"],
                           doc["stride"], groups, checksums, root, doc.get("extra", {}))


def prepare(input_dir, out_dir, scale: int = 2, size: int = 192, stride: int = 96,
            corpus_name: str | None = None) -> DatasetManifest:
    corpus = ingest_corpus(input_dir)
    manifest = build_manifest(corpus, corpus_name or Path(input_dir).name, scale, size, stride)
    save_dataset(manifest, out_dir)
    return manifest
