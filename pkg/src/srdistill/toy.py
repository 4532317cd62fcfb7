"""Procedural image corpora for desk-scale runs and tests.

Images mix smooth colour fields, hard-edged shapes and oriented stripe textures
so that bicubic SR has both easy and hard regions.

    python -m srdistill.toy OUT_DIR --count 8 --size 96 --seed 0
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .imaging import quantize, write_png


def toy_image(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    base = rng.uniform(0.2, 0.8, 3)
    tilt = rng.uniform(-0.3, 0.3, (2, 3))
    img[:] = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]

    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.08, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += blob[..., None] * rng.uniform(-0.4, 0.4, 3)

    for _ in range(rng.integers(2, 5)):
        colour = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            y0, x0 = rng.uniform(0, 0.8, 2)
            h, w = rng.uniform(0.1, 0.4, 2)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        else:
            cy, cx = rng.uniform(0.1, 0.9, 2)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rng.uniform(0.05, 0.2) ** 2
        img[mask] = 0.3 * img[mask] + 0.7 * colour

    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(6, 16)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    cy, cx = rng.uniform(0.2, 0.8, 2)
    region = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.2 ** 2))
    img += ((stripes - 0.5) * region)[..., None] * rng.uniform(0.1, 0.35, 3)

    img += rng.normal(0, 0.01, img.shape)
    return quantize(np.clip(img, 0, 1)) / 255.0


def make_toy_corpus(count: int, size: int, seed: int = 0) -> list[tuple[str, np.ndarray]]:
    rng = np.random.default_rng(seed)
    return [(f"toy_{i:04d}", toy_image(size, rng)) for i in range(count)]


def write_toy_corpus(out_dir, count: int, size: int, seed: int = 0) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, img in make_toy_corpus(count, size, seed):
        write_png(out_dir / f"{name}.png", img)
    return out_dir


def main(argv=None):
    ap = argparse.ArgumentParser(description="write a procedural toy image corpus")
    ap.add_argument("out")
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_toy_corpus(args.out, args.count, args.size, args.seed)


if __name__ == "__main__":
    main()
