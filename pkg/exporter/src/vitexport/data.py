"""Synthetic 10-class shape dataset rendered to 32x32 RGB.

Every class is a large pattern spanning much of the canvas (filled and
hollow primitives, crosses, stripes), drawn in a random foreground color
over a contrasting background with position/size jitter and light pixel
noise. No external downloads needed; a dataset is fully determined by
its seed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import strv

NUM_CLASSES = 10
CLASS_NAMES = (
    "disc",
    "ring",
    "square",
    "frame",
    "plus",
    "saltire",
    "hstripes",
    "vstripes",
    "triangle",
    "diamond",
)


def _mask_for_class(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-3.5, 3.5)
    cx = size / 2 + rng.uniform(-3.5, 3.5)
    r = size * rng.uniform(0.22, 0.32)
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    width = max(2.0, r * 0.3)
    if cls == 0:
        return dist <= r
    if cls == 1:
        return (dist <= r) & (dist >= r * 0.55)
    if cls == 2:
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if cls == 3:
        outer = (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9)
        inner = (np.abs(dy) <= r * 0.5) & (np.abs(dx) <= r * 0.5)
        return outer & ~inner
    if cls == 4:
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & ((np.abs(dx) <= width / 2) | (np.abs(dy) <= width / 2))
    if cls == 5:
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & ((np.abs(dy - dx) <= width / 1.4) | (np.abs(dy + dx) <= width / 1.4))
    if cls == 6:
        stripe = int(rng.integers(3, 5))
        return ((yy.astype(int) // stripe) % 2 == 0) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if cls == 7:
        stripe = int(rng.integers(3, 5))
        return ((xx.astype(int) // stripe) % 2 == 0) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if cls == 8:
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if cls == 9:
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown class {cls}")


def _contrasting_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # random hues but ordered luminance: shape strictly brighter than ground,
    # which keeps the task easily learnable for a token-budget model
    bg = rng.uniform(0.05, 0.35, size=3)
    fg = rng.uniform(0.60, 0.95, size=3)
    return fg, bg


def render_image(cls: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    fg, bg = _contrasting_colors(rng)
    mask = _mask_for_class(cls, size, rng)
    img = np.empty((3, size, size), dtype=np.float64)
    img[:] = bg[:, None, None]
    img[:, mask] = fg[:, None]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(count: int, seed: int, size: int = 32) -> tuple[list[np.ndarray], list[int]]:
    """count images with labels cycling through the classes."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(count):
        cls = i % NUM_CLASSES
        images.append(render_image(cls, rng, size))
        labels.append(cls)
    return images, labels


def write_dataset(root, images, labels) -> None:
    """Dataset directory format shared with the runtime: index.csv plus one
    single-tensor "image" container per entry."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"img_{i:05d}.strv"
        strv.write(root / name, {"image": np.asarray(img, dtype=np.float32)}, {"kind": "image"})
        rows.append((name, int(label)))
    with open(root / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "label"])
        writer.writerows(rows)


def read_dataset(root) -> tuple[list[np.ndarray], list[int]]:
    root = Path(root)
    images, labels = [], []
    with open(root / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            tensors, _ = strv.read(root / row["file"])
            images.append(tensors["image"])
            labels.append(int(row["label"]))
    return images, labels
