"""Dataset directory format: an index.csv (columns file,label) next to one
STRV container per image, each holding a single float32 tensor "image" of
shape (3, H, W) with values in [0, 1]."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import strv
from .errors import DataError, FormatError, ValidationError

INDEX_NAME = "index.csv"
IMAGE_KIND = "image"


@dataclass(frozen=True)
class DatasetEntry:
    file: str
    label: int


def read_index(root) -> list[DatasetEntry]:
    root = Path(root)
    index = root / INDEX_NAME
    if not index.is_file():
        raise DataError(f"dataset index not found: {index}")
    entries: list[DatasetEntry] = []
    with open(index, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["file", "label"]:
            raise DataError(f"{index}: header must be exactly 'file,label'")
        for row in reader:
            try:
                entries.append(DatasetEntry(file=row["file"], label=int(row["label"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{index}: bad row {row!r}: {exc}") from exc
    return entries


def load_image(path) -> np.ndarray:
    tensors, _ = strv.read(path)
    if "image" not in tensors:
        raise FormatError(f"{path}: container has no image tensor")
    img = tensors["image"]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValidationError(f"{path}: image must be (3, H, W), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ValidationError(f"{path}: image pixels must lie in [0, 1]")
    return np.clip(img, 0.0, 1.0)


def save_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValidationError(f"image must be (3, H, W), got {img.shape}")
    strv.write(path, {"image": img}, {"kind": IMAGE_KIND})


def write_dataset(root, images, labels) -> None:
    """Write images plus index.csv; files are named img_00000.strv, ..."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"img_{i:05d}.strv"
        save_image(root / name, img)
        rows.append((name, int(label)))
    with open(root / INDEX_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "label"])
        writer.writerows(rows)
