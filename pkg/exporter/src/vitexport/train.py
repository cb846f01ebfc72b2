"""Toy ViT training: Adam on cross-entropy with cutout augmentation, fixed
seeds throughout, checkpoint carries the config and the held-out accuracy."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
import torch
from torch import nn

from .toyvit import ToyConfig, ToyViT


class TrainingError(RuntimeError):
    pass


def _cutout(batch: torch.Tensor, rng: np.random.Generator, box: int, prob: float) -> torch.Tensor:
    """Random box of noise per image: teaches the model to ignore locally
    destroyed content, the pixel-space cousin of token transformation."""
    out = batch.clone()
    size = batch.shape[-1]
    for i in range(batch.shape[0]):
        if rng.uniform() < prob:
            r = int(rng.integers(0, size - box + 1))
            c = int(rng.integers(0, size - box + 1))
            fill = torch.from_numpy(rng.uniform(0, 1, size=(3, box, box)).astype(np.float32))
            out[i, :, r : r + box, c : c + box] = fill
    return out


@torch.no_grad()
def accuracy(model: ToyViT, images: torch.Tensor, labels: torch.Tensor, batch: int = 256) -> float:
    model.eval()
    hits = 0
    for i in range(0, len(images), batch):
        logits = model(images[i : i + batch])
        hits += int((logits.argmax(dim=1) == labels[i : i + batch]).sum())
    return hits / len(images)


def train_toy(
    config: ToyConfig,
    train_images,
    train_labels,
    val_images,
    val_labels,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    cutout_prob: float = 0.15,
    label_noise: float = 0.05,
    token_corrupt_max: int = 4,
) -> tuple[ToyViT, dict]:
    """label_noise flips that fraction of training labels uniformly at
    random (seeded): it caps the trained margins, keeping the model
    realistically attackable instead of saturating its logit gaps."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ToyViT(config, token_corrupt_max=token_corrupt_max)
    optim = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()

    x = torch.from_numpy(np.stack(train_images)).float()
    y = torch.tensor(train_labels, dtype=torch.long)
    if label_noise > 0:
        flip = rng.uniform(size=len(y)) < label_noise
        y[torch.from_numpy(flip)] = torch.from_numpy(
            rng.integers(0, config.num_classes, size=int(flip.sum()))
        ).long()
    vx = torch.from_numpy(np.stack(val_images)).float()
    vy = torch.tensor(val_labels, dtype=torch.long)

    history = []
    for epoch in range(epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(x)))
        total = 0.0
        for i in range(0, len(x), batch_size):
            idx = order[i : i + batch_size]
            batch = _cutout(x[idx], rng, box=config.patch_size, prob=cutout_prob)
            optim.zero_grad()
            loss = loss_fn(model(batch), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            loss.backward()
            optim.step()
            total += float(loss.detach()) * len(idx)
        val_acc = accuracy(model, vx, vy)
        history.append({"epoch": epoch, "loss": total / len(x), "val_accuracy": val_acc})
    model.eval()
    info = {
        "val_accuracy": history[-1]["val_accuracy"],
        "history": history,
        "seed": seed,
        "epochs": epochs,
        "cutout_prob": cutout_prob,
        "label_noise": label_noise,
        "token_corrupt_max": token_corrupt_max,
        "config": asdict(config),
    }
    return model, info


def save_checkpoint(path, model: ToyViT, info: dict) -> None:
    torch.save({"state_dict": model.state_dict(), "info": info}, path)


def load_checkpoint(path) -> tuple[ToyViT, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    info = blob["info"]
    model = ToyViT(ToyConfig(**info["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, info
