import numpy as np
import pytest

from tokenshield.model import ModelConfig, random_weights


TINY_CONFIG = ModelConfig(
    image_size=32,
    patch_size=8,
    embed_dim=64,
    num_heads=4,
    num_layers=4,
    mlp_hidden_dim=256,
    num_classes=10,
)

GRID_CONFIG = ModelConfig(
    image_size=64,
    patch_size=8,
    embed_dim=64,
    num_heads=4,
    num_layers=4,
    mlp_hidden_dim=256,
    num_classes=10,
)


@pytest.fixture(scope="session")
def tiny_model():
    """Random-weight 16-token model (32x32 image, patch 8)."""
    return random_weights(TINY_CONFIG, seed=7)


@pytest.fixture(scope="session")
def grid_model():
    """Random-weight 64-token model (64x64 image, patch 8)."""
    return random_weights(GRID_CONFIG, seed=11)


def smooth_images(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    """Clean synthetic images: per-channel base tone, a mild linear ramp,
    and low-amplitude pixel noise."""
    images = []
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)
    for _ in range(n):
        base = rng.uniform(0.2, 0.8, size=(3, 1, 1)).astype(np.float32)
        slope_r = rng.uniform(-0.15, 0.15, size=(3, 1, 1)).astype(np.float32)
        slope_c = rng.uniform(-0.15, 0.15, size=(3, 1, 1)).astype(np.float32)
        noise = rng.normal(0.0, 0.02, size=(3, size, size)).astype(np.float32)
        img = base + slope_r * ramp[None, :, None] + slope_c * ramp[None, None, :] + noise
        images.append(np.clip(img, 0.0, 1.0))
    return images
