"""Extractor test fixtures: a random-weight network and synthetic images."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import torch
import torchvision
from PIL import Image


@pytest.fixture(scope="session")
def alexnet_weights(tmp_path_factory):
    """A seeded random alexnet state dict with a places-sized 205-way head."""
    torch.manual_seed(0)
    model = torchvision.models.alexnet(weights=None, num_classes=205)
    path = tmp_path_factory.mktemp("weights") / "alexnet_random.pt"
    torch.save(model.state_dict(), path)
    return path


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """A few decodable images: two gradients, one constant gray."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(1)

    def gradient(name, w, h, tilt):
        xs = np.linspace(0.0, 1.0, w)[None, :]
        ys = np.linspace(0.0, 1.0, h)[:, None]
        base = np.clip(xs * tilt + ys * (1.0 - tilt), 0.0, 1.0)
        rgb = np.stack(
            [base, base[::-1, :], rng.uniform(0.3, 0.7) * np.ones_like(base)], axis=2
        )
        Image.fromarray((255 * rgb).astype(np.uint8)).save(root / name)

    gradient("street.png", 320, 240, 0.7)
    gradient("harbor.png", 260, 300, 0.2)
    gradient("meadow.png", 300, 300, 0.5)
    Image.new("RGB", (280, 280), (128, 128, 128)).save(root / "flat_gray.png")
    (root / "broken.png").write_bytes(b"not an image at all")
    return root
