"""Synthetic natural-ish image corpora for desk-scale training and benchmarks.

Images mix smooth gradients, colored Gaussian blobs, low-frequency texture,
and mild grain, giving the encoder/decoder varied local statistics without
any external dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import save_image


def synthetic_image(size: tuple[int, int], seed: int) -> torch.Tensor:
    """One (3, H, W) image in [0, 1], deterministic in (size, seed)."""
    h, w = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    yy, xx = yy / max(h - 1, 1), xx / max(w - 1, 1)

    img = np.zeros((3, h, w), dtype=np.float32)
    for c in range(3):
        a, b, d = rng.uniform(0.2, 0.8), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)
        img[c] = a + b * xx + d * yy

    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, 1, 2)
        sig = rng.uniform(0.05, 0.3)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2)))
        color = rng.uniform(-0.6, 0.6, 3).astype(np.float32)
        img += color[:, None, None] * blob

    coarse = rng.normal(0, 0.15, (3, max(h // 16, 1), max(w // 16, 1))).astype(np.float32)
    texture = F.interpolate(
        torch.from_numpy(coarse).unsqueeze(0), size=(h, w), mode="bilinear",
        align_corners=False,
    )[0].numpy()
    img += texture
    img += rng.normal(0, 0.015, img.shape).astype(np.float32)

    return torch.from_numpy(np.clip(img, 0.0, 1.0))


def make_synthetic_corpus(
    root: str | Path, count: int, size: tuple[int, int], seed: int = 0
) -> Path:
    """Write ``count`` PNG images under ``root``; reuses existing files."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        path = root / f"img_{i:05d}.png"
        if not path.exists():
            save_image(synthetic_image(size, seed * 1_000_003 + i), path)
    return root
