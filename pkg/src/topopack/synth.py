"""Seeded synthetic feature grids with planted spatial clusters."""
from __future__ import annotations

import numpy as np

from .grid import FeatureGrid

__all__ = ["synthetic_grid", "synthetic_corpus"]


def synthetic_grid(height: int, width: int, dim: int, blobs: int = 3, noise: float = 0.05,
                   seed: int = 0, return_labels: bool = False):
    """Each cell belongs to the nearest of ``blobs`` random spatial centres
    and carries that blob's unit prototype plus Gaussian noise."""
    if min(height, width, dim, blobs) < 1:
        raise ValueError("dimensions and blob count must be >= 1")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((blobs, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    centres = rng.uniform([0, 0], [height, width], size=(blobs, 2))
    ii, jj = np.indices((height, width))
    cells = np.stack([ii + 0.5, jj + 0.5], axis=-1)
    labels = np.argmin(((cells[:, :, None, :] - centres[None, None]) ** 2).sum(-1), axis=-1)
    feats = protos[labels] + noise * rng.standard_normal((height, width, dim))
    grid = FeatureGrid(feats)
    return (grid, labels) if return_labels else grid


def synthetic_corpus(count: int, height: int, width: int, dim: int, blobs: int = 3,
                     noise: float = 0.05, seed: int = 0) -> list:
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [synthetic_grid(height, width, dim, blobs, noise, int(s.generate_state(1)[0]))
            for s in seeds]
