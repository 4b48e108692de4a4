"""Shared fixtures: tiny synthetic ring patches with a band-texture signal."""

from __future__ import annotations

import numpy as np
import torch


def ring_patch(rng, infected: bool, size: int = 188) -> np.ndarray:
    """A crude stand-in for an equalized patch: bright bone ring around the
    center, plus a textured outer band when infected."""
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.hypot(yy - size / 2, xx - size / 2)
    grid = rng.uniform(0.05, 0.25, size=(size, size))
    grid[(d >= 28) & (d <= 40)] = rng.uniform(0.85, 1.0, size=int(((d >= 28) & (d <= 40)).sum()))
    if infected:
        band = (d > 40) & (d <= 52)
        grid[band] = rng.uniform(0.45, 0.75, size=int(band.sum()))
    return grid.astype(np.float32)


def toy_dataset(n_per_class: int, size: int = 188, seed: int = 0):
    """Balanced tensor dataset of ring patches, labels 0=aseptic 1=infected."""
    rng = np.random.default_rng(seed)
    grids = []
    labels = []
    for k in range(n_per_class * 2):
        infected = k % 2 == 1
        grids.append(torch.from_numpy(ring_patch(rng, infected, size)))
        labels.append(int(infected))
    inputs = torch.stack(grids).unsqueeze(1)
    return inputs, torch.tensor(labels, dtype=torch.int64)
