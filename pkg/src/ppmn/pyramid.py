"""Pyramid matching: atrous 3x3 branches at rates 1, 2, 3 over a concatenated pair,
fused by a 1x1 convolution and max-pooled to the correspondence map."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat, max_pool, relu
from .layers import Conv
from .params import ParamStore

RATES = (1, 2, 3)


@dataclass
class CorrespondenceMaps:
    per_rate: dict[int, Tensor]
    stacked: Tensor
    fused: Tensor


class PyramidMatch:
    def __init__(self, store: ParamStore, prefix: str, in_channels: int, branch_channels: int,
                 fuse_channels: int, rng: np.random.Generator):
        # input is the channel concatenation of both views
        self.in_channels = in_channels
        self.branches = {
            r: Conv(store, f"{prefix}.rate{r}", 2 * in_channels, branch_channels, 3, rng, rate=r, pad=r)
            for r in RATES
        }
        self.fuse = Conv(store, f"{prefix}.fuse", len(RATES) * branch_channels, fuse_channels, 1, rng)
        self.out_channels = fuse_channels

    def __call__(self, rep_a: Tensor, rep_b: Tensor) -> CorrespondenceMaps:
        if rep_a.shape != rep_b.shape:
            raise ValueError(f"pyramid match: probe rep {rep_a.shape} vs gallery rep {rep_b.shape}")
        joint = concat([rep_a, rep_b], axis=1)
        per_rate = {r: relu(conv(joint)) for r, conv in self.branches.items()}
        stacked = concat([per_rate[r] for r in RATES], axis=1)
        fused = max_pool(relu(self.fuse(stacked)), 2, 2)
        return CorrespondenceMaps(per_rate, stacked, fused)


def branch_attribution(maps: CorrespondenceMaps) -> dict[int, float]:
    """L2 norm of each rate's response."""
    return {r: float(np.linalg.norm(t.data)) for r, t in maps.per_rate.items()}


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM, linearly stretched to the map's own range."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def dump_maps(maps: CorrespondenceMaps, directory, tag: str, index: int = 0) -> list[Path]:
    """Write per-rate and fused maps as channel-max heatmaps for batch item ``index``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for r, t in maps.per_rate.items():
        path = directory / f"{tag}_rate{r}.pgm"
        write_pgm(path, t.data[index].max(axis=0))
        written.append(path)
    path = directory / f"{tag}_fused.pgm"
    write_pgm(path, maps.fused.data[index].max(axis=0))
    written.append(path)
    return written
