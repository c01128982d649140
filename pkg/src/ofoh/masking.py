"""Mask sampling strategies and the reconstruction stack.

Masks work on a grid of square cells of side ``patch``. Three strategies:
random cells without replacement, one contiguous block of cells, and a
fixed checkerboard grid. A pluggable reconstructor fills the hidden pixels;
mean-fill is the default. The three reconstructions are concatenated
channel-wise in the fixed order (random, block, grid) to a 9-channel image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import ContractError, ShapeError
from .seeding import derive_rng

STRATEGY_ORDER = ("random", "block", "grid")


@dataclass(frozen=True)
class MaskStrategy:
    kind: str                 # random | block | grid
    mask_ratio: float = 0.75  # ignored for grid (fixed at 0.5)
    patch: int = 8

    def __post_init__(self):
        if self.kind not in STRATEGY_ORDER:
            raise ContractError(f"unknown mask kind {self.kind!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ContractError("mask_ratio must be strictly between 0 and 1")
        if self.patch < 1:
            raise ContractError("patch must be a positive integer")


class Reconstructor(Protocol):
    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


def sample_mask(strategy: MaskStrategy, h: int, w: int, seed: int) -> np.ndarray:
    """Binary H x W mask (1 = hidden), deterministic in (strategy, h, w, seed)."""
    p = strategy.patch
    if h % p or w % p:
        raise ContractError(
            f"image dims {h}x{w} not divisible by patch {p}"
        )
    ch, cw = h // p, w // p
    cells = np.zeros((ch, cw), dtype=np.uint8)
    rng = derive_rng(seed, "mask", strategy.kind)

    if strategy.kind == "grid":
        yy, xx = np.indices((ch, cw))
        cells = ((yy + xx) % 2 == 0).astype(np.uint8)
    elif strategy.kind == "random":
        n_masked = int(round(strategy.mask_ratio * ch * cw))
        chosen = rng.choice(ch * cw, size=n_masked, replace=False)
        cells.reshape(-1)[chosen] = 1
    else:  # block
        target = strategy.mask_ratio * ch * cw
        best = None
        for rh in range(1, ch + 1):
            for rw in range(1, cw + 1):
                err = abs(rh * rw - target)
                if best is None or err < best[0]:
                    best = (err, rh, rw)
        _, rh, rw = best
        # center-biased placement: triangular distribution over valid offsets
        max_y, max_x = ch - rh, cw - rw
        oy = int(round((rng.uniform(0, max_y) + rng.uniform(0, max_y)) / 2)) if max_y else 0
        ox = int(round((rng.uniform(0, max_x) + rng.uniform(0, max_x)) / 2)) if max_x else 0
        cells[oy:oy + rh, ox:ox + rw] = 1

    return np.repeat(np.repeat(cells, p, axis=0), p, axis=1)


def mean_fill_reconstruct(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace hidden pixels with the per-channel mean of the visible ones."""
    image = np.asarray(image, dtype=np.float64)
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    visible = mask == 0
    if not visible.any():
        raise ContractError("mean-fill on a fully masked image")
    out = image.copy()
    means = image[visible].mean(axis=0)
    out[mask == 1] = means
    return out


def mae_channel_concat(image: np.ndarray, recon_random: np.ndarray,
                       recon_block: np.ndarray, recon_grid: np.ndarray) -> np.ndarray:
    """Stack the three reconstructions channel-wise -> H x W x 9.

    ``image`` is accepted to validate shape agreement; it travels through
    its own backbone stem, not through this stack.
    """
    for name, r in (("random", recon_random), ("block", recon_block),
                    ("grid", recon_grid)):
        if r.shape != image.shape:
            raise ShapeError(
                f"reconstruction ({name}) shape {r.shape} does not match "
                f"image shape {image.shape}"
            )
    return np.concatenate([recon_random, recon_block, recon_grid], axis=2)


def build_recon_stack(image: np.ndarray, reconstructor: Callable,
                      seed: int, mask_ratio: float = 0.75,
                      patch: int = 8) -> np.ndarray:
    """Sample one mask per strategy, reconstruct, and concatenate to 9 channels."""
    h, w = image.shape[:2]
    recons = []
    for kind in STRATEGY_ORDER:
        strat = MaskStrategy(kind=kind, mask_ratio=mask_ratio, patch=patch)
        mask = sample_mask(strat, h, w, seed)
        recons.append(reconstructor(image, mask))
    return mae_channel_concat(image, *recons)
