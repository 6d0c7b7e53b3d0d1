"""Foreground/background estimation on sparse depth and network input assembly.

Projected LiDAR mixes foreground and background surfaces near object
boundaries (the sensors sit at different positions), so the network gets,
alongside the raw sparse depth, a local-minimum map (nearest surface) and a
local-maximum map (farthest surface) over each neighborhood. Zeros are
missing data, never values: a naive min over raw sparse depth would return 0
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autograd import Tensor
from .depthio import DepthMap

DEFAULT_POOL_KERNEL = 15
DEFAULT_INPUT_SCALE_M = 100.0


@dataclass
class PooledPair:
    foreground: DepthMap  # windowed min over valid pixels
    background: DepthMap  # windowed max over valid pixels


def fgbg_pool(sparse: DepthMap, kernel: int = DEFAULT_POOL_KERNEL,
              stride: int = 1) -> PooledPair:
    """Validity-aware min/max pooling over kernel x kernel windows.

    Border padding counts as invalid; a window with no valid pixel produces
    an invalid (0) output pixel. Output size equals input size (stride 1).
    """
    if kernel % 2 == 0:
        raise ValueError(f"pooling kernel must be odd, got {kernel}")
    if stride != 1:
        raise ValueError(f"only stride 1 (same-size output) is supported, got {stride}")
    valid = sparse.values > 0
    lo_src = np.where(valid, sparse.values, np.inf)
    hi_src = np.where(valid, sparse.values, -np.inf)
    lo = ndimage.minimum_filter(lo_src, size=kernel, mode="constant", cval=np.inf)
    hi = ndimage.maximum_filter(hi_src, size=kernel, mode="constant", cval=-np.inf)
    any_valid = np.isfinite(lo)
    fg = np.where(any_valid, lo, 0.0)
    bg = np.where(any_valid, hi, 0.0)
    return PooledPair(foreground=DepthMap(fg), background=DepthMap(bg))


def assemble_input(sparse: DepthMap, pooled: PooledPair,
                   scale: float = DEFAULT_INPUT_SCALE_M) -> Tensor:
    """Stack (sparse, foreground, background) / scale into a (1, 3, H, W) tensor.

    Invalid pixels are already 0 and stay 0, the single missing-data sentinel
    used everywhere.
    """
    shape = sparse.values.shape
    if pooled.foreground.values.shape != shape or pooled.background.values.shape != shape:
        raise ValueError(
            f"shape mismatch: sparse {shape}, foreground {pooled.foreground.values.shape}, "
            f"background {pooled.background.values.shape}")
    if scale <= 0:
        raise ValueError(f"normalization scale must be positive, got {scale}")
    stacked = np.stack([sparse.values, pooled.foreground.values,
                        pooled.background.values], axis=0) / scale
    return Tensor(stacked[None])


def prepare_sample(sparse: DepthMap, kernel: int = DEFAULT_POOL_KERNEL,
                   scale: float = DEFAULT_INPUT_SCALE_M) -> Tensor:
    """fgbg_pool + assemble_input in one call."""
    return assemble_input(sparse, fgbg_pool(sparse, kernel=kernel), scale=scale)
