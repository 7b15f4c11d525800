"""Bottom-up saliency maps: a boolean-map algorithm and a mask-based oracle.

Both producers are frozen: they are plain numpy computations that never touch
the autodiff tape, so no gradient can flow into saliency. Outputs are H x W
float maps in [0,1] at the source image's resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# 4-connectivity: shared edges only, no diagonals
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class BmsConfig:
    thresholds_per_channel: int = 8
    opening_radius: int = 1  # 0 disables the opening entirely


def boolean_maps(image: np.ndarray, config: BmsConfig) -> list[np.ndarray]:
    """Threshold each channel at t_k = k/(T+1), k=1..T; emit map and complement.

    Thresholding is strict (value > t_k), so pixels exactly at a threshold
    fall into the complement. Returns 3*T*2 binary maps, channel-major, then
    threshold, map before complement.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    t = config.thresholds_per_channel
    if t < 1:
        raise ValueError("thresholds_per_channel must be >= 1")
    maps = []
    for channel in image:
        for k in range(1, t + 1):
            m = channel > k / (t + 1)
            maps.append(m)
            maps.append(~m)
    return maps


def surroundedness(bmap: np.ndarray, opening_radius: int = 1) -> np.ndarray:
    """Keep only enclosed regions: drop 4-connected components touching the
    border, then apply a morphological opening of the configured radius."""
    bmap = np.asarray(bmap, dtype=bool)
    labels, n = ndimage.label(bmap, structure=_CROSS)
    if n == 0:
        return np.zeros_like(bmap)
    border = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    touching = np.unique(border[border > 0])
    kept = bmap & ~np.isin(labels, touching)
    if opening_radius > 0 and kept.any():
        kept = ndimage.binary_opening(kept, structure=_CROSS,
                                      iterations=opening_radius)
    return kept


def bms_saliency(image: np.ndarray, config: BmsConfig) -> np.ndarray:
    """Mean surroundedness over all boolean maps, min-max normalized.

    A constant mean map (e.g. from a constant image, where no boolean map has
    an enclosed region) normalizes to all zeros.
    """
    maps = boolean_maps(image, config)
    acc = np.zeros(image.shape[1:], dtype=np.float64)
    for m in maps:
        acc += surroundedness(m, config.opening_radius)
    acc /= len(maps)
    return _minmax_or_zeros(acc)


def box_blur(m: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge replication.

    All-zero and all-one maps pass through exactly (their window sums are
    small integers, so the division by 9 is lossless).
    """
    padded = np.pad(m, 1, mode="edge")
    acc = np.zeros_like(m)
    for di in range(3):
        for dj in range(3):
            acc += padded[di:di + m.shape[0], dj:dj + m.shape[1]]
    return acc / 9.0


def oracle_saliency(scene, blur_radius: int = 2) -> np.ndarray:
    """Ground-truth saliency for synthetic scenes: the union of every object
    mask (annotated or not), box-blurred blur_radius times, then min-max
    normalized. Constant maps are returned unchanged, so an empty scene gives
    zeros and a full-frame object gives ones."""
    h, w = scene.image.shape[1:]
    union = np.zeros((h, w), dtype=np.float64)
    for obj in scene.objects:
        if obj.mask is None:
            raise ValueError("scene object lacks an instance mask")
        union = np.maximum(union, obj.mask.astype(np.float64))
    for _ in range(blur_radius):
        union = box_blur(union)
    lo, hi = union.min(), union.max()
    if hi > lo:
        return (union - lo) / (hi - lo)
    return union


def _minmax_or_zeros(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi > lo:
        return (m - lo) / (hi - lo)
    return np.zeros_like(m)
