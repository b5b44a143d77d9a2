"""Synthetic scenes, a reference ISP, and misaligned capture pairs for testing."""

from __future__ import annotations

import cv2
import numpy as np
from scipy import ndimage

from . import rawio
from .alignkit import affine_at_pose

# fixed sensor-to-sRGB colour matrix (rows sum to one so grey stays grey)
COLOR_MATRIX = np.array([
    [1.60, -0.45, -0.15],
    [-0.25, 1.45, -0.20],
    [-0.05, -0.55, 1.60],
])


def smooth_scene(rng: np.random.Generator, size, channels: int = 3,
                 sigmas=(12.0, 5.0, 2.0), lo: float = 0.05, hi: float = 0.85) -> np.ndarray:
    """Random smooth texture in [lo, hi]: a sum of Gaussian-filtered noise fields."""
    h, w = (size, size) if np.isscalar(size) else size
    img = np.zeros((h, w, channels))
    for i, sigma in enumerate(sigmas):
        shared = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
        for c in range(channels):
            own = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
            field = 0.7 * shared + 0.3 * own
            img[..., c] += field / (field.std() + 1e-12) / (i + 1)
    img -= img.min(axis=(0, 1))
    img /= img.max(axis=(0, 1)) + 1e-12
    return lo + (hi - lo) * img


def mosaic(linear_rgb: np.ndarray, cfa_layout=rawio.CFALayout.RGGB) -> np.ndarray:
    """Sample an (H, W, 3) image through a Bayer CFA -> (H, W) mosaic."""
    masks = rawio.cfa_masks(linear_rgb.shape[:2], cfa_layout)
    return np.sum(np.moveaxis(linear_rgb, -1, 0) * masks, axis=0)


def reference_isp(mosaic_01: np.ndarray, cfa_layout=rawio.CFALayout.RGGB,
                  matrix: np.ndarray = COLOR_MATRIX, gamma: float = 2.2) -> np.ndarray:
    """Bilinear demosaic, fixed colour matrix, 1/gamma encoding; output in [0, 1]."""
    rgb = rawio.bilinear_demosaic(mosaic_01, cfa_layout)
    rgb = np.clip(rgb @ matrix.T, 0.0, 1.0)
    return rgb ** (1.0 / gamma)


def to_counts(mosaic_01: np.ndarray, bit_depth: int = rawio.DEFAULT_BIT_DEPTH) -> np.ndarray:
    return np.rint(np.clip(mosaic_01, 0, 1) * (2**bit_depth - 1)).astype(np.uint16)


def isp_pairs(n: int, size: int = 64, seed: int = 0):
    """``n`` (packed RAW (n, size/2, size/2, 4), target RGB (n, size, size, 3)) pairs.

    RAW values are quantized to 10 bits like the real dataset; targets come
    from :func:`reference_isp` applied to the quantized mosaic.
    """
    rng = np.random.default_rng(seed)
    packed = np.empty((n, size // 2, size // 2, 4))
    rgb = np.empty((n, size, size, 3))
    for i in range(n):
        scene = smooth_scene(rng, size, sigmas=(8.0, 3.0, 1.5))
        counts = to_counts(mosaic(scene))
        frame = rawio.normalize(rawio.mosaic_from_counts(counts))
        packed[i] = rawio.pack_rggb(frame).data
        rgb[i] = reference_isp(frame.data)
    return packed, rgb


def misaligned_canvas(aligned: np.ndarray, window: int, margin: int,
                      dx: float, dy: float, rotation: float) -> np.ndarray:
    """Canvas that, sampled at the pose (dx, dy, rotation), reproduces ``aligned``.

    ``aligned`` is the true content on an enlarged grid: shape
    (window + 2*big, window + 2*big, C) with ``big`` >= margin + 2*|shift|,
    centred on the window.
    """
    big = (aligned.shape[0] - window) // 2
    m = affine_at_pose(window, margin, dx, dy, rotation)  # canvas -> window
    full = np.vstack([m, [0, 0, 1]])
    # window coords -> aligned-grid coords is a shift by ``big``
    shift = np.array([[1, 0, big], [0, 1, big], [0, 0, 1]], dtype=np.float64)
    canvas_to_aligned = (shift @ full)[:2]
    side = window + 2 * margin
    return cv2.warpAffine(
        aligned.astype(np.float32), canvas_to_aligned, (side, side),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP, borderMode=cv2.BORDER_REFLECT,
    ).astype(np.float64)
