"""PNG round-trips for the three map kinds the pipeline touches.

All maps live in [-1, 1].  RGB and normal maps quantize to 8-bit
channels ((0,0,1) normals land on pixel (128,128,255)); depth and
disparity maps go to single-channel 16-bit so that quantization error
stays below what any metric here can resolve.  Values outside [-1, 1]
are clipped on write.  Readers verify the file's mode and raise
ImageFormatError instead of silently reinterpreting other bit depths.
"""
from __future__ import annotations

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    """Raised when a file is not in the expected PNG mode."""


def _to_u8(arr: np.ndarray) -> np.ndarray:
    v = (np.clip(arr, -1.0, 1.0) + 1.0) * 0.5 * 255.0
    return np.round(v).astype(np.uint8)


def _from_u8(v: np.ndarray) -> np.ndarray:
    return (v.astype(np.float32) / 255.0) * 2.0 - 1.0


def write_rgb_png(path: str, rgb: np.ndarray):
    """(3, H, W) in [-1, 1] -> 8-bit RGB file."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {rgb.shape}")
    Image.fromarray(_to_u8(rgb).transpose(1, 2, 0), mode="RGB").save(path)


def read_rgb_png(path: str) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "RGB":
        raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
    return _from_u8(np.asarray(img)).transpose(2, 0, 1)


write_normal_png = write_rgb_png
read_normal_png = read_rgb_png


def write_mask_png(path: str, mask: np.ndarray):
    """(H, W) or (1, H, W) binary mask -> 8-bit grayscale file, 255 = regenerate."""
    if mask.ndim == 3:
        mask = mask[0]
    vals = np.unique(mask)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise ValueError(f"mask must be exactly binary, found values {vals[:8]}")
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def read_mask_png(path: str) -> np.ndarray:
    """8-bit grayscale {0, 255} file -> (1, H, W) float32 {0, 1} mask."""
    img = Image.open(path)
    if img.mode != "L":
        raise ImageFormatError(f"{path}: expected 8-bit grayscale mask, got mode {img.mode!r}")
    v = np.asarray(img)
    if not np.isin(np.unique(v), (0, 255)).all():
        raise ImageFormatError(f"{path}: mask pixels must be 0 or 255")
    return (v == 255).astype(np.float32)[None]


def write_depth_png(path: str, depth: np.ndarray):
    """(H, W) or (1, H, W) in [-1, 1] -> 16-bit grayscale file."""
    if depth.ndim == 3:
        if depth.shape[0] != 1:
            raise ValueError(f"expected single channel, got {depth.shape}")
        depth = depth[0]
    if depth.ndim != 2:
        raise ValueError(f"expected (H, W) or (1, H, W), got {depth.shape}")
    v = (np.clip(depth, -1.0, 1.0) + 1.0) * 0.5 * 65535.0
    Image.fromarray(np.round(v).astype(np.uint16)).save(path)


def read_depth_png(path: str) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("I;16", "I"):
        raise ImageFormatError(f"{path}: expected 16-bit grayscale, got mode {img.mode!r}")
    v = np.asarray(img).astype(np.float32)
    return (v / 65535.0) * 2.0 - 1.0
