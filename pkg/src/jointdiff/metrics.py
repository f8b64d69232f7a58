"""Affine-invariant depth metrics, tile coherence, and point-cloud export.

Monocular predictions live in disparity space up to an unknown scale and
shift, so evaluation first solves for the affine map onto ground truth
(multiple random-subset least squares, median of the solutions), then
scores AbsRel in depth space and RMSE in disparity space.

Tile coherence scores a panorama by cutting it into equal tiles and
averaging a pairwise patch-statistics distance: L2 between per-tile
channel means, channel stds, and a 16-bin histogram of the mean-centered
8x8 block-pooled luminance. Centering makes the score invariant to a
global constant offset; only comparisons within this codebase are
meaningful.

Panoramas unproject to a cylindrical point cloud exported as ASCII PLY.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

DISPARITY_FLOOR = 1e-6


@dataclass(frozen=True)
class DepthAlignment:
    scale: float
    shift: float
    n_valid: int
    n_solves: int
    solves: tuple  # (scale, shift) per non-degenerate solve


def _solve_scale_shift(p, g):
    """Least-squares (s, t) minimizing sum((s*p + t - g)^2), or None if degenerate."""
    n = float(len(p))
    sp, sg = p.sum(), g.sum()
    spp, spg = (p * p).sum(), (p * g).sum()
    det = n * spp - sp * sp
    if not det > 1e-12 * n * max(spp, 1e-300):
        return None
    s = (n * spg - sp * sg) / det
    t = (spp * sg - sp * spg) / det
    return s, t


def align_scale_shift(pred_disp, gt_disp, valid_mask=None, n_solves=8,
                      subset_frac=0.1, rng=None):
    """Median-of-subsets affine alignment of predicted onto true disparity.

    Pixels count as valid when the mask is set and both disparities are
    positive. Each solve draws subset_frac of the valid pixels without
    replacement and solves the 2x2 normal equations in float64; the
    reported (scale, shift) is the coordinate-wise median over solves.
    Degenerate subsets (constant prediction) are skipped.
    """
    if n_solves < 1:
        raise ValueError("n_solves must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    pred = np.asarray(pred_disp, dtype=np.float64).ravel()
    gt = np.asarray(gt_disp, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    valid = (pred > 0) & (gt > 0)
    if valid_mask is not None:
        valid &= np.asarray(valid_mask).ravel() > 0.5
    idx = np.flatnonzero(valid)
    if len(idx) < 2:
        raise ValueError(f"need >= 2 valid pixels, got {len(idx)}")
    p, g = pred[idx], gt[idx]
    k = min(len(idx), max(2, int(round(subset_frac * len(idx)))))
    solves = []
    for _ in range(n_solves):
        sub = rng.choice(len(idx), size=k, replace=False)
        st = _solve_scale_shift(p[sub], g[sub])
        if st is not None:
            solves.append(st)
    if not solves:
        raise ValueError("every alignment solve was degenerate")
    scales = np.array([s for s, _ in solves])
    shifts = np.array([t for _, t in solves])
    return DepthAlignment(
        scale=float(np.median(scales)),
        shift=float(np.median(shifts)),
        n_valid=len(idx),
        n_solves=len(solves),
        solves=tuple(solves),
    )


def disparity_to_depth(disp, eps=DISPARITY_FLOOR):
    """Invert disparity with a positivity floor."""
    return 1.0 / np.maximum(np.asarray(disp, dtype=np.float64), eps)


def _masked_pair(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    if valid is None:
        keep = np.ones(pred.shape, dtype=bool)
    else:
        keep = np.asarray(valid).ravel() > 0.5
    if not keep.any():
        raise ValueError("no valid pixels to score")
    return pred[keep], gt[keep]


def abs_rel(pred_depth, gt_depth, valid=None):
    """Mean |pred - gt| / gt over valid pixels, in depth space."""
    p, g = _masked_pair(pred_depth, gt_depth, valid)
    if np.any(g <= 0):
        raise ValueError("ground-truth depth must be positive on valid pixels")
    return float(np.mean(np.abs(p - g) / g))


def rmse_disparity(pred_disp, gt_disp, valid=None):
    """Root mean squared error over valid pixels, in disparity space."""
    p, g = _masked_pair(pred_disp, gt_disp, valid)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def _pool_8x8(img):
    """Block-mean the 2D image to 8x8 (blocks as equal as array_split allows)."""
    rows = np.array_split(img, 8, axis=0)
    return np.array([[block.mean() for block in np.array_split(r, 8, axis=1)] for r in rows])


def _tile_feature(tile):
    means = tile.mean(axis=(1, 2))
    stds = tile.std(axis=(1, 2))
    pooled = _pool_8x8(tile.mean(axis=0))
    centered = np.clip(pooled - pooled.mean(), -1.0, 1.0)
    hist, _ = np.histogram(centered, bins=16, range=(-1.0, 1.0))
    return np.concatenate([means, stds, hist / centered.size])


def tile_coherence(pano, n_tiles=4):
    """Average pairwise patch-statistics distance between equal tiles.

    Lower is more coherent; 0 when all tiles carry identical statistics.
    """
    pano = np.asarray(pano, dtype=np.float64)
    if pano.ndim != 3:
        raise ValueError("panorama must be (C,H,W)")
    if n_tiles < 2:
        raise ValueError("need at least 2 tiles")
    if pano.shape[2] % n_tiles != 0:
        raise ValueError(f"width {pano.shape[2]} not divisible by {n_tiles} tiles")
    features = [_tile_feature(t) for t in np.split(pano, n_tiles, axis=2)]
    dists = [
        np.linalg.norm(features[i] - features[j])
        for i, j in itertools.combinations(range(n_tiles), 2)
    ]
    return float(np.mean(dists))


def panorama_to_points(rgb_pano, depth_pano, h_fov_degrees=180.0):
    """Unproject a cylindrical panorama to (x, y, z, r, g, b) points.

    Column u maps to azimuth theta = (u/W - 0.5) * fov; a pixel at depth d
    lands at (d*sin(theta), y, d*cos(theta)) with y scaled so pixels are
    square on the cylinder: y = (v - H/2) * (fov/W) * d. Rows grow
    downward. Pixels with nonpositive depth are skipped. Colors come from
    rgb in [-1, 1] mapped to 0..255.
    """
    rgb = np.asarray(rgb_pano, dtype=np.float64)
    depth = np.asarray(depth_pano, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[0]
    h, w = depth.shape
    fov = np.radians(h_fov_degrees)
    uu = np.arange(w, dtype=np.float64)
    vv = np.arange(h, dtype=np.float64)
    theta = (uu / w - 0.5) * fov
    keep = depth > 0
    d = depth[keep]
    th = np.broadcast_to(theta[None, :], (h, w))[keep]
    vgrid = np.broadcast_to(vv[:, None], (h, w))[keep]
    x = d * np.sin(th)
    z = d * np.cos(th)
    y = (vgrid - h / 2.0) * (fov / w) * d
    colors = np.clip(np.round((rgb + 1.0) * 0.5 * 255.0), 0, 255)
    cols = colors.reshape(3, -1)[:, keep.ravel()]
    return np.stack([x, y, z, cols[0], cols[1], cols[2]], axis=1)


def write_ply(points, path):
    """ASCII PLY export of (x,y,z,r,g,b) rows."""
    points = np.asarray(points, dtype=np.float64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for row in points:
        lines.append(
            f"{row[0]:.6f} {row[1]:.6f} {row[2]:.6f} "
            f"{int(row[3])} {int(row[4])} {int(row[5])}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
