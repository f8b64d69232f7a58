"""Tile-synchronized denoising for canvases wider than the model's native size.

Every reverse step denoises overlapping native-size tiles of the shared
canvas one DDIM step (all tiles at the same noise level) and aggregates
the updated tiles back by weighted averaging. Three coherence tricks,
each independently switchable:

  1. random offsets: the tile grid shifts by a fresh uniform offset in
     [0, stride)^2 each step, so tile seams never pin to fixed columns;
  2. boundary decay: aggregation weights fall linearly to exactly 0 at
     interior tile boundaries (sides flush with the canvas edge keep
     full weight so every pixel retains positive total weight);
  3. whole-image tile: during the first 40% of the steps the canvas,
     nearest-subsampled to the native size, joins the batch as one more
     tile whose bilinearly upsampled update carries weight 5.

Panoramic canvases wrap horizontally: tiles continue across the seam and
the whole-image tile is rolled by a random amount first so the seam gets
no special treatment. Disabling all three tricks gives plain
overlapping-tile averaging; additionally setting stride equal to the
tile size makes the tiles fully independent (the naive baseline).

SDEdit refinement corrupts given maps partway up the schedule and runs
the remaining reverse chain, optionally tiled (whole-image tile always
off there), optionally holding one modality fixed to its input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (
    NoiseSchedule,
    cfg_predict,
    corrupt,
    ddim_timesteps,
    ddim_update,
    sample_joint,
)

WHOLE_IMAGE_WEIGHT = 5.0
WHOLE_IMAGE_STEP_FRACTION = 0.4


@dataclass(frozen=True)
class TileStrategy:
    stride: int
    random_offsets: bool
    boundary_decay: bool
    whole_image: bool


def full_strategy(stride: int = 16) -> TileStrategy:
    """All three coherence tricks on."""
    return TileStrategy(stride, True, True, True)


def plain_strategy(stride: int = 16) -> TileStrategy:
    """Overlapping tiles, uniform weights, no offsets, no whole-image tile."""
    return TileStrategy(stride, False, False, False)


def independent_strategy(tile_size: int = 32) -> TileStrategy:
    """Non-overlapping tiles with hard boundaries: the naive baseline."""
    return TileStrategy(tile_size, False, False, False)


@dataclass(frozen=True)
class TileLayout:
    canvas: tuple          # (H, W)
    tile_size: int
    stride: int
    offset: tuple          # (dx, dy) applied this step
    tiles: tuple           # (y, x) tile starts; x may wrap when panoramic
    panoramic: bool


def _axis_starts(length, tile, stride, off):
    """Clamped tile starts covering [0, length); adjacent gaps <= stride."""
    if length == tile:
        return (0,)
    starts = set()
    s = off - ((off // stride) + 1) * stride  # overshoot past the left edge
    while s < length:
        starts.add(min(max(s, 0), length - tile))
        s += stride
    return tuple(sorted(starts))


def make_layout(canvas, tile_size, stride, rng=None, panoramic=False,
                random_offset=True):
    """Tile grid over the canvas with a fresh random offset.

    Call once per denoising step: each call draws a new offset uniform
    over [0, stride)^2 (when random_offset is set). Panoramic layouts
    wrap tiles horizontally and need the width divisible by the stride.
    """
    h, w = canvas
    if stride < 1 or stride > tile_size:
        raise ValueError(f"stride must be in [1, {tile_size}], got {stride}")
    if h < tile_size or w < tile_size:
        raise ValueError(f"canvas {canvas} smaller than tile {tile_size}")
    if panoramic and w % stride != 0:
        raise ValueError(f"panoramic width {w} must be divisible by stride {stride}")
    if random_offset and stride > 1:
        if rng is None:
            raise ValueError("random offsets need an rng")
        dx, dy = (int(v) for v in rng.integers(0, stride, size=2))
    else:
        dx = dy = 0
    ys = _axis_starts(h, tile_size, stride, dy)
    if panoramic:
        xs = tuple(sorted((dx + k * stride) % w for k in range(w // stride)))
    else:
        xs = _axis_starts(w, tile_size, stride, dx)
    tiles = tuple((y, x) for y in ys for x in xs)
    return TileLayout(canvas=(h, w), tile_size=tile_size, stride=stride,
                      offset=(dx, dy), tiles=tiles, panoramic=panoramic)


def _axis_weight(tile, decay_width, exempt_lo, exempt_hi):
    i = np.arange(tile, dtype=np.float64)
    lo = np.ones(tile) if exempt_lo else np.minimum(i / decay_width, 1.0)
    hi = np.ones(tile) if exempt_hi else np.minimum((tile - 1 - i) / decay_width, 1.0)
    return np.minimum(lo, hi)


def tile_weight_map(layout: TileLayout, pos, decay=True):
    """Aggregation weights for one tile: 0 at interior tile boundaries,
    rising linearly over stride/2 pixels; canvas-flush sides stay at 1."""
    t = layout.tile_size
    if not decay:
        return np.ones((t, t))
    h, w = layout.canvas
    y, x = pos
    dw = max(layout.stride // 2, 1)
    wy = _axis_weight(t, dw, exempt_lo=(y == 0), exempt_hi=(y + t == h))
    if layout.panoramic:
        wx = _axis_weight(t, dw, exempt_lo=False, exempt_hi=False)
    else:
        wx = _axis_weight(t, dw, exempt_lo=(x == 0), exempt_hi=(x + t == w))
    return np.outer(wy, wx)


def _tile_rows_cols(layout, pos):
    t = layout.tile_size
    y, x = pos
    rows = np.arange(y, y + t)
    cols = np.arange(x, x + t)
    if layout.panoramic:
        cols = cols % layout.canvas[1]
    return rows, cols


def extract_tile(canvas_arr, layout, pos):
    rows, cols = _tile_rows_cols(layout, pos)
    return canvas_arr[..., rows[:, None], cols[None, :]]


def downsample_nearest(arr, out_h, out_w):
    """Subsample without filtering, keeping per-pixel statistics intact."""
    h, w = arr.shape[-2:]
    ri = (np.arange(out_h) * h) // out_h
    ci = (np.arange(out_w) * w) // out_w
    return arr[..., ri[:, None], ci[None, :]]


def bilinear_resize(arr, out_h, out_w):
    """Pixel-center-aligned separable bilinear resize; identity at same size."""
    h, w = arr.shape[-2:]

    def grid(n_out, n_in):
        c = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(c).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    y0, y1, fy = grid(out_h, h)
    x0, x1, fx = grid(out_w, w)
    a = arr[..., y0[:, None], x0[None, :]]
    b = arr[..., y0[:, None], x1[None, :]]
    c = arr[..., y1[:, None], x0[None, :]]
    d = arr[..., y1[:, None], x1[None, :]]
    top = a + (b - a) * fx[None, :]
    bot = c + (d - c) * fx[None, :]
    return top + (bot - top) * fy[:, None]


def tiled_denoise_step(model, x, y, t, t_prev, sched: NoiseSchedule,
                       layout: TileLayout, class_id=None, guidance: float = 1.0,
                       decay: bool = True, whole_image: bool = False,
                       rng: np.random.Generator | None = None):
    """One synchronized DDIM step over all tiles of the canvas.

    x (3,H,W) and y (Cy,H,W) are the shared noisy canvases at level t.
    All tiles (plus the optional whole-image tile) go through the model
    as one batch, get updated to t_prev, and are averaged back with the
    layout's weight maps. Raises if any pixel ends up with zero total
    weight, which indicates a broken layout.
    """
    h, w = layout.canvas
    ts = layout.tile_size
    x_tiles = [extract_tile(x, layout, p) for p in layout.tiles]
    y_tiles = [extract_tile(y, layout, p) for p in layout.tiles]
    roll = 0
    if whole_image:
        if layout.panoramic:
            if rng is None:
                raise ValueError("panoramic whole-image tile needs an rng for the roll")
            roll = int(rng.integers(0, w))
        x_tiles.append(downsample_nearest(np.roll(x, -roll, axis=-1), ts, ts))
        y_tiles.append(downsample_nearest(np.roll(y, -roll, axis=-1), ts, ts))
    xb = np.stack(x_tiles).astype(np.float32)
    yb = np.stack(y_tiles).astype(np.float32)
    cid = class_id if class_id is not None else model.null_class_id
    ids = np.full(len(x_tiles), cid)
    eps_x, eps_y = cfg_predict(model, xb, yb, ids, t, guidance)
    upd_x = ddim_update(xb, eps_x, t, t_prev, sched)
    upd_y = ddim_update(yb, eps_y, t, t_prev, sched)

    acc_x = np.zeros(x.shape, np.float64)
    acc_y = np.zeros(y.shape, np.float64)
    wsum = np.zeros((h, w), np.float64)
    for i, pos in enumerate(layout.tiles):
        wmap = tile_weight_map(layout, pos, decay)
        rows, cols = _tile_rows_cols(layout, pos)
        acc_x[:, rows[:, None], cols[None, :]] += wmap * upd_x[i]
        acc_y[:, rows[:, None], cols[None, :]] += wmap * upd_y[i]
        wsum[rows[:, None], cols[None, :]] += wmap
    if whole_image:
        up_x = np.roll(bilinear_resize(upd_x[-1], h, w), roll, axis=-1)
        up_y = np.roll(bilinear_resize(upd_y[-1], h, w), roll, axis=-1)
        acc_x += WHOLE_IMAGE_WEIGHT * up_x
        acc_y += WHOLE_IMAGE_WEIGHT * up_y
        wsum += WHOLE_IMAGE_WEIGHT
    if not (wsum > 0).all():
        raise ValueError("zero aggregation weight at some pixel; layout does not cover")
    return (acc_x / wsum).astype(np.float32), (acc_y / wsum).astype(np.float32)


def generate_panorama(model, sched: NoiseSchedule, width, class_id=None,
                      height=None, tile_size=32, strategy: TileStrategy | None = None,
                      num_steps: int = 50, guidance: float = 1.0,
                      rng: np.random.Generator | None = None):
    """Wide joint generation with horizontal wrap; returns ((3,H,W), (Cy,H,W)).

    Per-step rng draw order: layout offset (when the strategy shifts
    tiles), then the whole-image roll (when that tile is active). A
    canvas that already matches the native size falls back to ordinary
    single-image sampling.
    """
    rng = rng or np.random.default_rng(0)
    strategy = strategy or full_strategy()
    height = height or tile_size
    if width == tile_size and height == tile_size:
        ids = None if class_id is None else np.array([class_id])
        x, y = sample_joint(model, sched, 1, ids, num_steps, guidance, rng,
                            size=tile_size)
        return x[0], y[0]
    if width % strategy.stride != 0:
        raise ValueError(f"width {width} must be a multiple of stride {strategy.stride}")
    x = rng.standard_normal((3, height, width)).astype(np.float32)
    y = rng.standard_normal((model.joint_channels, height, width)).astype(np.float32)
    ts = ddim_timesteps(sched.num_steps, num_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        layout = make_layout((height, width), tile_size, strategy.stride, rng,
                             panoramic=True, random_offset=strategy.random_offsets)
        whole = strategy.whole_image and i / len(ts) < WHOLE_IMAGE_STEP_FRACTION
        x, y = tiled_denoise_step(model, x, y, t, t_prev, sched, layout,
                                  class_id, guidance, decay=strategy.boundary_decay,
                                  whole_image=whole, rng=rng)
    return x, y


def sdedit_timesteps(num_train_steps, num_sample_steps, strength):
    """Descending levels for a strength-truncated reverse chain."""
    t_start = int(round(strength * num_train_steps)) - 1
    if t_start < 0:
        return []
    n = max(1, int(round(num_sample_steps * strength)))
    ts = np.linspace(t_start, 0, n)
    return sorted(set(int(round(v)) for v in ts), reverse=True)


def sdedit_refine(model, sched: NoiseSchedule, x_init, y_init, strength,
                  class_id=None, num_steps: int = 50, guidance: float = 1.0,
                  tiled: bool = False, strategy: TileStrategy | None = None,
                  tile_size: int = 32, rng: np.random.Generator | None = None,
                  hold_x: bool = False, hold_y: bool = False):
    """Corrupt the given maps partway and denoise back; returns (x, y).

    strength scales how far up the schedule the inputs are pushed; 1
    restarts from the top (full generation), values near 0 barely touch
    the inputs. hold_x / hold_y pin a modality to its input through
    channel-wise blending, so only the other modality is refined. Tiled
    mode never uses the whole-image tile.
    """
    if not 0 < strength <= 1:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    rng = rng or np.random.default_rng(0)
    x_init = np.asarray(x_init, dtype=np.float32)
    y_init = np.asarray(y_init, dtype=np.float32)
    ts = sdedit_timesteps(sched.num_steps, num_steps, strength)
    if not ts:
        return x_init.copy(), y_init.copy()
    strategy = strategy or full_strategy()
    t_start = ts[0]
    x = corrupt(x_init, t_start, rng.standard_normal(x_init.shape).astype(np.float32), sched)
    y = corrupt(y_init, t_start, rng.standard_normal(y_init.shape).astype(np.float32), sched)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        if hold_x:
            x = corrupt(x_init, t, rng.standard_normal(x.shape).astype(np.float32), sched)
        if hold_y:
            y = corrupt(y_init, t, rng.standard_normal(y.shape).astype(np.float32), sched)
        if tiled:
            layout = make_layout(x.shape[-2:], tile_size, strategy.stride, rng,
                                 panoramic=False, random_offset=strategy.random_offsets)
            x, y = tiled_denoise_step(model, x, y, t, t_prev, sched, layout,
                                      class_id, guidance,
                                      decay=strategy.boundary_decay,
                                      whole_image=False, rng=rng)
        else:
            cid = class_id if class_id is not None else model.null_class_id
            ids = np.full(1, cid)
            eps_x, eps_y = cfg_predict(model, x[None], y[None], ids, t, guidance)
            x = ddim_update(x[None], eps_x, t, t_prev, sched)[0]
            y = ddim_update(y[None], eps_y, t, t_prev, sched)[0]
    if hold_x:
        x = x_init.copy()
    if hold_y:
        y = y_init.copy()
    return x, y
