"""Procedural RGBD(+normal) scene synthesis.

Renders small orthographic scenes of simple primitives over a ground
plane, with exact depth buffers and analytic surface normals. The
camera looks along +z, so depth is the z coordinate of the nearest
surface. Normals use the depth-gradient convention

    n = normalize(-dz/dx, -dz/dy, 1)

so a fronto-parallel surface maps to (0, 0, 1) and every visible
surface has a positive z component. Shading is flat Lambertian from a
single random directional light; no anti-aliasing, so depth edges are
hard and edge-band metrics stay well defined.

Samples carry metric depth for evaluation and a per-image affinely
normalized disparity (1/depth mapped to [-1, 1]) for training, plus a
unit-vector normal map already in [-1, 1].

Dataset files use a little-endian binary format with per-sample CRC32
checksums (see write_dataset / read_dataset).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

NUM_CLASSES = 8
CLASS_NAMES = (
    "flat",
    "spheres",
    "boxes",
    "steps",
    "corridor",
    "pyramids",
    "cylinders",
    "mixed",
)

VALID_SIZES = (32, 64)

_AMBIENT = 0.25
_MAGIC = b"JDSET"
_VERSION = 1


class DatasetError(Exception):
    """Raised when a dataset file is malformed, truncated or corrupt."""


@dataclass(frozen=True)
class SceneSample:
    rgb: np.ndarray        # (3,H,W) f32 in [-1,1]
    depth: np.ndarray      # (1,H,W) f32, metric, > 0 where valid
    disparity: np.ndarray  # (1,H,W) f32, 1/depth normalized to [-1,1]
    normal: np.ndarray     # (3,H,W) f32, unit vectors
    valid_mask: np.ndarray  # (1,H,W) f32 in {0,1}
    class_id: int


def pixel_grid(size):
    """World coordinates of pixel centers, x right and y down in [-1,1]."""
    step = 2.0 / size
    coords = -1.0 + step * (np.arange(size, dtype=np.float64) + 0.5)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return xx, yy


def _normal_from_gradient(gx, gy):
    # n = (-gx, -gy, 1) / |.|  with gx, gy broadcastable to the grid
    gx, gy = np.broadcast_arrays(np.asarray(gx, np.float64), np.asarray(gy, np.float64))
    inv = 1.0 / np.sqrt(gx * gx + gy * gy + 1.0)
    return np.stack([-gx * inv, -gy * inv, inv], axis=0)


@dataclass(frozen=True)
class Plane:
    """Unbounded plane z = z0 + ax*x + ay*y; covers the whole image."""

    z0: float
    ax: float
    ay: float
    color: tuple

    def raster(self, xx, yy):
        z = self.z0 + self.ax * xx + self.ay * yy
        n = np.broadcast_to(
            _normal_from_gradient(np.float64(self.ax), np.float64(self.ay)).reshape(3, 1, 1),
            (3,) + xx.shape,
        ).copy()
        mask = np.ones(xx.shape, dtype=bool)
        return z, n, mask


@dataclass(frozen=True)
class Sphere:
    cx: float
    cy: float
    cz: float
    r: float
    color: tuple

    def raster(self, xx, yy):
        dx, dy = xx - self.cx, yy - self.cy
        rho2 = dx * dx + dy * dy
        mask = rho2 < self.r * self.r
        s = np.sqrt(np.maximum(self.r * self.r - rho2, 0.0))
        z = self.cz - s
        n = np.stack([-dx, -dy, s], axis=0) / self.r
        return z, n, mask


def _to_local(xx, yy, cx, cy, angle):
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    return c * dx + s * dy, -s * dx + c * dy


def _rotate_gradient(gu, gv, angle):
    # gradient in local (u,v) coords back to world (x,y)
    c, s = np.cos(angle), np.sin(angle)
    return gu * c - gv * s, gu * s + gv * c


@dataclass(frozen=True)
class Box:
    """Raised flat-topped rectangle; only the top face is visible."""

    cx: float
    cy: float
    half_u: float
    half_v: float
    angle: float
    z_top: float
    color: tuple

    def raster(self, xx, yy):
        u, v = _to_local(xx, yy, self.cx, self.cy, self.angle)
        mask = (np.abs(u) < self.half_u) & (np.abs(v) < self.half_v)
        z = np.full(xx.shape, self.z_top, dtype=np.float64)
        n = np.zeros((3,) + xx.shape, dtype=np.float64)
        n[2] = 1.0
        return z, n, mask


@dataclass(frozen=True)
class Pyramid:
    """Square pyramid, apex toward the camera, four slanted faces."""

    cx: float
    cy: float
    half_base: float
    z_base: float
    z_apex: float
    angle: float
    color: tuple

    def raster(self, xx, yy):
        u, v = _to_local(xx, yy, self.cx, self.cy, self.angle)
        w = np.maximum(np.abs(u), np.abs(v))
        mask = w < self.half_base
        g = (self.z_base - self.z_apex) / self.half_base
        z = self.z_apex + w * g
        # active face decides the gradient direction; diagonal ties go to u
        on_u = np.abs(u) >= np.abs(v)
        gu = np.where(on_u, np.sign(u) * g, 0.0)
        gv = np.where(on_u, 0.0, np.sign(v) * g)
        gx, gy = _rotate_gradient(gu, gv, self.angle)
        n = _normal_from_gradient(gx, gy)
        return z, n, mask


@dataclass(frozen=True)
class Cylinder:
    """Cylinder lying in-plane: axis through (cx,cy) at height z_axis."""

    cx: float
    cy: float
    axis_angle: float
    r: float
    half_len: float
    z_axis: float
    color: tuple

    def raster(self, xx, yy):
        ax, ay = np.cos(self.axis_angle), np.sin(self.axis_angle)
        px, py = xx - self.cx, yy - self.cy
        t = px * ax + py * ay
        dx, dy = px - t * ax, py - t * ay
        d2 = dx * dx + dy * dy
        mask = (np.abs(t) < self.half_len) & (d2 < self.r * self.r)
        s = np.sqrt(np.maximum(self.r * self.r - d2, 0.0))
        z = self.z_axis - s
        n = np.stack([-dx, -dy, s], axis=0) / self.r
        return z, n, mask


def raster_scene(surfaces, light, size):
    """Z-buffer composite of surfaces, shaded; returns (rgb, depth, normal).

    surfaces: iterable of primitives with .raster(xx, yy) and .color.
    light: (3,) direction with positive z (toward the camera side).
    """
    xx, yy = pixel_grid(size)
    depth = np.full((size, size), np.inf, dtype=np.float64)
    normal = np.zeros((3, size, size), dtype=np.float64)
    base = np.zeros((3, size, size), dtype=np.float64)
    for surf in surfaces:
        z, n, m = surf.raster(xx, yy)
        closer = m & (z < depth)
        depth[closer] = z[closer]
        normal[:, closer] = n[:, closer]
        color = np.asarray(surf.color, dtype=np.float64)
        base[:, closer] = color[:, None]
    if not np.isfinite(depth).all():
        raise ValueError("scene leaves uncovered pixels; add a background plane")
    lit = np.einsum("chw,c->hw", normal, np.asarray(light, dtype=np.float64))
    shade = _AMBIENT + (1.0 - _AMBIENT) * np.maximum(lit, 0.0)
    rgb = base * shade[None] * 2.0 - 1.0
    return (
        rgb.astype(np.float32),
        depth[None].astype(np.float32),
        normal.astype(np.float32),
    )


def normalize_disparity(depth):
    """Map 1/depth affinely to [-1, 1] per image (min -> -1, max -> +1)."""
    disp = 1.0 / np.asarray(depth, dtype=np.float64)
    lo, hi = disp.min(), disp.max()
    if hi - lo < 1e-9:
        return np.zeros_like(disp, dtype=np.float32)
    return (2.0 * (disp - lo) / (hi - lo) - 1.0).astype(np.float32)


def normals_from_depth(depth, valid_mask=None):
    """Normal map from central finite differences of a depth map.

    depth: (H,W) or (1,H,W); pixel spacing is 2/size in world units.
    Pixels where valid_mask is 0 are returned as (0,0,1).
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[0]
    step = 2.0 / d.shape[1]
    gy, gx = np.gradient(d, step)
    n = _normal_from_gradient(gx, gy)
    if valid_mask is not None:
        vm = np.asarray(valid_mask).reshape(d.shape) > 0.5
        n[:, ~vm] = np.array([0.0, 0.0, 1.0])[:, None]
    return n.astype(np.float32)


def _random_light(rng):
    v = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 1.5)])
    return v / np.linalg.norm(v)


def _random_color(rng):
    return tuple(rng.uniform(0.15, 0.95, size=3))


def _random_plane(rng):
    z0 = rng.uniform(4.0, 4.6)
    # reject near-zero tilt so disparity always has usable range
    while True:
        ax, ay = rng.uniform(-0.5, 0.5, size=2)
        if abs(ax) + abs(ay) >= 0.2:
            break
    return Plane(z0, ax, ay, _random_color(rng))


def _plane_z(plane, x, y):
    return plane.z0 + plane.ax * x + plane.ay * y


def _scatter(rng, plane, count, make_one):
    prims = []
    for _ in range(count):
        cx, cy = rng.uniform(-0.75, 0.75, size=2)
        prims.append(make_one(cx, cy, _plane_z(plane, cx, cy)))
    return prims


def _build_scene(rng, class_id):
    """Surfaces for one scene category; returns a list front-to-back agnostic."""
    name = CLASS_NAMES[class_id]
    if name == "corridor":
        # trough of three planes: tilted floor plus two sloped walls,
        # realized as a z-buffer min over unbounded planes
        z0 = rng.uniform(4.0, 4.6)
        ay = rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.5)
        k = rng.uniform(1.0, 2.0)
        w = rng.uniform(0.3, 0.6)
        floor = Plane(z0, 0.0, ay, _random_color(rng))
        left = Plane(z0 + k * w, k, ay, _random_color(rng))
        right = Plane(z0 + k * w, -k, ay, _random_color(rng))
        surfaces = [floor, left, right]
        for _ in range(int(rng.integers(2, 4))):
            cx = rng.uniform(-0.5, 0.5) * w
            cy = rng.uniform(-0.7, 0.7)
            r = rng.uniform(0.08, 0.16)
            cz = z0 + ay * cy - rng.uniform(0.4, 1.0) * r
            surfaces.append(Sphere(cx, cy, cz, r, _random_color(rng)))
        return surfaces

    plane = _random_plane(rng)
    if name == "flat":
        return [plane]

    count = int(rng.integers(2, 7))
    if name == "spheres":
        def sphere(cx, cy, zp):
            r = rng.uniform(0.15, 0.35)
            return Sphere(cx, cy, zp - rng.uniform(0.4, 1.0) * r, r, _random_color(rng))
        return [plane] + _scatter(rng, plane, count, sphere)
    if name == "boxes":
        def box(cx, cy, zp):
            hu, hv = rng.uniform(0.1, 0.3, size=2)
            return Box(cx, cy, hu, hv, rng.uniform(0, np.pi), zp - rng.uniform(0.2, 0.8), _random_color(rng))
        return [plane] + _scatter(rng, plane, count, box)
    if name == "steps":
        # staircase: adjacent strips rising toward the camera
        n_steps = int(rng.integers(3, 7))
        angle = rng.uniform(0, np.pi)
        drop = rng.uniform(0.1, 0.25)
        span = 1.8
        half_u = span / (2 * n_steps)
        color = _random_color(rng)
        base = _plane_z(plane, 0.0, 0.0) - 0.2
        surfaces = [plane]
        for k in range(n_steps):
            off = -span / 2 + half_u * (2 * k + 1)
            cx, cy = off * np.cos(angle), off * np.sin(angle)
            surfaces.append(Box(cx, cy, half_u, 0.8, angle, base - k * drop, color))
        return surfaces
    if name == "pyramids":
        def pyramid(cx, cy, zp):
            h = rng.uniform(0.15, 0.35)
            return Pyramid(cx, cy, h, zp, zp - rng.uniform(0.3, 0.7), rng.uniform(0, np.pi), _random_color(rng))
        return [plane] + _scatter(rng, plane, count, pyramid)
    if name == "cylinders":
        def cylinder(cx, cy, zp):
            r = rng.uniform(0.1, 0.25)
            return Cylinder(cx, cy, rng.uniform(0, np.pi), r, rng.uniform(0.3, 0.7), zp - r, _random_color(rng))
        return [plane] + _scatter(rng, plane, count, cylinder)
    if name == "mixed":
        def any_prim(cx, cy, zp):
            kind = rng.integers(4)
            if kind == 0:
                r = rng.uniform(0.15, 0.3)
                return Sphere(cx, cy, zp - rng.uniform(0.4, 1.0) * r, r, _random_color(rng))
            if kind == 1:
                hu, hv = rng.uniform(0.1, 0.25, size=2)
                return Box(cx, cy, hu, hv, rng.uniform(0, np.pi), zp - rng.uniform(0.2, 0.8), _random_color(rng))
            if kind == 2:
                h = rng.uniform(0.15, 0.3)
                return Pyramid(cx, cy, h, zp, zp - rng.uniform(0.3, 0.7), rng.uniform(0, np.pi), _random_color(rng))
            r = rng.uniform(0.1, 0.2)
            return Cylinder(cx, cy, rng.uniform(0, np.pi), r, rng.uniform(0.3, 0.6), zp - r, _random_color(rng))
        return [plane] + _scatter(rng, plane, count, any_prim)
    raise AssertionError(f"unhandled class {name}")


def render_scene(seed, class_id, size):
    """Deterministic scene render; same arguments give a bit-identical sample."""
    if size not in VALID_SIZES:
        raise ValueError(f"size must be one of {VALID_SIZES}, got {size}")
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class_id must be in [0, {NUM_CLASSES}), got {class_id}")
    rng = np.random.default_rng(seed)
    surfaces = _build_scene(rng, class_id)
    light = _random_light(rng)
    rgb, depth, normal = raster_scene(surfaces, light, size)
    return SceneSample(
        rgb=rgb,
        depth=depth,
        disparity=normalize_disparity(depth[0])[None],
        normal=normal,
        valid_mask=np.ones((1, size, size), dtype=np.float32),
        class_id=int(class_id),
    )


def sample_class(seed):
    """Class id for a seed; uniform over categories across sequential seeds."""
    return int(np.random.default_rng(seed).integers(NUM_CLASSES))


def make_sample(seed, size):
    """Random sample for a seed: class drawn first, geometry from a child seed."""
    rng = np.random.default_rng(seed)
    class_id = int(rng.integers(NUM_CLASSES))
    geom_seed = int(rng.integers(2**31))
    return render_scene(geom_seed, class_id, size)


# ---------------------------------------------------------------------------
# dataset file io
#
# layout: b"JDSET", version u32, count u32, then per sample:
#   class u16, H u16, W u16,
#   rgb/depth/disparity/normal/valid planes as little-endian f32 row-major,
#   crc32 u32 over the sample header plus plane bytes.

_PLANES = ("rgb", "depth", "disparity", "normal", "valid_mask")
_PLANE_CHANNELS = (3, 1, 1, 3, 1)


def write_dataset(samples, path):
    blob = [_MAGIC, struct.pack("<II", _VERSION, len(samples))]
    for s in samples:
        h, w = s.depth.shape[-2:]
        head = struct.pack("<HHH", s.class_id, h, w)
        payload = b"".join(
            np.ascontiguousarray(getattr(s, name), dtype="<f4").tobytes()
            for name in _PLANES
        )
        crc = zlib.crc32(head + payload) & 0xFFFFFFFF
        blob.extend([head, payload, struct.pack("<I", crc)])
    with open(path, "wb") as f:
        f.write(b"".join(blob))


def _take(buf, off, n, what):
    if off + n > len(buf):
        raise DatasetError(f"truncated dataset file while reading {what}")
    return buf[off:off + n], off + n


def read_dataset(path):
    with open(path, "rb") as f:
        buf = f.read()
    head, off = _take(buf, 0, len(_MAGIC) + 8, "header")
    if head[: len(_MAGIC)] != _MAGIC:
        raise DatasetError("bad magic; not a dataset file")
    version, count = struct.unpack_from("<II", head, len(_MAGIC))
    if version != _VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    samples = []
    for i in range(count):
        shead, off = _take(buf, off, 6, f"sample {i} header")
        class_id, h, w = struct.unpack("<HHH", shead)
        n_floats = h * w * sum(_PLANE_CHANNELS)
        payload, off = _take(buf, off, 4 * n_floats, f"sample {i} planes")
        crc_bytes, off = _take(buf, off, 4, f"sample {i} checksum")
        (crc,) = struct.unpack("<I", crc_bytes)
        if zlib.crc32(shead + payload) & 0xFFFFFFFF != crc:
            raise DatasetError(f"checksum mismatch in sample {i}")
        flat = np.frombuffer(payload, dtype="<f4")
        fields, pos = {}, 0
        for name, c in zip(_PLANES, _PLANE_CHANNELS):
            fields[name] = flat[pos:pos + c * h * w].reshape(c, h, w).astype(np.float32)
            pos += c * h * w
        samples.append(SceneSample(class_id=class_id, **fields))
    if off != len(buf):
        raise DatasetError("trailing bytes after last sample")
    return samples
