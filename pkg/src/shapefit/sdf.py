"""Discrete signed distance fields.

Sign convention: POSITIVE values are interior, NEGATIVE exterior. Queries
outside a grid's support cube return a large negative sentinel instead of
-infinity so downstream arithmetic stays finite.

Grid layout: a flat array in the fixed order index = i + l*(j + w*k) for
voxel (i, j, k) of an l x w x h lattice; `origin` is the object-frame
coordinate of the center of voxel (0, 0, 0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, NonWatertightMesh, OutOfSupport, ParamOutOfRange, VersionMismatch

EXTERIOR_SENTINEL = -1.0e6

_SLFG_MAGIC = b"SLFG"
_SLFG_VERSION = 1


@dataclass
class SdfGrid:
    """Discretized signed distance field over a regular lattice."""

    dims: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    values: np.ndarray  # flat, length l*w*h

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        l, w, h = self.dims
        if self.values.size != l * w * h:
            raise ValueError(f"expected {l*w*h} values, got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid contains non-finite values")

    @property
    def n(self) -> int:
        l, w, h = self.dims
        return l * w * h

    @property
    def values3d(self) -> np.ndarray:
        """(l, w, h) view of the flat value array."""
        return self.values.reshape(self.dims, order="F")

    @property
    def support_min(self) -> np.ndarray:
        return self.origin

    @property
    def support_max(self) -> np.ndarray:
        return self.origin + (np.array(self.dims, dtype=np.float64) - 1.0) * self.voxel_size

    def meta(self) -> tuple:
        """Hashable grid geometry, used for bank compatibility checks."""
        return (self.dims, round(float(self.voxel_size), 12), tuple(np.round(self.origin, 12)))

    def voxel_centers(self) -> np.ndarray:
        """(n, 3) voxel-center coordinates in flat order (i fastest)."""
        l, w, h = self.dims
        i, j, k = np.meshgrid(np.arange(l), np.arange(w), np.arange(h), indexing="ij")
        ijk = np.stack(
            [i.reshape(-1, order="F"), j.reshape(-1, order="F"), k.reshape(-1, order="F")],
            axis=1,
        ).astype(np.float64)
        return self.origin + ijk * self.voxel_size


def sample(grid: SdfGrid, x) -> np.ndarray | float:
    """Trilinear interpolation at object-frame point(s) x.

    Points outside the support cube (the hull of voxel centers) get the
    exterior sentinel. Accepts (..., 3) arrays; returns matching shape.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 1
    pts = x.reshape(-1, 3)
    g = (pts - grid.origin) / grid.voxel_size
    dims = np.array(grid.dims)
    inside = np.all((g >= 0.0) & (g <= dims - 1.0), axis=1)

    out = np.full(len(pts), EXTERIOR_SENTINEL, dtype=np.float64)
    if np.any(inside):
        gi = g[inside]
        c = np.floor(gi).astype(np.int64)
        c = np.minimum(c, dims - 2)  # top boundary uses last cell with frac 1
        f = gi - c
        v3 = grid.values3d
        i0, j0, k0 = c[:, 0], c[:, 1], c[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

        def corner(di, dj, dk):
            return v3[i0 + di, j0 + dj, k0 + dk]

        c00 = corner(0, 0, 0) * (1 - fx) + corner(1, 0, 0) * fx
        c10 = corner(0, 1, 0) * (1 - fx) + corner(1, 1, 0) * fx
        c01 = corner(0, 0, 1) * (1 - fx) + corner(1, 0, 1) * fx
        c11 = corner(0, 1, 1) * (1 - fx) + corner(1, 1, 1) * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[inside] = c0 * (1 - fz) + c1 * fz

    out = out.reshape(x.shape[:-1])
    return float(out) if scalar else out


def spatial_gradient(grid: SdfGrid, x) -> np.ndarray:
    """Exact spatial gradient of the trilinear interpolant at x.

    x must be at least one voxel inside the support cube; cell boundaries
    take the limit from the lower-index cell (deterministic tie rule).
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 1
    pts = x.reshape(-1, 3)
    g = (pts - grid.origin) / grid.voxel_size
    dims = np.array(grid.dims)
    ok = np.all((g >= 1.0) & (g <= dims - 2.0), axis=1)
    if not np.all(ok):
        bad = pts[~ok][0]
        raise OutOfSupport(f"gradient query outside differentiable region: {bad}")

    c = np.ceil(g).astype(np.int64) - 1  # exact integers fall to the lower cell
    c = np.clip(c, 0, dims - 2)
    f = g - c
    v3 = grid.values3d
    i0, j0, k0 = c[:, 0], c[:, 1], c[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    v = np.empty((len(pts), 2, 2, 2))
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                v[:, di, dj, dk] = v3[i0 + di, j0 + dj, k0 + dk]

    wx = np.stack([1 - fx, fx], 1)
    wy = np.stack([1 - fy, fy], 1)
    wz = np.stack([1 - fz, fz], 1)
    dx = np.einsum("njk,nj,nk->n", v[:, 1] - v[:, 0], wy, wz)
    dy = np.einsum("nik,ni,nk->n", v[:, :, 1] - v[:, :, 0], wx, wz)
    dz = np.einsum("nij,ni,nj->n", v[:, :, :, 1] - v[:, :, :, 0], wx, wy)
    grad = np.stack([dx, dy, dz], axis=1) / grid.voxel_size
    return grad[0] if scalar else grad.reshape(x.shape)


# --- procedural car shapes ----------------------------------------------------

_CAR_RANGES = {
    "length": (3.5, 5.2),
    "width": (1.6, 2.0),
    "body_height": (0.9, 1.3),
    "cabin_frac": (0.0, 0.62),
    "cabin_height": (0.3, 0.6),
    "hood_drop": (0.0, 0.35),
    "rounding": (0.0, 0.18),
}


@dataclass(frozen=True)
class CarParams:
    """Parameters of the procedural car shape; all lengths in meters."""

    length: float
    width: float
    body_height: float
    cabin_frac: float  # cabin length as a fraction of body length
    cabin_height: float
    hood_drop: float
    rounding: float

    def __post_init__(self):
        for name, (lo, hi) in _CAR_RANGES.items():
            v = getattr(self, name)
            if not (lo - 1e-12 <= v <= hi + 1e-12):
                raise ParamOutOfRange(f"{name}={v} outside [{lo}, {hi}]")

    @property
    def total_height(self) -> float:
        return self.body_height + (self.cabin_height if self.cabin_frac > 0 else 0.0)


def _rounded_box(pts: np.ndarray, center, half, rounding: float) -> np.ndarray:
    """Conventional box SDF (negative inside), corners rounded by `rounding`."""
    q = np.abs(pts - np.asarray(center)) - (np.asarray(half) - rounding)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside - rounding


def _smooth_min(d1: np.ndarray, d2: np.ndarray, k: float) -> np.ndarray:
    if k <= 1e-9:
        return np.minimum(d1, d2)
    h = np.clip(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
    return d2 + (d1 - d2) * h - k * h * (1.0 - h)


def car_distance(params: CarParams, pts: np.ndarray) -> np.ndarray:
    """Signed distance (positive interior) of the car shape at (..., 3) points.

    The shape is a smooth union of rounded boxes: a main body, an optional
    lowered hood section at the front, and an optional cabin on top.
    Canonical frame: centered at the origin, heading +x, z up.
    """
    p = params
    L, W = p.length, p.width
    H = p.total_height
    z_bottom = -H / 2.0
    k = 0.5 * p.rounding

    if p.hood_drop > 1e-9:
        hood_len = 0.28 * L
        rear_half = np.array([(L - hood_len) / 2.0, W / 2.0, p.body_height / 2.0])
        rear_center = np.array([-hood_len / 2.0, 0.0, z_bottom + p.body_height / 2.0])
        hood_h = p.body_height - p.hood_drop
        hood_half = np.array([(hood_len + 0.2) / 2.0, W / 2.0, hood_h / 2.0])
        hood_center = np.array([(L - hood_len - 0.2) / 2.0, 0.0, z_bottom + hood_h / 2.0])
        r = min(p.rounding, 0.45 * hood_h)
        d = _smooth_min(
            _rounded_box(pts, rear_center, rear_half, r),
            _rounded_box(pts, hood_center, hood_half, r),
            k,
        )
    else:
        body_half = np.array([L / 2.0, W / 2.0, p.body_height / 2.0])
        body_center = np.array([0.0, 0.0, z_bottom + p.body_height / 2.0])
        d = _rounded_box(pts, body_center, body_half, min(p.rounding, 0.45 * p.body_height))

    if p.cabin_frac > 1e-9:
        cab_len = p.cabin_frac * L
        cab_half = np.array([cab_len / 2.0, 0.41 * W, (p.cabin_height + 0.1) / 2.0])
        cab_center = np.array(
            [-0.08 * L, 0.0, z_bottom + p.body_height + (p.cabin_height - 0.1) / 2.0]
        )
        r = min(p.rounding, 0.45 * min(cab_half))
        d = _smooth_min(d, _rounded_box(pts, cab_center, cab_half, r), k)

    return -d  # positive interior


def default_grid_geometry(dims=(64, 32, 32), voxel_size=0.1):
    """Centered origin for the given lattice."""
    dims = tuple(int(d) for d in dims)
    origin = -(np.array(dims, dtype=np.float64) - 1.0) / 2.0 * voxel_size
    return dims, float(voxel_size), origin


def make_car_sdf(params: CarParams, dims=(64, 32, 32), voxel_size: float = 0.1) -> SdfGrid:
    """Evaluate the analytic car field on a centered lattice."""
    dims, voxel_size, origin = default_grid_geometry(dims, voxel_size)
    half_extent = (np.array(dims) - 1.0) / 2.0 * voxel_size
    need = np.array([params.length / 2, params.width / 2, params.total_height / 2])
    if np.any(half_extent - need < 2.0 * voxel_size):
        raise ParamOutOfRange(
            f"grid cube {2*half_extent} too small for shape {2*need} (+2 voxel margin)"
        )
    tmp = SdfGrid(dims=dims, voxel_size=voxel_size, origin=origin, values=np.zeros(np.prod(dims)))
    pts = tmp.voxel_centers()
    tmp.values[:] = car_distance(params, pts)
    return tmp


def random_car_params(rng: np.random.Generator) -> CarParams:
    """Draw plausible car parameters (cabin always present)."""
    u = rng.uniform
    return CarParams(
        length=u(3.6, 5.1),
        width=u(1.62, 1.98),
        body_height=u(0.92, 1.28),
        cabin_frac=u(0.38, 0.60),
        cabin_height=u(0.32, 0.58),
        hood_drop=u(0.05, 0.33),
        rounding=u(0.03, 0.16),
    )


def procedural_bank(
    count: int = 79,
    dims=(64, 32, 32),
    voxel_size: float = 0.1,
    seed: int = 20240601,
) -> list[SdfGrid]:
    """Seeded bank of car SDF grids used to build the default shape prior."""
    rng = np.random.default_rng(seed)
    return [make_car_sdf(random_car_params(rng), dims, voxel_size) for _ in range(count)]


# --- interior extent helpers ---------------------------------------------------

def interior_bounds(grid: SdfGrid) -> np.ndarray:
    """(3, 2) min/max object-frame bounds of voxel centers with phi >= 0.

    Padded by half a voxel on each side. Raises ValueError on empty interior.
    """
    occ = grid.values3d >= 0.0
    if not occ.any():
        raise ValueError("empty interior")
    idx = np.nonzero(occ)
    lo = np.array([a.min() for a in idx], dtype=np.float64)
    hi = np.array([a.max() for a in idx], dtype=np.float64)
    lo = grid.origin + (lo - 0.5) * grid.voxel_size
    hi = grid.origin + (hi + 0.5) * grid.voxel_size
    return np.stack([lo, hi], axis=1)


def interior_z_extent(grid: SdfGrid) -> float:
    """Height of the interior region, from the occupancy scan."""
    b = interior_bounds(grid)
    return float(b[2, 1] - b[2, 0])


# --- mesh voxelization ----------------------------------------------------------

_PARITY_DIRS = np.array(
    [
        [0.8017837257372732, 0.5345224838248488, 0.2672612419124244],
        [-0.3015113445777636, 0.9045340337332909, 0.3015113445777636],
        [0.2672612419124244, -0.5345224838248488, 0.8017837257372732],
    ]
)


def _point_triangle_dist(pts: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Min distance from each of N points to each of T triangles -> (N, T)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    p = pts[:, None, :] - a[None, :, :]  # (N, T, 3)

    d1 = np.einsum("ntk,tk->nt", p, ab)
    d2 = np.einsum("ntk,tk->nt", p, ac)
    bp = pts[:, None, :] - b[None, :, :]
    d3 = np.einsum("ntk,tk->nt", bp, ab)
    d4 = np.einsum("ntk,tk->nt", bp, ac)
    cp = pts[:, None, :] - c[None, :, :]
    d5 = np.einsum("ntk,tk->nt", cp, ab)
    d6 = np.einsum("ntk,tk->nt", cp, ac)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    # interior as base case, then overwrite in reverse priority order so the
    # vertex regions win (standard closest-point-on-triangle region tests)
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom != 0, vb / np.where(denom != 0, denom, 1.0), 0.0)
        w = np.where(denom != 0, vc / np.where(denom != 0, denom, 1.0), 0.0)
        t_ab = np.where((d1 - d3) != 0, d1 / np.where((d1 - d3) != 0, d1 - d3, 1.0), 0.0)
        t_ac = np.where((d2 - d6) != 0, d2 / np.where((d2 - d6) != 0, d2 - d6, 1.0), 0.0)
        den_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(den_bc != 0, (d4 - d3) / np.where(den_bc != 0, den_bc, 1.0), 0.0)

    closest = a[None] + v[..., None] * ab[None] + w[..., None] * ac[None]
    cond_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(cond_bc[..., None], b[None] + t_bc[..., None] * (c - b)[None], closest)
    cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(cond_ac[..., None], a[None] + t_ac[..., None] * ac[None], closest)
    cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(cond_ab[..., None], a[None] + t_ab[..., None] * ab[None], closest)
    cond_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(cond_c[..., None], np.broadcast_to(c[None], closest.shape), closest)
    cond_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(cond_b[..., None], np.broadcast_to(b[None], closest.shape), closest)
    cond_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(cond_a[..., None], np.broadcast_to(a[None], closest.shape), closest)
    return np.linalg.norm(pts[:, None, :] - closest, axis=-1)


def _ray_parity(pts: np.ndarray, tri: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Crossing parity (1 = odd = inside) along +direction from each point."""
    eps = 1e-12
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = b - a
    e2 = c - a
    h = np.cross(direction[None, :], e2)  # (T, 3)
    det = np.einsum("tk,tk->t", e1, h)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)

    s = pts[:, None, :] - a[None, :, :]  # (N, T, 3)
    u = np.einsum("ntk,tk->nt", s, h) * inv[None, :]
    q = np.cross(s, e1[None, :, :])
    v = np.einsum("ntk,tk->nt", q, np.broadcast_to(direction, e1.shape)) * inv[None, :]
    t = np.einsum("ntk,tk->nt", q, e2) * inv[None, :]
    hit = ok[None, :] & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
    return (hit.sum(axis=1) % 2).astype(np.int8)


def mesh_to_sdf(
    triangles: np.ndarray,
    dims=(64, 32, 32),
    voxel_size: float = 0.1,
    origin=None,
    chunk: int = 2048,
) -> SdfGrid:
    """Voxelize a watertight triangle list into a signed distance grid.

    Magnitude is the min point-triangle distance per voxel center; sign comes
    from ray-crossing parity (positive inside), checked along three
    independent directions. Raises NonWatertightMesh if the directions
    disagree on more than 0.1% of voxels.
    """
    tri = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    if np.any(areas < 1e-14):
        raise ValueError("mesh contains degenerate triangles")

    dims, voxel_size, default_origin = default_grid_geometry(dims, voxel_size)
    if origin is None:
        origin = default_origin
    grid = SdfGrid(dims=dims, voxel_size=voxel_size, origin=origin, values=np.zeros(np.prod(dims)))
    pts = grid.voxel_centers()

    dist = np.empty(len(pts))
    parity = np.empty((3, len(pts)), dtype=np.int8)
    for s in range(0, len(pts), chunk):
        sl = slice(s, min(s + chunk, len(pts)))
        dist[sl] = _point_triangle_dist(pts[sl], tri).min(axis=1)
        for d in range(3):
            parity[d, sl] = _ray_parity(pts[sl], tri, _PARITY_DIRS[d])

    agree = (parity[0] == parity[1]) & (parity[1] == parity[2])
    frac_bad = 1.0 - float(agree.mean())
    if frac_bad > 1e-3:
        raise NonWatertightMesh(f"parity ambiguous on {frac_bad:.2%} of voxels")
    inside = (parity.sum(axis=0) >= 2)
    grid.values[:] = np.where(inside, dist, -dist)
    return grid


# --- binary serialization --------------------------------------------------------

def grid_meta_bytes(grid: SdfGrid) -> bytes:
    return struct.pack(
        "<3I f 3f",
        *grid.dims,
        np.float32(grid.voxel_size),
        *np.asarray(grid.origin, dtype=np.float32),
    )


def parse_grid_meta(buf: bytes, off: int):
    l, w, h, voxel, ox, oy, oz = struct.unpack_from("<3I f 3f", buf, off)
    return (l, w, h), float(np.float32(voxel)), np.array([ox, oy, oz], dtype=np.float64), off + struct.calcsize("<3I f 3f")


def save_grid(grid: SdfGrid, path) -> None:
    """Write the SLFG binary blob (little-endian, f32 payload)."""
    with open(path, "wb") as f:
        f.write(_SLFG_MAGIC)
        f.write(struct.pack("<H", _SLFG_VERSION))
        f.write(grid_meta_bytes(grid))
        f.write(grid.values.astype("<f4").tobytes())


def load_grid(path) -> SdfGrid:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != _SLFG_MAGIC:
        raise BadMagic(f"{path}: not an SLFG file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _SLFG_VERSION:
        raise VersionMismatch(f"{path}: SLFG version {version}")
    dims, voxel, origin, off = parse_grid_meta(buf, 6)
    n = dims[0] * dims[1] * dims[2]
    if len(buf) != off + 4 * n:
        raise BadMagic(f"{path}: truncated or oversized payload")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64)
    return SdfGrid(dims=dims, voxel_size=voxel, origin=origin, values=values)
