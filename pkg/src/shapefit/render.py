"""Silhouette rendering and occlusion maps.

Two renderers share one geometry: a differentiable soft renderer (sigmoid
product along rays, torch-backed) and a hard marching oracle used for tests
and synthetic ground truth. Masks serialize as 8-bit PNG or column-major RLE.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from . import _engine
from .errors import DegenerateCube, SizeMismatch
from .geometry import Camera, Pose, project_points, rays_through_pixels
from .prior import ShapePrior
from .sdf import SdfGrid


@dataclass
class Mask:
    """Image-plane coverage in [0, 1], row-major (h, w)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("mask must be 2-D")
        if self.values.size and (self.values.min() < -1e-9 or self.values.max() > 1 + 1e-9):
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold

    def area(self, threshold: float = 0.5) -> int:
        return int(self.binary(threshold).sum())


@dataclass
class OcclusionMap:
    """Per-instance visibility: 1 = visible to the instance, 0 = occluded."""

    values: np.ndarray  # (h, w) in {0, 1}
    depth: float
    depth_missing: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class RenderConfig:
    zeta: float = 40.0  # 1/m, hardness of the sigmoid transition
    samples_per_ray: int = 32
    pixel_stride: int = 2
    near: float = 0.5
    far: float = 80.0

    def __post_init__(self):
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if self.samples_per_ray < 8:
            raise ValueError("samples_per_ray must be >= 8")
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")
        if not self.near < self.far:
            raise ValueError("near must be < far")


# --- windows and ray bundles ----------------------------------------------------


def posed_cube_window(grid_like, p: Pose, cam: Camera, pad_frac: float = 0.25):
    """Image-plane bbox (r0, c0, h, w) of the posed support cube, or None.

    Returns None when no part of the projected cube overlaps the image.
    Raises DegenerateCube via ValueError sentinel when the cube is entirely
    behind the camera (callers decide whether that is an error).
    """
    mn = np.asarray(grid_like.support_min, dtype=np.float64)
    mx = np.asarray(grid_like.support_max, dtype=np.float64)
    corners_local = np.array(
        [[x, y, z] for x in (mn[0], mx[0]) for y in (mn[1], mx[1]) for z in (mn[2], mx[2])]
    )
    c, s = math.cos(p.theta), math.sin(p.theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    corners = corners_local @ R.T + p.center
    uv, depth = project_points(cam, corners)
    front = depth > 1e-9
    if not front.any():
        return "behind"
    uv = uv[front]
    if not front.all():
        # partially behind: be conservative, use the whole image
        u_lo, v_lo, u_hi, v_hi = 0.0, 0.0, cam.width - 1.0, cam.height - 1.0
    else:
        u_lo, v_lo = uv.min(axis=0)
        u_hi, v_hi = uv.max(axis=0)
    du = (u_hi - u_lo + 1.0) * pad_frac / 2.0
    dv = (v_hi - v_lo + 1.0) * pad_frac / 2.0
    c0 = int(np.floor(u_lo - du))
    c1 = int(np.ceil(u_hi + du))
    r0 = int(np.floor(v_lo - dv))
    r1 = int(np.ceil(v_hi + dv))
    c0 = max(c0, 0)
    r0 = max(r0, 0)
    c1 = min(c1, cam.width - 1)
    r1 = min(r1, cam.height - 1)
    if c1 < c0 or r1 < r0:
        return None
    return (r0, c0, r1 - r0 + 1, c1 - c0 + 1)


def mask_window(mask: Mask, cam: Camera, pad_frac: float = 0.25):
    """Bbox of the binarized mask dilated by pad_frac, clipped to the image."""
    fg = mask.binary()
    if not fg.any():
        return None
    rows = np.nonzero(fg.any(axis=1))[0]
    cols = np.nonzero(fg.any(axis=0))[0]
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    dr = int(np.ceil((r1 - r0 + 1) * pad_frac / 2.0))
    dc = int(np.ceil((c1 - c0 + 1) * pad_frac / 2.0))
    r0 = max(r0 - dr, 0)
    c0 = max(c0 - dc, 0)
    r1 = min(r1 + dr, cam.height - 1)
    c1 = min(c1 + dc, cam.width - 1)
    return (r0, c0, r1 - r0 + 1, c1 - c0 + 1)


def strided_ray_bundle(cam: Camera, window, stride: int, dtype=torch.float64):
    """Rays through the strided lattice covering the window, plus the bilinear
    gather (indices and weights) mapping strided values to window pixels."""
    r0, c0, wh, ww = window
    nr = int(np.ceil((wh - 1) / stride)) + 1 if wh > 1 else 2
    nc = int(np.ceil((ww - 1) / stride)) + 1 if ww > 1 else 2
    rows = r0 + np.arange(nr) * stride
    cols = c0 + np.arange(nc) * stride
    uu, vv = np.meshgrid(cols.astype(np.float64), rows.astype(np.float64))
    uv = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    origin, dirs = rays_through_pixels(cam, uv)

    # bilinear upsample: window pixel (r, c) -> strided lattice coordinates
    rr, cc = np.meshgrid(np.arange(wh), np.arange(ww), indexing="ij")
    gr = rr.reshape(-1) / stride
    gc_ = cc.reshape(-1) / stride
    r_lo = np.minimum(gr.astype(np.int64), nr - 2)
    c_lo = np.minimum(gc_.astype(np.int64), nc - 2)
    fr = gr - r_lo
    fc = gc_ - c_lo
    i00 = r_lo * nc + c_lo
    i01 = r_lo * nc + c_lo + 1
    i10 = (r_lo + 1) * nc + c_lo
    i11 = (r_lo + 1) * nc + c_lo + 1
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    up_idx = torch.from_numpy(np.stack([i00, i01, i10, i11]))
    up_w = torch.from_numpy(np.stack([w00, w01, w10, w11])).to(dtype)
    ray_o = torch.from_numpy(np.broadcast_to(origin, dirs.shape).copy()).to(dtype)
    ray_d = torch.from_numpy(dirs).to(dtype)
    return ray_o, ray_d, up_idx, up_w


def soft_silhouette(
    prior: ShapePrior,
    s: np.ndarray,
    p: Pose,
    cam: Camera,
    cfg: RenderConfig | None = None,
    strict: bool = False,
) -> Mask:
    """Differentiable soft silhouette evaluated on the full image frame.

    Pixels are rendered on a strided lattice inside the projected-cube window
    and bilinearly upsampled; everything outside is exactly 0. With
    strict=True a cube entirely behind the camera raises DegenerateCube,
    otherwise it yields the all-zero mask.
    """
    cfg = cfg or RenderConfig()
    pt = _engine.prior_tensors(prior)
    window = posed_cube_window(pt, p, cam)
    out = np.zeros((cam.height, cam.width))
    if window == "behind":
        if strict:
            raise DegenerateCube("posed cube entirely behind the camera")
        return Mask(out)
    if window is None:
        return Mask(out)

    ray_o, ray_d, up_idx, up_w = strided_ray_bundle(cam, window, cfg.pixel_stride)
    params = torch.from_numpy(
        np.concatenate([p.as_array(), np.asarray(s, dtype=np.float64).reshape(-1)])
    ).unsqueeze(0)
    values = _engine.decode_values(pt, params[:, 4:])
    seg = torch.zeros(ray_o.shape[0], dtype=torch.long)
    strided = _engine.soft_mask_values(
        values, pt, params[:, :4], ray_o, ray_d, seg,
        cfg.zeta, cfg.samples_per_ray, cfg.near, cfg.far,
    )
    up = (
        up_w[0] * strided[up_idx[0]]
        + up_w[1] * strided[up_idx[1]]
        + up_w[2] * strided[up_idx[2]]
        + up_w[3] * strided[up_idx[3]]
    )
    r0, c0, wh, ww = window
    out[r0 : r0 + wh, c0 : c0 + ww] = up.detach().numpy().reshape(wh, ww)
    return Mask(np.clip(out, 0.0, 1.0))


# --- hard oracle ------------------------------------------------------------------


def hard_silhouette(
    grid: SdfGrid,
    p: Pose,
    cam: Camera,
    step: float | None = None,
    near: float = 0.5,
    far: float = 120.0,
) -> Mask:
    """Binary silhouette by fine ray marching (non-differentiable oracle)."""
    hit, _ = hard_hit_depths(grid, p, cam, step=step, near=near, far=far)
    return Mask(hit.astype(np.float64))


def hard_hit_depths(
    grid: SdfGrid,
    p: Pose,
    cam: Camera,
    step: float | None = None,
    near: float = 0.5,
    far: float = 120.0,
):
    """(hit (h,w) bool, depth (h,w) camera-frame meters, inf where no hit)."""
    step = step or grid.voxel_size / 3.0
    out_hit = np.zeros((cam.height, cam.width), dtype=bool)
    out_depth = np.full((cam.height, cam.width), np.inf)
    window = posed_cube_window(grid, p, cam, pad_frac=0.0)
    if window in ("behind", None):
        return out_hit, out_depth
    r0, c0, wh, ww = window
    rr, cc = np.meshgrid(np.arange(r0, r0 + wh), np.arange(c0, c0 + ww), indexing="ij")
    uv = np.stack([cc.reshape(-1).astype(np.float64), rr.reshape(-1).astype(np.float64)], 1)
    origin, dirs = rays_through_pixels(cam, uv)

    c, s = math.cos(p.theta), math.sin(p.theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o_obj = (origin - p.center) @ R  # (3,), shared by every pixel ray
    d_obj = dirs @ R

    mn, mx = grid.support_min, grid.support_max
    with np.errstate(divide="ignore"):
        inv = 1.0 / np.where(np.abs(d_obj) > 1e-12, d_obj, 1e-12)
    t_a = (mn - o_obj) * inv
    t_b = (mx - o_obj) * inv
    t0 = np.maximum(np.minimum(t_a, t_b).max(axis=1), near)
    t1 = np.minimum(np.maximum(t_a, t_b).min(axis=1), far)
    alive = t1 > t0
    if not alive.any():
        return out_hit, out_depth

    from .sdf import sample as sdf_sample

    n_steps = int(np.ceil((t1[alive] - t0[alive]).max() / step)) + 1
    t0a, t1a = t0[alive], t1[alive]
    da = d_obj[alive]
    hit_t = np.full(len(t0a), np.inf)
    found = np.zeros(len(t0a), dtype=bool)
    for i in range(n_steps):
        t = t0a + i * step
        live = (~found) & (t <= t1a)
        if not live.any():
            break
        pts = o_obj + t[live, None] * da[live]
        phi = sdf_sample(grid, pts)
        pos = phi >= 0.0
        if pos.any():
            idx = np.nonzero(live)[0][pos]
            found[idx] = True
            hit_t[idx] = t[idx]

    # camera-frame depth of hit points
    full_hit = np.zeros(len(uv), dtype=bool)
    full_hit[alive] = found
    depth = np.full(len(uv), np.inf)
    if found.any():
        world_pts = (o_obj + hit_t[found, None] * da[found]) @ R.T + p.center
        dcam = (world_pts @ cam.rotation.T + cam.translation)[:, 2]
        tmp = np.full(alive.sum(), np.inf)
        tmp[found] = dcam
        depth[alive] = tmp
    out_hit[r0 : r0 + wh, c0 : c0 + ww] = full_hit.reshape(wh, ww)
    out_depth[r0 : r0 + wh, c0 : c0 + ww] = depth.reshape(wh, ww)
    return out_hit, out_depth


# --- occlusion maps ---------------------------------------------------------------


def occlusion_maps(instances: list[tuple[Mask, np.ndarray]]) -> list[OcclusionMap]:
    """Per-instance visibility maps from median LiDAR depths.

    instances: list of (mask, associated point depths). Instances are sorted
    by median depth ascending (ties: lower index nearer); each loses the
    pixels covered by strictly nearer instances' binarized masks. Instances
    with no depths are treated as farthest and flagged.
    """
    if not instances:
        return []
    h, w = instances[0][0].values.shape
    entries = []
    for i, (mask, depths) in enumerate(instances):
        if mask.values.shape != (h, w):
            raise SizeMismatch("all masks must share dimensions")
        depths = np.asarray(depths, dtype=np.float64).reshape(-1)
        if depths.size == 0:
            entries.append((np.inf, i, True))
        else:
            entries.append((float(np.median(depths)), i, False))

    order = sorted(range(len(entries)), key=lambda i: (entries[i][0], entries[i][1]))
    covered = np.zeros((h, w), dtype=bool)
    result: list[OcclusionMap | None] = [None] * len(entries)
    for rank in order:
        depth, idx, missing = entries[rank]
        vis = (~covered).astype(np.float64)
        result[idx] = OcclusionMap(values=vis, depth=depth, depth_missing=missing)
        covered |= instances[idx][0].binary()
    return result  # type: ignore[return-value]


# --- serialization ----------------------------------------------------------------


def mask_to_png_bytes(mask: Mask) -> bytes:
    arr = np.round(mask.values * 255.0).astype(np.uint8)
    img = Image.fromarray(arr, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def mask_from_png_bytes(data: bytes) -> Mask:
    img = Image.open(io.BytesIO(data))
    arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return Mask(arr)


def mask_to_rle(mask: Mask, threshold: float = 0.5) -> dict:
    """Column-major binary RLE; counts alternate runs of 0s then 1s."""
    b = mask.binary(threshold)
    flat = b.reshape(-1, order="F").astype(np.int8)
    if flat.size == 0:
        return {"size": [mask.height, mask.width], "counts": []}
    change = np.nonzero(np.diff(flat))[0]
    starts = np.concatenate([[0], change + 1])
    ends = np.concatenate([change + 1, [flat.size]])
    counts = (ends - starts).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [mask.height, mask.width], "counts": counts}


def rle_to_mask(rle: dict) -> Mask:
    h, w = int(rle["size"][0]), int(rle["size"][1])
    flat = np.zeros(h * w, dtype=np.float64)
    pos = 0
    val = 0.0
    for count in rle["counts"]:
        count = int(count)
        if val > 0.5:
            flat[pos : pos + count] = 1.0
        pos += count
        val = 1.0 - val
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return Mask(flat.reshape((h, w), order="F"))
