"""Seeded synthetic scenes with ground-truth labels.

Scenes are placed on a (possibly tilted) ground plane, masked by the hard
renderer with nearest-depth occlusion compositing, and scanned by a simple
multi-ring LiDAR model. Everything is driven by one numpy Generator in a
fixed draw order, so a config (including its seed) maps to a byte-identical
scene directory; beam downsampling keeps every k-th ring of the same 64-ring
table and therefore yields point subsets of the 64-beam scene.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import PlacementFailure
from .fit import extract_box
from .geometry import Pose, make_camera
from .prior import ShapePrior, decode
from .render import Mask, hard_hit_depths
from .scene import GroundPlane, Instance, Scene, save_scene
from .sdf import SdfGrid, interior_bounds, sample as sdf_sample

RING_TABLE_SIZE = 64
SUPPORTED_BEAMS = (64, 32, 16, 8)


@dataclass
class LidarModel:
    beams: int = 64
    azimuth_steps: int = 900
    elev_lo_deg: float = -25.0
    elev_hi_deg: float = 3.0
    sigma_r: float = 0.02
    origin: tuple = (0.0, 0.0, 1.73)
    max_range: float = 80.0

    def __post_init__(self):
        if self.beams not in SUPPORTED_BEAMS:
            raise ValueError(f"beams must be one of {SUPPORTED_BEAMS}")
        if self.sigma_r < 0:
            raise ValueError("sigma_r must be >= 0")


@dataclass
class SynthConfig:
    seed: int = 0
    n_instances: tuple = (1, 5)
    x_range: tuple = (8.0, 38.0)
    yaw_range: tuple = (-math.pi, math.pi)
    code_scale: float = 2.0  # codes drawn uniformly within +-scale * sigma_k
    lidar: LidarModel = field(default_factory=LidarModel)
    cam_height: float = 1.6
    cam_pitch: float = 0.045
    image_size: tuple = (960, 540)
    focal: float = 540.0
    ground_tilt: float = 0.02  # |a|, |b| upper bound
    ground_offset: float = 0.05  # |c| upper bound
    prompt_points: int = 3

    def __post_init__(self):
        if self.n_instances[0] < 0 or self.n_instances[1] < self.n_instances[0]:
            raise ValueError("bad instance count range")
        if self.x_range[1] <= self.x_range[0]:
            raise ValueError("x_range empty")


def _ring_elevations() -> np.ndarray:
    return np.radians(np.linspace(-25.0, 3.0, RING_TABLE_SIZE))


def march_first_hit(grid: SdfGrid, p: Pose, origins, dirs, near=0.1, far=120.0, step=None):
    """First phi>=0 crossing along each ray; returns (hit, t) in world units."""
    step = step or grid.voxel_size / 3.0
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(p.theta), math.sin(p.theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = (origins - p.center) @ R
    d = dirs @ R
    with np.errstate(divide="ignore"):
        inv = 1.0 / np.where(np.abs(d) > 1e-12, d, 1e-12)
    t_a = (grid.support_min - o) * inv
    t_b = (grid.support_max - o) * inv
    t0 = np.maximum(np.minimum(t_a, t_b).max(axis=1), near)
    t1 = np.minimum(np.maximum(t_a, t_b).min(axis=1), far)
    hit = np.zeros(len(o), dtype=bool)
    t_hit = np.full(len(o), np.inf)
    alive = t1 > t0
    if not alive.any():
        return hit, t_hit
    idx = np.nonzero(alive)[0]
    oa, da, t0a, t1a = o[idx], d[idx], t0[idx], t1[idx]
    n_steps = int(np.ceil((t1a - t0a).max() / step)) + 1
    prev_phi = np.full(len(idx), -1.0)
    prev_t = t0a.copy()
    done = np.zeros(len(idx), dtype=bool)
    tt = np.full(len(idx), np.inf)
    for i in range(n_steps + 1):
        t = np.minimum(t0a + i * step, t1a)
        live = ~done & (prev_t < t1a - 1e-12) if i else ~done
        if not live.any():
            break
        pts = oa[live] + t[live, None] * da[live]
        phi = sdf_sample(grid, pts)
        pos = phi >= 0.0
        if pos.any():
            li = np.nonzero(live)[0][pos]
            # linear refinement between the bracketing samples
            denom = phi[pos] - prev_phi[li]
            safe = np.where(np.abs(denom) > 1e-15, denom, 1.0)
            alpha = np.where(np.abs(denom) > 1e-15, -prev_phi[li] / safe, 0.0)
            tt[li] = prev_t[li] + np.clip(alpha, 0.0, 1.0) * (t[li] - prev_t[li])
            done[li] = True
        li_all = np.nonzero(live)[0]
        prev_phi[li_all] = phi
        prev_t[li_all] = t[live]
    hit[idx] = done
    t_hit[idx] = tt
    return hit, t_hit


def simulate_lidar(
    grids: list[SdfGrid],
    poses: list[Pose],
    ground: GroundPlane,
    lidar: LidarModel,
    rng: np.random.Generator,
):
    """Scan the scene; returns (points (N,3), source (N,) int, -1 = ground).

    The full 64-ring noise matrix is always drawn so that configurations
    differing only in `beams` share the same per-ray noise.
    """
    elev = _ring_elevations()
    ring_step = RING_TABLE_SIZE // lidar.beams
    rings = np.arange(0, RING_TABLE_SIZE, ring_step)
    hfov = 2.0 * math.atan((0.5 * 960) / 540.0)
    az = np.linspace(-hfov / 2.0, hfov / 2.0, lidar.azimuth_steps)

    noise_all = rng.normal(0.0, lidar.sigma_r, size=(RING_TABLE_SIZE, lidar.azimuth_steps))

    ee, aa = np.meshgrid(elev[rings], az, indexing="ij")
    dirs = np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
    ).reshape(-1, 3)
    noise = noise_all[rings, :].reshape(-1)
    origin = np.asarray(lidar.origin, dtype=np.float64)
    n_rays = len(dirs)

    best_t = np.full(n_rays, np.inf)
    source = np.full(n_rays, -2, dtype=np.int64)  # -2 = miss

    # ground plane hit
    denom = dirs[:, 2] - ground.a * dirs[:, 0] - ground.b * dirs[:, 1]
    num = ground.a * origin[0] + ground.b * origin[1] + ground.c - origin[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_g = num / np.where(np.abs(denom) > 1e-12, denom, np.nan)
    ok = np.isfinite(t_g) & (t_g > 0.1) & (t_g <= lidar.max_range)
    best_t[ok] = t_g[ok]
    source[ok] = -1

    origins = np.broadcast_to(origin, dirs.shape)
    for i, (grid, pose) in enumerate(zip(grids, poses)):
        hit, t = march_first_hit(grid, pose, origins, dirs, near=0.1, far=lidar.max_range)
        better = hit & (t < best_t)
        best_t[better] = t[better]
        source[better] = i

    got = source > -2
    t_final = best_t[got] + noise[got]
    points = origin + t_final[:, None] * dirs[got]
    return points.astype(np.float64), source[got]



def corrupt_mask(mask: Mask, op: str, kernel: int) -> Mask:
    """Square-kernel binary morphology (erode|dilate, kernel 5 or 9)."""
    if op not in ("erode", "dilate"):
        raise ValueError(f"op must be erode|dilate, got {op}")
    if kernel not in (5, 9):
        raise ValueError("kernel must be 5 or 9")
    b = mask.binary()
    k = np.ones((kernel, kernel), dtype=bool)
    if op == "erode":
        out = ndimage.binary_erosion(b, structure=k, border_value=0)
    else:
        out = ndimage.binary_dilation(b, structure=k, border_value=0)
    return Mask(out.astype(np.float64))


def _scene_image(masks: list[np.ndarray], width: int, height: int) -> bytes:
    """Flat display-only render: gray gradient ground + per-instance levels."""
    img = np.tile(np.linspace(40, 90, height, dtype=np.float64)[:, None], (1, width))
    for i, m in enumerate(masks):
        img[m] = 140 + (i * 23) % 100
    pil = Image.fromarray(img.astype(np.uint8), mode="L")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def gen_scene(cfg: SynthConfig, prior: ShapePrior, out_dir=None):
    """Generate one scene; returns (Scene, gt dict, meta dict).

    When out_dir is given the scene directory, gt.json, and synth_meta.json
    are written there.
    """
    rng = np.random.default_rng(cfg.seed)
    width, height = cfg.image_size
    cam = make_camera(
        (0.0, 0.0, cfg.cam_height),
        pitch=cfg.cam_pitch,
        fx=cfg.focal,
        fy=cfg.focal,
        width=width,
        height=height,
    )
    ground = GroundPlane(
        a=float(rng.uniform(-cfg.ground_tilt, cfg.ground_tilt)),
        b=float(rng.uniform(-cfg.ground_tilt, cfg.ground_tilt)),
        c=float(rng.uniform(-cfg.ground_offset, cfg.ground_offset)),
    )
    n = int(rng.integers(cfg.n_instances[0], cfg.n_instances[1] + 1))
    hfov = 2.0 * math.atan((width / 2.0) / cfg.focal)

    codes, poses, grids, boxes = [], [], [], []
    for i in range(n):
        placed = False
        for _ in range(100):
            s = rng.uniform(-cfg.code_scale, cfg.code_scale, size=prior.d) * prior.sigma
            x = float(rng.uniform(*cfg.x_range))
            y_lim = 0.7 * x * math.tan(hfov / 2.0)
            y = float(rng.uniform(-y_lim, y_lim))
            theta = float(rng.uniform(*cfg.yaw_range))
            grid = decode(prior, s)
            if not (grid.values3d >= 0.0).any():
                continue
            # bottom of the interior, to sit the shape exactly on the plane
            b = interior_bounds(grid)
            z = float(ground.height(x, y)) - float(b[2, 0])
            pose = Pose(x, y, z, theta)
            box = extract_box(prior, s, pose)
            # conservative BEV separation test against accepted instances
            diag = float(np.hypot(box["dims"][0], box["dims"][1]))
            ok = True
            for bx in boxes:
                od = float(np.hypot(bx["dims"][0], bx["dims"][1]))
                dist = float(np.hypot(box["center"][0] - bx["center"][0],
                                      box["center"][1] - bx["center"][1]))
                if dist < (diag + od) / 2.0:
                    ok = False
                    break
            if ok:
                codes.append(s)
                poses.append(pose)
                grids.append(grid)
                boxes.append(box)
                placed = True
                break
        if not placed:
            raise PlacementFailure(f"could not place instance {i} after 100 attempts")

    # ground-truth masks: nearest-hit compositing of the hard renderer
    hits, depths = [], []
    for grid, pose in zip(grids, poses):
        h, dep = hard_hit_depths(grid, pose, cam)
        hits.append(h)
        depths.append(dep)
    if n:
        depth_stack = np.stack(depths)  # (n, h, w)
        nearest = depth_stack.min(axis=0)
    visible_masks, visibility = [], []
    for i in range(n):
        solo = hits[i]
        vis = solo & (depths[i] <= nearest + 1e-9)
        visible_masks.append(vis)
        visibility.append(float(vis.sum() / solo.sum()) if solo.sum() else 0.0)

    points, source = simulate_lidar(grids, poses, ground, cfg.lidar, rng)

    instances = []
    prompts = []
    for i in range(n):
        fg = np.nonzero(visible_masks[i])
        if len(fg[0]) and cfg.prompt_points > 0:
            pick = rng.integers(0, len(fg[0]), size=cfg.prompt_points)
            pts = [[int(fg[1][j]), int(fg[0][j])] for j in pick]
            prompt = {"points": pts}
        else:
            prompt = None
        prompts.append(prompt)
        instances.append(
            Instance(id=i, mask=Mask(visible_masks[i].astype(np.float64)), prompt=prompt)
        )

    scene = Scene(camera=cam, points=points, instances=instances)
    gt = {
        "instances": [
            {
                "id": i,
                "center": [float(v) for v in boxes[i]["center"]],
                "dims": [float(v) for v in boxes[i]["dims"]],
                "yaw": float(boxes[i]["yaw"]),
                "shape_code": [float(v) for v in codes[i]],
            }
            for i in range(n)
        ]
    }
    meta = {
        "seed": cfg.seed,
        "beams": cfg.lidar.beams,
        "sigma_r": cfg.lidar.sigma_r,
        "instances": [
            {
                "id": i,
                "visibility": visibility[i],
                "lidar_points": int((source == i).sum()),
                "pose": [poses[i].x, poses[i].y, poses[i].z, poses[i].theta],
            }
            for i in range(n)
        ],
        "_point_source": source,  # in-memory only, stripped from the json
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        save_scene(scene, out_dir, image_bytes=_scene_image(visible_masks, width, height))
        (out_dir / "gt.json").write_text(json.dumps(gt, indent=1, sort_keys=True))
        public = {k: v for k, v in meta.items() if not k.startswith("_")}
        (out_dir / "synth_meta.json").write_text(json.dumps(public, indent=1, sort_keys=True))
    return scene, gt, meta


def gen_suite(base_seed: int, n_scenes: int, cfg: SynthConfig, prior: ShapePrior, out_root):
    """Write n_scenes scene directories scene_0000..; returns their paths."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_scenes):
        scfg = replace(cfg, seed=base_seed + i)
        p = out_root / f"scene_{i:04d}"
        gen_scene(scfg, prior, out_dir=p)
        paths.append(p)
    return paths
