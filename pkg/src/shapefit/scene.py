"""Scene data model, frustum point extraction, and ground-plane RANSAC.

A scene directory contains scene.json (camera, file references, instances),
a raw little-endian f32 point cloud, an image, and per-instance masks (PNG
files or inline RLE).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadCalibration,
    DegenerateGround,
    MaskSizeMismatch,
    MissingFile,
    TooFewPoints,
)
from .geometry import Camera, project_points
from .render import Mask, mask_from_png_bytes, mask_to_png_bytes, rle_to_mask

N_MIN_POINTS = 5
GROUND_EPS = 0.05  # m, points this close to the ground are dropped from frustums


@dataclass
class Instance:
    id: int
    mask: Mask | None
    prompt: dict | None = None  # {"points": [[u, v], ...]} or {"box": [u1, v1, u2, v2]}


@dataclass
class Scene:
    camera: Camera
    points: np.ndarray  # (N, 3) world frame
    instances: list[Instance]
    image_path: str | None = None
    scene_dir: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        ids = [inst.id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate instance ids: {ids}")
        for inst in self.instances:
            if inst.mask is not None and inst.mask.values.shape != (
                self.camera.height,
                self.camera.width,
            ):
                raise MaskSizeMismatch(
                    f"instance {inst.id}: mask {inst.mask.values.shape} != camera "
                    f"({self.camera.height}, {self.camera.width})"
                )


@dataclass
class FrustumCloud:
    instance_id: int
    points: np.ndarray  # (N_f, 3)
    depths: np.ndarray  # (N_f,) camera-frame depths

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class GroundPlane:
    """z = a*x + b*y + c with inlier bookkeeping."""

    a: float
    b: float
    c: float
    inlier_count: int = 0
    threshold: float = GROUND_EPS

    def height(self, x, y):
        return self.a * np.asarray(x) + self.b * np.asarray(y) + self.c

    def coefficients(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=np.float64)


# --- scene i/o -------------------------------------------------------------------


def load_scene(directory) -> Scene:
    directory = Path(directory)
    meta_path = directory / "scene.json"
    if not meta_path.exists():
        raise MissingFile(str(meta_path))
    meta = json.loads(meta_path.read_text())

    cam_block = meta.get("camera")
    if cam_block is None:
        raise BadCalibration("scene.json missing camera block")
    try:
        camera = Camera(
            intrinsics=np.array(cam_block["K"], dtype=np.float64).reshape(3, 3),
            world_to_camera=np.array(cam_block["T_wc"], dtype=np.float64).reshape(4, 4),
            width=int(cam_block["width"]),
            height=int(cam_block["height"]),
        )
    except (KeyError, ValueError) as exc:
        raise BadCalibration(f"bad camera block: {exc}") from exc

    pts_name = meta.get("points")
    points = np.zeros((0, 3))
    if pts_name:
        pts_path = directory / pts_name
        if not pts_path.exists():
            raise MissingFile(str(pts_path))
        raw = np.frombuffer(pts_path.read_bytes(), dtype="<f4")
        if raw.size % 3:
            raise ValueError(f"{pts_path}: length {raw.size} not divisible by 3")
        points = raw.reshape(-1, 3).astype(np.float64)

    instances = []
    for block in meta.get("instances", []):
        mask = None
        mref = block.get("mask")
        if isinstance(mref, str):
            mpath = directory / mref
            if not mpath.exists():
                raise MissingFile(str(mpath))
            mask = mask_from_png_bytes(mpath.read_bytes())
        elif isinstance(mref, dict):
            mask = rle_to_mask(mref["rle"] if "rle" in mref else mref)
        instances.append(Instance(id=int(block["id"]), mask=mask, prompt=block.get("prompt")))

    img = meta.get("image")
    if img and not (directory / img).exists():
        raise MissingFile(str(directory / img))
    return Scene(
        camera=camera,
        points=points,
        instances=instances,
        image_path=str(directory / img) if img else None,
        scene_dir=str(directory),
    )


def save_scene(scene: Scene, directory, image_bytes: bytes | None = None) -> None:
    """Write the scene directory format (masks as PNGs)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "camera": {
            "K": [float(v) for v in scene.camera.intrinsics.reshape(-1)],
            "T_wc": [float(v) for v in scene.camera.world_to_camera.reshape(-1)],
            "width": scene.camera.width,
            "height": scene.camera.height,
        },
        "image": "img.png",
        "points": "points.f32le",
        "instances": [],
    }
    (directory / "points.f32le").write_bytes(
        scene.points.astype("<f4").tobytes()
    )
    for inst in scene.instances:
        block: dict = {"id": inst.id}
        if inst.mask is not None:
            name = f"m_{inst.id}.png"
            (directory / name).write_bytes(mask_to_png_bytes(inst.mask))
            block["mask"] = name
        if inst.prompt is not None:
            block["prompt"] = inst.prompt
        meta["instances"].append(block)
    if image_bytes is None:
        from PIL import Image
        import io

        img = Image.new("L", (scene.camera.width, scene.camera.height), 0)
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        image_bytes = buf.getvalue()
    (directory / "img.png").write_bytes(image_bytes)
    (directory / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


# --- frustum extraction -------------------------------------------------------------


def frustum_points(
    scene: Scene,
    instance: Instance,
    ground: GroundPlane | None = None,
    n_min: int = N_MIN_POINTS,
) -> FrustumCloud:
    """LiDAR points projecting onto the instance's foreground pixels.

    Keeps points with positive camera depth whose projection lands on a
    mask pixel >= 0.5, excluding points within GROUND_EPS of the fitted
    ground plane. Raises TooFewPoints below n_min.
    """
    if instance.mask is None:
        raise ValueError(f"instance {instance.id} has no mask")
    if len(scene.points) == 0:
        raise TooFewPoints(f"instance {instance.id}: scene has no points")
    uv, depth = project_points(scene.camera, scene.points)
    ok = depth > 1e-9
    uv_safe = np.where(np.isfinite(uv), uv, -1.0)
    cols = np.round(uv_safe[:, 0]).astype(np.int64)
    rows = np.round(uv_safe[:, 1]).astype(np.int64)
    ok &= (cols >= 0) & (cols < scene.camera.width) & (rows >= 0) & (rows < scene.camera.height)
    fg = instance.mask.binary()
    sel = ok.copy()
    sel[ok] = fg[rows[ok], cols[ok]]
    if ground is not None:
        dist = np.abs(scene.points[:, 2] - ground.height(scene.points[:, 0], scene.points[:, 1]))
        sel &= dist > GROUND_EPS
    pts = scene.points[sel]
    cloud = FrustumCloud(instance_id=instance.id, points=pts, depths=depth[sel])
    if cloud.count < n_min:
        raise TooFewPoints(f"instance {instance.id}: {cloud.count} frustum points < {n_min}")
    return cloud


# --- ground plane ---------------------------------------------------------------------


def ground_candidates(scene: Scene, margin: float = 0.5) -> np.ndarray:
    """Points below the camera height minus margin: RANSAC candidates."""
    zmax = float(scene.camera.center[2]) - margin
    return scene.points[scene.points[:, 2] < zmax]


def fit_ground_ransac(
    points: np.ndarray,
    iterations: int = 512,
    threshold: float = GROUND_EPS,
    seed: int = 0,
    max_slope: float = np.tan(np.radians(30.0)),
) -> GroundPlane:
    """RANSAC fit of z = a*x + b*y + c, least-squares refined on inliers.

    Deterministic for a fixed seed: candidate triples are drawn from the
    index-sorted point array. Hypotheses steeper than max_slope are skipped.
    Raises DegenerateGround when the best inlier fraction is below 10%.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 3:
        raise DegenerateGround(f"need >= 3 candidate points, got {n}")
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    pts = pts[order]

    rng = np.random.default_rng(seed)
    best_inliers = -1
    best_coef: np.ndarray | None = None
    A_full = np.column_stack([pts[:, 0], pts[:, 1], np.ones(n)])
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        tri = pts[idx]
        A = np.column_stack([tri[:, 0], tri[:, 1], np.ones(3)])
        if abs(np.linalg.det(A)) < 1e-12:
            continue  # collinear in the x-y projection
        coef = np.linalg.solve(A, tri[:, 2])
        if np.hypot(coef[0], coef[1]) >= max_slope:
            continue
        resid = np.abs(A_full @ coef - pts[:, 2])
        inliers = int((resid <= threshold).sum())
        if inliers > best_inliers:
            best_inliers = inliers
            best_coef = coef
    if best_coef is None or best_inliers < max(3, 0.10 * n):
        raise DegenerateGround(
            f"best hypothesis has {max(best_inliers, 0)}/{n} inliers"
        )
    # least-squares refinement on the inlier set
    resid = np.abs(A_full @ best_coef - pts[:, 2])
    mask = resid <= threshold
    coef, *_ = np.linalg.lstsq(A_full[mask], pts[mask, 2], rcond=None)
    if np.hypot(coef[0], coef[1]) >= max_slope:
        coef = best_coef
    resid = np.abs(A_full @ coef - pts[:, 2])
    inl = int((resid <= threshold).sum())
    return GroundPlane(
        a=float(coef[0]), b=float(coef[1]), c=float(coef[2]),
        inlier_count=inl, threshold=threshold,
    )


def scene_ground(scene: Scene, seed: int = 0) -> GroundPlane:
    """Ground plane of a scene from height-filtered candidates."""
    return fit_ground_ransac(ground_candidates(scene), seed=seed)
