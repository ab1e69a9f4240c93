"""Scene fitting: seed initialization, batched Adam over (pose, shape), and
extraction of boxes, occupancy grids, and confidences from the optimum.

All instances of a scene advance jointly (one Adam step per iteration over a
(B, 4+d) parameter tensor). Per-instance reductions in the engine are
computed over contiguous slices, so a batch of one reproduces the batched
trajectory exactly; `batched=False` exists for benchmarking that equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import _engine
from .energy import EnergyWeights, Observations, build_instance_obs
from .errors import EmptyShape, TooFewPoints
from .geometry import Pose, object_to_world, wrap_angle
from .prior import ShapePrior, decode, zero_code
from .render import Mask, OcclusionMap, RenderConfig, occlusion_maps
from .scene import FrustumCloud, GroundPlane, Scene, frustum_points, scene_ground
from .sdf import interior_bounds, sample as sdf_sample

N_MIN_POINTS = 5


class FitCancelled(Exception):
    """Raised internally when a progress callback asks to stop."""


@dataclass
class FitConfig:
    learning_rate: float = 0.1
    iterations: int = 150
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    yaw_seeds: int = 4
    seed_trial_iters: int = 30
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    n_min_points: int = N_MIN_POINTS
    # nearby instances can carry >5k returns; an even subsample beyond this
    # cap keeps the point term informative at a bounded per-iteration cost
    max_frustum_points: int = 2048
    plateau_stop: bool = False
    plateau_delta: float = 1e-6
    plateau_window: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (self.iterations >= self.seed_trial_iters >= 1):
            raise ValueError("need iterations >= seed_trial_iters >= 1")
        if self.yaw_seeds < 1:
            raise ValueError("yaw_seeds must be >= 1")


@dataclass
class FitResult:
    instance_id: int
    status: str  # ok | low_points | degenerate
    pose: Pose
    shape: np.ndarray
    box: dict  # {"center": [3], "dims": [3], "yaw": float}
    confidence: float
    energy: dict  # {"mask", "pc", "ground", "total"}
    iterations: int
    init_energy: float = float("nan")  # selected seed's starting total (not serialized)

    def to_json_dict(self, cfg: FitConfig) -> dict:
        return {
            "id": self.instance_id,
            "status": self.status,
            "center": [float(v) for v in self.box["center"]],
            "dims": [float(v) for v in self.box["dims"]],
            "yaw": float(self.box["yaw"]),
            "shape_code": [float(v) for v in self.shape],
            "confidence": float(self.confidence),
            "energy": {k: float(v) for k, v in self.energy.items()},
            "config_echo": {
                "weights": {
                    "w_mask": cfg.weights.w_mask,
                    "w_pc": cfg.weights.w_pc,
                    "w_ground": cfg.weights.w_ground,
                    "sdf_clamp": cfg.weights.sdf_clamp,
                },
                "lr": cfg.learning_rate,
                "iters": cfg.iterations,
                "zeta": cfg.render.zeta,
            },
        }


# --- initialization -----------------------------------------------------------------


def init_instance(
    frustum: FrustumCloud,
    prior: ShapePrior,
    g: GroundPlane,
    yaw_seeds: int = 4,
    n_min: int = N_MIN_POINTS,
) -> list[tuple[Pose, np.ndarray]]:
    """Median-position, mean-shape initialization replicated over yaw seeds."""
    if frustum.count < n_min:
        raise TooFewPoints(f"instance {frustum.instance_id}: {frustum.count} < {n_min}")
    med = np.median(frustum.points, axis=0)
    seeds = []
    for k in range(yaw_seeds):
        theta = wrap_angle(2.0 * math.pi * k / yaw_seeds)
        seeds.append(
            (Pose(float(med[0]), float(med[1]), float(med[2]), theta), zero_code(prior))
        )
    return seeds


# --- extraction -----------------------------------------------------------------------


def extract_box(prior: ShapePrior, s: np.ndarray, p: Pose) -> dict:
    """Object-frame bounds of the interior, transformed by the pose."""
    grid = decode(prior, s)
    try:
        b = interior_bounds(grid)
    except ValueError as exc:
        raise EmptyShape(str(exc)) from exc
    center_local = b.mean(axis=1)
    dims = b[:, 1] - b[:, 0]
    center = object_to_world(p, center_local)
    return {
        "center": center,
        "dims": dims,
        "yaw": p.theta,
    }


def export_occupancy(
    prior: ShapePrior,
    s: np.ndarray,
    p: Pose,
    voxel_size_out: float,
    bounds: np.ndarray,
):
    """Binary world-frame occupancy of the posed shape.

    bounds: (3, 2) world AABB; returns (occ (nx, ny, nz) bool, centers meta
    dict). A voxel is occupied iff its center maps into {phi >= 0}.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(3, 2)
    counts = np.maximum(
        np.ceil((bounds[:, 1] - bounds[:, 0]) / voxel_size_out - 1e-9).astype(int), 1
    )
    axes = [bounds[i, 0] + (np.arange(counts[i]) + 0.5) * voxel_size_out for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=1)
    grid = decode(prior, s)
    local = (centers - p.center) @ np.array(
        [
            [math.cos(p.theta), -math.sin(p.theta), 0.0],
            [math.sin(p.theta), math.cos(p.theta), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    phi = sdf_sample(grid, local)
    occ = (phi >= 0.0).reshape(tuple(counts))
    meta = {"origin": bounds[:, 0], "voxel_size": voxel_size_out, "counts": counts}
    return occ, meta


def confidence(y_proj_final: Mask, occ: OcclusionMap | None, y: Mask) -> float:
    """IoU between the binarized occluded projection and the target mask."""
    a = y_proj_final.binary()
    if occ is not None:
        a = a & (occ.values >= 0.5)
    b = y.binary()
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return float((a & b).sum() / union)


# --- the optimizer loop -----------------------------------------------------------------


def _wrap_theta_(params: torch.Tensor) -> None:
    with torch.no_grad():
        w = params[:, 3] % (2.0 * math.pi)
        params[:, 3] = torch.where(w > math.pi, w - 2.0 * math.pi, w)


def _scene_terms(params, pt, obs, cfg: FitConfig):
    return _engine.scene_energy(
        params,
        pt,
        obs,
        cfg.weights.w_mask,
        cfg.weights.w_pc,
        cfg.weights.w_ground,
        cfg.weights.sdf_clamp,
        cfg.render.zeta,
        cfg.render.samples_per_ray,
        cfg.render.near,
        cfg.render.far,
        normalize_pc=cfg.weights.normalize_pc,
    )


def _totals(terms: torch.Tensor, cfg: FitConfig) -> torch.Tensor:
    w = cfg.weights
    return w.w_mask * terms[:, 0] + w.w_pc * terms[:, 1] + w.w_ground * terms[:, 2]


def _adam(params: torch.Tensor, cfg: FitConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        [params], lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
    )


def _run_steps(params, optimizer, pt, obs, cfg, n_steps, progress=None, it_offset=0):
    """n_steps Adam updates; returns nothing (params updated in place)."""
    history: list[float] = []
    for i in range(n_steps):
        optimizer.zero_grad(set_to_none=True)
        terms, _, _ = _scene_terms(params, pt, obs, cfg)
        totals = _totals(terms, cfg)
        loss = totals.sum()
        loss.backward()
        optimizer.step()
        _wrap_theta_(params)
        history.append(float(loss.detach()))
        if progress is not None:
            keep_going = progress(
                it_offset + i + 1, float(loss.detach()), params.detach().numpy().copy()
            )
            if keep_going is False:
                raise FitCancelled()
        if cfg.plateau_stop and len(history) > cfg.plateau_window:
            if abs(history[-1] - history[-1 - cfg.plateau_window]) < cfg.plateau_delta:
                break


def _fit_batch(
    inits: list[list[tuple[Pose, np.ndarray]]],
    pt,
    obs: list[_engine.InstanceObs],
    cfg: FitConfig,
    progress=None,
):
    """Optimize a batch of instances; returns (params (B, 4+d) np, per-instance
    final terms (B, 3) np, rendered windows, init energy of selected seeds)."""
    B = len(obs)
    K = cfg.yaw_seeds
    d = pt.d

    # --- seed trial phase: every instance x every yaw seed in one batch
    rows = []
    for seeds in inits:
        for pose, code in seeds:
            rows.append(np.concatenate([pose.as_array(), code]))
    params = torch.from_numpy(np.stack(rows)).requires_grad_(True)
    obs_rep = [obs[b] for b in range(B) for _ in range(K)]

    with torch.no_grad():
        terms0, _, _ = _scene_terms(params, pt, obs_rep, cfg)
        init_energies = _totals(terms0, cfg).numpy().reshape(B, K)

    optimizer = _adam(params, cfg)
    _run_steps(params, optimizer, pt, obs_rep, cfg, cfg.seed_trial_iters)

    with torch.no_grad():
        terms_t, _, _ = _scene_terms(params, pt, obs_rep, cfg)
        trial = _totals(terms_t, cfg).numpy().reshape(B, K)

    thetas = np.array(
        [wrap_angle(2.0 * math.pi * k / K) for k in range(K)]
    )
    chosen = np.array(
        [int(np.lexsort((thetas, trial[b]))[0]) for b in range(B)], dtype=np.int64
    )
    sel = torch.from_numpy(np.arange(B, dtype=np.int64) * K + chosen)

    state = optimizer.state[params]
    params2 = params.detach()[sel].clone().requires_grad_(True)
    optimizer2 = _adam(params2, cfg)
    optimizer2.state[params2] = {
        "step": state["step"].clone(),
        "exp_avg": state["exp_avg"][sel].clone(),
        "exp_avg_sq": state["exp_avg_sq"][sel].clone(),
    }
    sel_init_energy = init_energies[np.arange(B), chosen]

    _run_steps(
        params2, optimizer2, pt, obs, cfg,
        cfg.iterations - cfg.seed_trial_iters,
        progress=progress, it_offset=cfg.seed_trial_iters,
    )

    with torch.no_grad():
        terms_f, _, _ = _scene_terms(params2, pt, obs, cfg)
        rendered = (
            _engine.render_windows(
                _engine.decode_values(pt, params2[:, 4:]),
                pt,
                params2[:, :4],
                obs,
                cfg.render.zeta,
                cfg.render.samples_per_ray,
                cfg.render.near,
                cfg.render.far,
            )
            if any(ob.n_rays > 0 for ob in obs)
            else [torch.zeros(0)] * B
        )
    _ = d
    return (
        params2.detach().numpy().copy(),
        terms_f.numpy().copy(),
        [r.detach().numpy().copy() for r in rendered],
        sel_init_energy,
    )


def fit_scene(
    scene: Scene,
    prior: ShapePrior,
    cfg: FitConfig | None = None,
    batched: bool = True,
    progress=None,
) -> list[FitResult]:
    """Fit every instance of a scene; never aborts on per-instance failures.

    Occlusion maps are built once from the initial mask/depth association and
    held fixed. Instances below the frustum point minimum get a fallback
    label (median position, mean shape, confidence 0).
    """
    cfg = cfg or FitConfig()
    pt = _engine.prior_tensors(prior)
    try:
        ground = scene_ground(scene)
    except Exception:
        ground = GroundPlane(0.0, 0.0, 0.0)

    instances = sorted(scene.instances, key=lambda i: i.id)
    frustums: dict[int, FrustumCloud] = {}
    for inst in instances:
        if inst.mask is None:
            continue
        try:
            frustums[inst.id] = frustum_points(scene, inst, ground, n_min=0)
        except TooFewPoints:
            pass

    masked = [inst for inst in instances if inst.mask is not None]
    occ_inputs = []
    for inst in masked:
        fr = frustums.get(inst.id)
        occ_inputs.append((inst.mask, fr.depths if fr is not None else np.zeros(0)))
    occs = occlusion_maps(occ_inputs) if occ_inputs else []
    occ_by_id = {inst.id: occ for inst, occ in zip(masked, occs)}

    eligible = []
    fallback: dict[int, FitResult] = {}
    for inst in instances:
        fr = frustums.get(inst.id)
        if inst.mask is None or fr is None or fr.count == 0:
            mean_box = extract_box(prior, zero_code(prior), Pose(0, 0, 0, 0))
            fallback[inst.id] = FitResult(
                instance_id=inst.id,
                status="degenerate",
                pose=Pose(0, 0, 0, 0),
                shape=zero_code(prior),
                box=mean_box,
                confidence=0.0,
                energy={"mask": 0.0, "pc": 0.0, "ground": 0.0, "total": 0.0},
                iterations=0,
            )
        elif fr.count < cfg.n_min_points:
            med = np.median(fr.points, axis=0)
            pose = Pose(float(med[0]), float(med[1]), float(med[2]), 0.0)
            fallback[inst.id] = FitResult(
                instance_id=inst.id,
                status="low_points",
                pose=pose,
                shape=zero_code(prior),
                box=extract_box(prior, zero_code(prior), pose),
                confidence=0.0,
                energy={"mask": 0.0, "pc": 0.0, "ground": 0.0, "total": 0.0},
                iterations=0,
            )
        else:
            eligible.append(inst)

    results: dict[int, FitResult] = dict(fallback)

    def finish_group(group, params_np, terms_np, rendered, obs_list, init_e):
        for i, inst in enumerate(group):
            q = params_np[i]
            pose = Pose.from_array(q[:4])
            shape = q[4:].copy()
            terms = terms_np[i]
            w = cfg.weights
            total = w.w_mask * terms[0] + w.w_pc * terms[1] + w.w_ground * terms[2]
            try:
                box = extract_box(prior, shape, pose)
                status = "ok"
            except EmptyShape:
                box = {"center": pose.center, "dims": np.zeros(3), "yaw": pose.theta}
                status = "degenerate"
            ob = obs_list[i]
            conf = 0.0
            if ob.n_pix > 0 and inst.mask is not None:
                r0, c0, wh, ww = ob.window
                ypb = rendered[i].reshape(wh, ww) >= 0.5
                ob_win = ob.o_win.numpy().reshape(wh, ww) >= 0.5
                yb = inst.mask.binary()[r0 : r0 + wh, c0 : c0 + ww]
                a = ypb & ob_win
                union = int((a | yb).sum())
                conf = float((a & yb).sum() / union) if union else 0.0
            results[inst.id] = FitResult(
                instance_id=inst.id,
                status=status,
                pose=pose,
                shape=shape,
                box=box,
                confidence=conf,
                energy={
                    "mask": float(terms[0]),
                    "pc": float(terms[1]),
                    "ground": float(terms[2]),
                    "total": float(total),
                },
                iterations=cfg.iterations,
                init_energy=float(init_e[i]),
            )

    groups = [eligible] if batched else [[inst] for inst in eligible]
    for group in groups:
        if not group:
            continue
        inits = []
        obs_list = []
        for inst in group:
            fr = frustums[inst.id]
            seeds = init_instance(fr, prior, ground, cfg.yaw_seeds, cfg.n_min_points)
            if fr.count > cfg.max_frustum_points:
                step = fr.count / cfg.max_frustum_points
                keep = np.unique((np.arange(cfg.max_frustum_points) * step).astype(int))
                fr = FrustumCloud(instance_id=fr.instance_id,
                                  points=fr.points[keep], depths=fr.depths[keep])
            inits.append(seeds)
            obs_list.append(
                build_instance_obs(
                    prior,
                    Observations(
                        target=inst.mask,
                        occlusion=occ_by_id.get(inst.id),
                        frustum=fr,
                        ground=ground,
                        camera=scene.camera,
                    ),
                    cfg.render,
                    instance_id=inst.id,
                    init_pose=seeds[0][0],
                )
            )
        params_np, terms_np, rendered, init_e = _fit_batch(
            inits, pt, obs_list, cfg, progress=progress
        )
        finish_group(group, params_np, terms_np, rendered, obs_list, init_e)

    return [results[inst.id] for inst in instances]


def results_to_labels(results: list[FitResult], cfg: FitConfig) -> dict:
    return {"instances": [r.to_json_dict(cfg) for r in results]}
