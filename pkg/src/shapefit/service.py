"""Labeling service: scenes, prompt-to-mask segmentation, and fit jobs.

Job state machine: queued -> running(iteration, energy trace) -> done |
failed. Jobs run on a bounded thread pool; all registry reads return
consistent snapshots taken under the registry lock. At most one live fit per
(scene, instance).
"""

from __future__ import annotations

import itertools
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse

from .energy import EnergyWeights
from .errors import SegmenterUnreachable
from .fit import FitCancelled, FitConfig, fit_scene, results_to_labels
from .prior import ShapePrior, load_prior
from .render import Mask, RenderConfig, mask_to_rle, rle_to_mask, soft_silhouette
from .scene import Instance, Scene, load_scene
from .segmenter import SegmenterClient


def rasterize_polygon(points, width: int, height: int) -> Mask:
    """Even-odd scanline fill of a closed polygon at pixel centers."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    out = np.zeros((height, width))
    xs, ys = pts[:, 0], pts[:, 1]
    r0 = max(int(np.floor(ys.min())), 0)
    r1 = min(int(np.ceil(ys.max())), height - 1)
    n = len(pts)
    for row in range(r0, r1 + 1):
        y = float(row)
        crossings = []
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            if (y1 <= y < y2) or (y2 <= y < y1):
                t = (y - y1) / (y2 - y1)
                crossings.append(x1 + t * (x2 - x1))
        crossings.sort()
        # pixel center x is interior iff the crossing count to its right is
        # odd, i.e. x in [a, b) for consecutive crossing pairs
        for a, b in zip(crossings[0::2], crossings[1::2]):
            c0 = max(int(np.ceil(a)), 0)
            c1 = min(int(np.ceil(b)) - 1, width - 1)
            if c1 >= c0:
                out[row, c0 : c1 + 1] = 1.0
    return Mask(out)


@dataclass
class FitJob:
    job_id: int
    scene_id: str
    instance_ids: list
    config_echo: dict
    state: str = "queued"  # queued | running | done | failed
    iteration: int = 0
    energy_trace: list = field(default_factory=list)
    results: dict | None = None
    error: str | None = None
    cancelled: bool = False
    latest_params: np.ndarray | None = None

    def snapshot(self) -> dict:
        out = {
            "id": self.job_id,
            "scene": self.scene_id,
            "instances": list(self.instance_ids),
            "state": self.state,
            "iteration": self.iteration,
            "energy_trace": list(self.energy_trace),
            "config_echo": dict(self.config_echo),
        }
        if self.error:
            out["error"] = self.error
        return out


class LabelService:
    def __init__(
        self,
        scenes_dir,
        prior: ShapePrior,
        segmenter_url: str | None = None,
        segmenter_transport=None,
        max_workers: int | None = None,
    ):
        self.scenes_dir = Path(scenes_dir)
        self.prior = prior
        self.segmenter = (
            SegmenterClient(segmenter_url, transport=segmenter_transport)
            if segmenter_url
            else None
        )
        self._lock = threading.Lock()
        self._jobs: dict[int, FitJob] = {}
        self._running_keys: set = set()
        self._ids = itertools.count(1)
        self._pool = ThreadPoolExecutor(max_workers=max_workers or 4)
        self._scene_cache: dict[str, Scene] = {}
        self._labels_dir = self.scenes_dir / "_labels"

    # --- scenes -------------------------------------------------------------

    def scene_ids(self) -> list[str]:
        out = []
        for p in sorted(self.scenes_dir.iterdir()) if self.scenes_dir.exists() else []:
            if (p / "scene.json").exists():
                out.append(p.name)
        return out

    def get_scene(self, scene_id: str) -> Scene:
        if scene_id not in self._scene_cache:
            path = self.scenes_dir / scene_id
            if not (path / "scene.json").exists():
                raise KeyError(scene_id)
            self._scene_cache[scene_id] = load_scene(path)
        return self._scene_cache[scene_id]

    def scene_meta(self, scene_id: str) -> dict:
        scene = self.get_scene(scene_id)
        return {
            "id": scene_id,
            "width": scene.camera.width,
            "height": scene.camera.height,
            "n_points": int(len(scene.points)),
            "instances": [
                {
                    "id": inst.id,
                    "has_mask": inst.mask is not None,
                    "prompt": inst.prompt,
                }
                for inst in scene.instances
            ],
        }

    def image_path(self, scene_id: str) -> Path:
        scene = self.get_scene(scene_id)
        if not scene.image_path:
            raise KeyError(scene_id)
        return Path(scene.image_path)

    # --- segmentation ---------------------------------------------------------

    def segment(self, scene_id: str, prompt: dict) -> dict:
        scene = self.get_scene(scene_id)
        if "polygon" in prompt:
            mask = rasterize_polygon(
                prompt["polygon"], scene.camera.width, scene.camera.height
            )
            return {"mask_rle": mask_to_rle(mask), "source": "user"}
        if self.segmenter is None:
            raise ValueError("no external segmenter configured; draw a polygon")
        image = self.image_path(scene_id).read_bytes()
        mask, _score = self.segmenter.segment(
            image, points=prompt.get("points"), box=prompt.get("box")
        )
        return {"mask_rle": mask_to_rle(mask), "source": "external"}

    # --- fit jobs ---------------------------------------------------------------

    @staticmethod
    def build_config(overrides: dict | None) -> FitConfig:
        overrides = overrides or {}
        weights = EnergyWeights(
            w_mask=float(overrides.get("w_mask", 1.0)),
            w_pc=float(overrides.get("w_pc", 1.0)),
            w_ground=float(overrides.get("w_ground", 0.1)),
        )
        render = RenderConfig(zeta=float(overrides.get("zeta", 40.0)))
        iters = int(overrides.get("iters", 150))
        return FitConfig(
            learning_rate=float(overrides.get("lr", 0.1)),
            iterations=iters,
            seed_trial_iters=min(30, iters),
            weights=weights,
            render=render,
        )

    def submit_fit(
        self,
        scene_id: str,
        instance_ids: list | None = None,
        mask_rle: dict | None = None,
        mask_instance_id: int | None = None,
        config: dict | None = None,
    ) -> int:
        scene = self.get_scene(scene_id)
        if mask_rle is not None:
            mask = rle_to_mask(mask_rle)
            new_id = (
                mask_instance_id
                if mask_instance_id is not None
                else (max((i.id for i in scene.instances), default=-1) + 1)
            )
            others = [i for i in scene.instances if i.id != new_id]
            scene = Scene(
                camera=scene.camera,
                points=scene.points,
                instances=others + [Instance(id=new_id, mask=mask)],
                image_path=scene.image_path,
                scene_dir=scene.scene_dir,
            )
            instance_ids = [new_id]
        if instance_ids is None:
            instance_ids = [i.id for i in scene.instances if i.mask is not None]
        known = {i.id for i in scene.instances}
        missing = [i for i in instance_ids if i not in known]
        if missing:
            raise KeyError(f"unknown instances {missing}")

        cfg = self.build_config(config)
        keys = {(scene_id, i) for i in instance_ids}
        with self._lock:
            if keys & self._running_keys:
                raise RuntimeError("fit already running for instance")
            job = FitJob(
                job_id=next(self._ids),
                scene_id=scene_id,
                instance_ids=list(instance_ids),
                config_echo={"scene": scene_id, "config": config or {}},
            )
            self._jobs[job.job_id] = job
            self._running_keys |= keys
        fit_scene_obj = Scene(
            camera=scene.camera,
            points=scene.points,
            instances=[i for i in scene.instances if i.id in set(instance_ids)],
            image_path=scene.image_path,
            scene_dir=scene.scene_dir,
        )
        self._pool.submit(self._run_job, job.job_id, fit_scene_obj, cfg, keys)
        return job.job_id

    def _run_job(self, job_id: int, scene: Scene, cfg: FitConfig, keys: set) -> None:
        job = self._jobs[job_id]

        def progress(iteration, total, params):
            with self._lock:
                if job.cancelled:
                    return False
                job.state = "running"
                job.iteration = iteration
                job.energy_trace.append(total)
                job.latest_params = params
            return True

        try:
            with self._lock:
                if job.cancelled:
                    raise FitCancelled()
                job.state = "running"
            results = fit_scene(scene, self.prior, cfg, progress=progress)
            labels = results_to_labels(results, cfg)
            with self._lock:
                job.results = labels
                job.state = "done"
                job.iteration = cfg.iterations
            self._write_labels(job, labels)
        except FitCancelled:
            with self._lock:
                job.state = "failed"
                job.error = "cancelled"
        except Exception as exc:  # pragma: no cover - defensive
            with self._lock:
                job.state = "failed"
                job.error = str(exc)
        finally:
            with self._lock:
                self._running_keys -= keys

    def _write_labels(self, job: FitJob, labels: dict) -> None:
        self._labels_dir.mkdir(parents=True, exist_ok=True)
        path = self._labels_dir / f"{job.scene_id}_job{job.job_id}.json"
        path.write_text(json.dumps(labels, indent=1, sort_keys=True))

    def job_snapshot(self, job_id: int, with_silhouette: bool = True) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise KeyError(job_id)
            snap = job.snapshot()
            params = None if job.latest_params is None else job.latest_params.copy()
        if with_silhouette and params is not None and len(params):
            scene = self.get_scene(job.scene_id)
            q = params[0]
            from .geometry import Pose

            mask = soft_silhouette(
                self.prior, q[4:], Pose.from_array(q[:4]), scene.camera
            )
            snap["silhouette_rle"] = mask_to_rle(mask)
        return snap

    def job_result(self, job_id: int) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise KeyError(job_id)
            if job.state != "done":
                raise RuntimeError(f"job is {job.state}")
            return json.loads(json.dumps(job.results))

    def cancel_job(self, job_id: int) -> None:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise KeyError(job_id)
            job.cancelled = True


def create_app(
    scenes_dir,
    prior: ShapePrior | None = None,
    prior_path=None,
    segmenter_url: str | None = None,
    segmenter_transport=None,
    max_workers: int | None = None,
):
    """FastAPI application wrapping a LabelService."""
    if prior is None:
        if prior_path:
            prior = load_prior(prior_path)
        else:
            from .prior import build_prior
            from .sdf import procedural_bank

            prior = build_prior(procedural_bank(), d=5)

    service = LabelService(
        scenes_dir,
        prior,
        segmenter_url=segmenter_url,
        segmenter_transport=segmenter_transport,
        max_workers=max_workers,
    )
    app = FastAPI(title="shapefit labeling service")
    app.state.service = service

    @app.get("/scenes")
    def scenes():
        return [service.scene_meta(sid) for sid in service.scene_ids()]

    @app.get("/scenes/{scene_id}")
    def scene_meta(scene_id: str):
        try:
            return service.scene_meta(scene_id)
        except KeyError:
            return JSONResponse({"error": "unknown scene"}, status_code=404)

    @app.get("/scenes/{scene_id}/image")
    def scene_image(scene_id: str):
        try:
            return FileResponse(service.image_path(scene_id), media_type="image/png")
        except KeyError:
            return JSONResponse({"error": "unknown scene"}, status_code=404)

    @app.post("/scenes/{scene_id}/segment")
    async def segment(scene_id: str, request: Request):
        try:
            body = json.loads(await request.body())
            prompt = body.get("prompt", {})
            if not isinstance(prompt, dict) or not (
                {"points", "box", "polygon"} & set(prompt)
            ):
                return JSONResponse({"error": "malformed prompt"}, status_code=422)
            return service.segment(scene_id, prompt)
        except KeyError:
            return JSONResponse({"error": "unknown scene"}, status_code=404)
        except SegmenterUnreachable as exc:
            return JSONResponse({"error": str(exc)}, status_code=502)
        except (ValueError, json.JSONDecodeError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)

    @app.post("/scenes/{scene_id}/fit")
    async def fit(scene_id: str, request: Request):
        try:
            body = json.loads(await request.body()) if await request.body() else {}
        except json.JSONDecodeError:
            return JSONResponse({"error": "bad json"}, status_code=422)
        try:
            job_id = service.submit_fit(
                scene_id,
                instance_ids=body.get("instance_ids"),
                mask_rle=body.get("instance_mask_rle") or body.get("mask_rle"),
                mask_instance_id=body.get("mask_id"),
                config=body.get("config"),
            )
            return {"job_id": job_id}
        except KeyError as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)
        except RuntimeError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=422)

    @app.get("/jobs/{job_id}")
    def job(job_id: int):
        try:
            return service.job_snapshot(job_id)
        except KeyError:
            return JSONResponse({"error": "unknown job"}, status_code=404)

    @app.get("/jobs/{job_id}/result")
    def job_result(job_id: int):
        try:
            return service.job_result(job_id)
        except KeyError:
            return JSONResponse({"error": "unknown job"}, status_code=404)
        except RuntimeError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)

    @app.delete("/jobs/{job_id}")
    def cancel(job_id: int):
        try:
            service.cancel_job(job_id)
            return {"cancelled": True}
        except KeyError:
            return JSONResponse({"error": "unknown job"}, status_code=404)

    return app
