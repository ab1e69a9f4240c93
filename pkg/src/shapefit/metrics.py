"""Label-quality metrics and the ablation/robustness harness.

Boxes are dicts {"center": (3,), "dims": (l, w, h), "yaw": rad} as produced
by the fitter and by gt.json. BEV intersection uses Sutherland-Hodgman
polygon clipping; the sampling-based cross-check lives in the tests only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateBox, SpecError
from .geometry import wrap_angle


# --- rotated box IoU -----------------------------------------------------------------


def _bev_corners(box) -> np.ndarray:
    """Counterclockwise footprint corners (the clipper keeps left of edges)."""
    cx, cy = float(box["center"][0]), float(box["center"][1])
    l, w = float(box["dims"][0]), float(box["dims"][1])
    yaw = float(box["yaw"])
    c, s = math.cos(yaw), math.sin(yaw)
    dx = np.array([l / 2, l / 2, -l / 2, -l / 2])
    dy = np.array([-w / 2, w / 2, w / 2, -w / 2])
    return np.stack([cx + c * dx - s * dy, cy + s * dx + c * dy], axis=1)


def _clip_polygon(subject: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of `subject` left of the directed edge a->b."""
    if len(subject) == 0:
        return subject
    out = []
    n = len(subject)
    edge = b - a
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        side_p = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        side_q = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        if side_p >= -1e-12:
            out.append(p)
            if side_q < -1e-12:
                t = side_p / (side_p - side_q)
                out.append(p + t * (q - p))
        elif side_q >= -1e-12:
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _check_box(box):
    dims = np.asarray(box["dims"], dtype=np.float64)
    if np.any(dims <= 0):
        raise DegenerateBox(f"non-positive dims {dims}")


def bev_intersection_area(box_a, box_b) -> float:
    pa = _bev_corners(box_a)
    pb = _bev_corners(box_b)
    poly = pa
    for i in range(4):
        poly = _clip_polygon(poly, pb[i], pb[(i + 1) % 4])
        if len(poly) == 0:
            return 0.0
    return _polygon_area(poly)


def iou_bev(box_a, box_b) -> float:
    _check_box(box_a)
    _check_box(box_b)
    inter = bev_intersection_area(box_a, box_b)
    a = float(box_a["dims"][0]) * float(box_a["dims"][1])
    b = float(box_b["dims"][0]) * float(box_b["dims"][1])
    union = a + b - inter
    return inter / union if union > 0 else 0.0


def iou_3d(box_a, box_b) -> float:
    _check_box(box_a)
    _check_box(box_b)
    inter_bev = bev_intersection_area(box_a, box_b)
    za0 = float(box_a["center"][2]) - float(box_a["dims"][2]) / 2
    za1 = float(box_a["center"][2]) + float(box_a["dims"][2]) / 2
    zb0 = float(box_b["center"][2]) - float(box_b["dims"][2]) / 2
    zb1 = float(box_b["center"][2]) + float(box_b["dims"][2]) / 2
    zi = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_bev * zi
    va = float(np.prod(np.asarray(box_a["dims"], dtype=np.float64)))
    vb = float(np.prod(np.asarray(box_b["dims"], dtype=np.float64)))
    union = va + vb - inter
    return inter / union if union > 0 else 0.0


def aligned_size_iou(box_a, box_b) -> float:
    """IoU after aligning centers and yaws: prod(min dims) / prod(max dims)."""
    da = np.asarray(box_a["dims"], dtype=np.float64)
    db = np.asarray(box_b["dims"], dtype=np.float64)
    return float(np.prod(np.minimum(da, db)) / np.prod(np.maximum(da, db)))


# --- orientation ---------------------------------------------------------------------


def orientation_error(yaw_pred: float, yaw_gt: float, dagger: bool = False) -> float:
    """|wrapped delta| in [0, pi]; dagger folds the pi ambiguity to [0, pi/2]."""
    delta = yaw_pred - yaw_gt
    std = abs(wrap_angle(delta))
    if not dagger:
        return std
    return min(std, abs(wrap_angle(delta - math.pi)), abs(wrap_angle(delta + math.pi)))


# --- AP@R40 ---------------------------------------------------------------------------


def _greedy_match(pred_boxes, confidences, gt_boxes, iou_threshold, iou_fn):
    """Returns (tp_flags, matched_gt_index) in confidence-descending order."""
    order = np.argsort(-np.asarray(confidences, dtype=np.float64), kind="stable")
    taken = np.zeros(len(gt_boxes), dtype=bool)
    tp = np.zeros(len(pred_boxes), dtype=bool)
    match = np.full(len(pred_boxes), -1, dtype=np.int64)
    for rank, pi in enumerate(order):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou_fn(pred_boxes[pi], gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            tp[rank] = True
            match[rank] = best_j
    return order, tp, match


def ap_r40(predictions, gts, iou_threshold: float = 0.5, iou_fn=iou_3d):
    """Average precision at 40 recall positions.

    predictions: list of (box, confidence). Returns None when there are no
    ground-truth boxes (AP undefined).
    """
    if len(gts) == 0:
        return None
    if len(predictions) == 0:
        return 0.0
    boxes = [p[0] for p in predictions]
    confs = [p[1] for p in predictions]
    _, tp, _ = _greedy_match(boxes, confs, gts, iou_threshold, iou_fn)
    tp_cum = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / len(gts)
    ap = 0.0
    for i in range(1, 41):
        r = i / 40.0
        sel = recall >= r - 1e-12
        p = float(precision[sel].max()) if sel.any() else 0.0
        ap += p
    return ap / 40.0


# --- report ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    ap: dict  # threshold -> AP (or None)
    mean_iou_3d: float
    mean_iou_bev: float
    translation_error: float
    size_error: float
    orientation_error: float
    orientation_error_dagger: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "ap": {f"{k:g}": v for k, v in self.ap.items()},
            "mean_iou_3d": self.mean_iou_3d,
            "mean_iou_bev": self.mean_iou_bev,
            "translation_error": self.translation_error,
            "size_error": self.size_error,
            "orientation_error": self.orientation_error,
            "orientation_error_dagger": self.orientation_error_dagger,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def evaluate(
    predictions,
    gts,
    thresholds=(0.5, 0.7),
    match_threshold: float = 0.5,
    iou_fn=iou_3d,
) -> EvalReport:
    """Match predictions to ground truth and aggregate the error metrics.

    predictions: list of (box, confidence); gts: list of boxes. Matching is
    the same greedy confidence-descending rule ap_r40 uses.
    """
    ap = {t: ap_r40(predictions, gts, t, iou_fn) for t in thresholds}
    boxes = [p[0] for p in predictions]
    confs = [p[1] for p in predictions]
    if len(gts) and len(boxes):
        order, tp, match = _greedy_match(boxes, confs, gts, match_threshold, iou_fn)
    else:
        order = np.zeros(0, dtype=np.int64)
        tp = np.zeros(0, dtype=bool)
        match = np.full(0, -1, dtype=np.int64)

    iou3, ioub, terr, serr, oerr, oerr_d = [], [], [], [], [], []
    for rank, pi in enumerate(order):
        if not tp[rank]:
            continue
        pred, gt = boxes[pi], gts[match[rank]]
        iou3.append(iou_3d(pred, gt))
        ioub.append(iou_bev(pred, gt))
        terr.append(float(np.linalg.norm(np.asarray(pred["center"]) - np.asarray(gt["center"]))))
        serr.append(1.0 - aligned_size_iou(pred, gt))
        oerr.append(orientation_error(pred["yaw"], gt["yaw"], dagger=False))
        oerr_d.append(orientation_error(pred["yaw"], gt["yaw"], dagger=True))

    n_tp = int(tp.sum())
    return EvalReport(
        ap=ap,
        mean_iou_3d=float(np.mean(iou3)) if iou3 else 0.0,
        mean_iou_bev=float(np.mean(ioub)) if ioub else 0.0,
        translation_error=float(np.mean(terr)) if terr else float("nan"),
        size_error=float(np.mean(serr)) if serr else float("nan"),
        orientation_error=float(np.mean(oerr)) if oerr else float("nan"),
        orientation_error_dagger=float(np.mean(oerr_d)) if oerr_d else float("nan"),
        tp=n_tp,
        fp=len(boxes) - n_tp,
        fn=len(gts) - n_tp,
    )


def labels_to_eval_inputs(labels: dict):
    """labels.json dict -> (predictions, ) for evaluate()."""
    preds = []
    for inst in labels["instances"]:
        box = {"center": inst["center"], "dims": inst["dims"], "yaw": inst["yaw"]}
        if min(box["dims"]) <= 0:
            continue
        preds.append((box, float(inst.get("confidence", 0.0))))
    return preds


def gt_to_eval_inputs(gt: dict):
    return [
        {"center": g["center"], "dims": g["dims"], "yaw": g["yaw"]}
        for g in gt["instances"]
    ]


# --- sweep harness ----------------------------------------------------------------------

_ENERGY_CELLS = {
    "full": dict(w_mask=1.0, w_pc=1.0, w_ground=0.1),
    "mask+pc": dict(w_mask=1.0, w_pc=1.0, w_ground=0.0),
    "pc": dict(w_mask=0.0, w_pc=1.0, w_ground=0.0),
    "mask": dict(w_mask=1.0, w_pc=0.0, w_ground=0.0),
}

_KNOWN_AXES = {
    "energy": list(_ENERGY_CELLS),
    "dim": [3, 5, 8, 10],
    "bank": [5, 30, 79],
    "prompt_points": [1, 3, 5, 8],
    "beams": [64, 32, 16, 8],
    "morph": ["none", "erode5", "erode9", "dilate5", "dilate9"],
}


def run_harness(spec: dict, out_csv=None, out_table=None, progress=None):
    """Sweep the requested axes over a seeded synthetic suite.

    spec keys: seed (int), scenes (int), axes: {name: [values]}, optional
    fit/synth overrides. Returns the list of row dicts; writes CSV and a
    formatted table when paths are given. Unknown axes or values raise
    SpecError.
    """
    from . import synth as synth_mod
    from .energy import EnergyWeights
    from .fit import FitConfig, fit_scene, results_to_labels
    from .prior import build_prior
    from .sdf import procedural_bank

    axes = spec.get("axes", {})
    for name, values in axes.items():
        if name not in _KNOWN_AXES:
            raise SpecError(f"unknown sweep axis {name!r}")
        for v in values:
            if v not in _KNOWN_AXES[name]:
                raise SpecError(f"axis {name}: unknown value {v!r}")

    seed = int(spec.get("seed", 0))
    n_scenes = int(spec.get("scenes", 5))
    bank = procedural_bank()
    prior = build_prior(bank, d=5)
    base_synth = synth_mod.SynthConfig(seed=seed, **spec.get("synth", {}))
    fit_kwargs = spec.get("fit", {})

    def make_cfg(weights=None):
        return FitConfig(weights=weights or EnergyWeights(), **fit_kwargs)

    def suite(synth_cfg):
        scenes = []
        for i in range(n_scenes):
            import dataclasses

            scfg = dataclasses.replace(synth_cfg, seed=seed + i)
            scene, gt, meta = synth_mod.gen_scene(scfg, prior)
            scenes.append((scene, gt, meta))
        return scenes

    base_scenes = suite(base_synth)

    def run_cell(axis, value):
        scenes = base_scenes
        fit_prior = prior
        cfg = make_cfg()
        if axis == "energy":
            cfg = make_cfg(EnergyWeights(**_ENERGY_CELLS[value]))
        elif axis == "dim":
            fit_prior = build_prior(bank, d=int(value))
        elif axis == "bank":
            k = int(value)
            if k < 79:
                rng = np.random.default_rng(seed + 777)
                idx = rng.choice(len(bank), size=k, replace=False)
                fit_prior = build_prior([bank[i] for i in sorted(idx)], d=min(5, k - 1))
            else:
                fit_prior = prior
        elif axis == "beams":
            import dataclasses

            lidar = dataclasses.replace(base_synth.lidar, beams=int(value))
            scenes = suite(dataclasses.replace(base_synth, lidar=lidar))
        elif axis == "prompt_points":
            import dataclasses

            scenes = suite(dataclasses.replace(base_synth, prompt_points=int(value)))
        elif axis == "morph":
            if value != "none":
                op = "erode" if value.startswith("erode") else "dilate"
                k = int(value[-1])
                scenes = []
                for scene, gt, meta in base_scenes:
                    import copy

                    sc = copy.copy(scene)
                    sc.instances = [
                        type(inst)(
                            id=inst.id,
                            mask=synth_mod.corrupt_mask(inst.mask, op, k)
                            if inst.mask is not None
                            else None,
                            prompt=inst.prompt,
                        )
                        for inst in scene.instances
                    ]
                    scenes.append((sc, gt, meta))

        preds, gts = [], []
        for scene, gt, _meta in scenes:
            results = fit_scene(scene, fit_prior, cfg)
            labels = results_to_labels(results, cfg)
            preds.extend(labels_to_eval_inputs(labels))
            gts.extend(gt_to_eval_inputs(gt))
        return evaluate(preds, gts)

    rows = []
    for axis, values in axes.items():
        for value in values:
            if progress:
                progress(f"{axis}={value}")
            report = run_cell(axis, value)
            for metric, v in report.to_dict().items():
                if metric == "ap":
                    for t, apv in v.items():
                        rows.append(
                            {"axis": axis, "cell": str(value), "metric": f"ap@{t}",
                             "value": "" if apv is None else f"{apv:.6f}"}
                        )
                elif isinstance(v, float):
                    rows.append(
                        {"axis": axis, "cell": str(value), "metric": metric,
                         "value": f"{v:.6f}"}
                    )
                else:
                    rows.append(
                        {"axis": axis, "cell": str(value), "metric": metric, "value": str(v)}
                    )

    if out_csv:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["axis", "cell", "metric", "value"])
            writer.writeheader()
            writer.writerows(rows)
    if out_table:
        Path(out_table).write_text(format_harness_table(rows))
    return rows


def format_harness_table(rows) -> str:
    """Fixed-width table, one block per axis, mean 3D IoU and AP columns."""
    by_axis: dict = {}
    for r in rows:
        by_axis.setdefault(r["axis"], {}).setdefault(r["cell"], {})[r["metric"]] = r["value"]
    lines = []
    for axis, cells in by_axis.items():
        lines.append(f"== {axis} ==")
        lines.append(f"{'cell':>12} {'mIoU3d':>10} {'AP@0.5':>10} {'t_err':>10}")
        for cell, metrics in cells.items():
            lines.append(
                f"{cell:>12} {metrics.get('mean_iou_3d', ''):>10} "
                f"{metrics.get('ap@0.5', ''):>10} {metrics.get('translation_error', ''):>10}"
            )
        lines.append("")
    return "\n".join(lines)


def eval_labels_files(pred_path, gt_path, thresholds=(0.5, 0.7)) -> EvalReport:
    labels = json.loads(Path(pred_path).read_text())
    gt = json.loads(Path(gt_path).read_text())
    return evaluate(labels_to_eval_inputs(labels), gt_to_eval_inputs(gt), thresholds)
