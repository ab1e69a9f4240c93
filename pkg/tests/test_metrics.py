import math

import numpy as np
import pytest

from shapefit.errors import DegenerateBox, SpecError
from shapefit.metrics import (
    aligned_size_iou,
    ap_r40,
    evaluate,
    iou_3d,
    iou_bev,
    orientation_error,
)


def box(cx=0.0, cy=0.0, cz=0.0, l=1.0, w=1.0, h=1.0, yaw=0.0):
    return {"center": [cx, cy, cz], "dims": [l, w, h], "yaw": yaw}


def brute_force_iou3d(a, b, n=1_000_000, seed=0):
    """Monte-Carlo IoU oracle: sample the union's AABB, count memberships."""
    rng = np.random.default_rng(seed)

    def corners_aabb(bx):
        c = np.asarray(bx["center"], dtype=np.float64)
        half = np.asarray(bx["dims"], dtype=np.float64) / 2
        ext = np.abs(
            np.array(
                [
                    [math.cos(bx["yaw"]), -math.sin(bx["yaw"]), 0],
                    [math.sin(bx["yaw"]), math.cos(bx["yaw"]), 0],
                    [0, 0, 1],
                ]
            )
        ) @ half
        return c - ext, c + ext

    lo_a, hi_a = corners_aabb(a)
    lo_b, hi_b = corners_aabb(b)
    lo = np.minimum(lo_a, lo_b)
    hi = np.maximum(hi_a, hi_b)
    pts = rng.uniform(lo, hi, (n, 3))
    vol_box = np.prod(hi - lo)

    def inside(bx, p):
        c = np.asarray(bx["center"], dtype=np.float64)
        q = p - c
        cy, sy = math.cos(bx["yaw"]), math.sin(bx["yaw"])
        local = np.stack(
            [cy * q[:, 0] + sy * q[:, 1], -sy * q[:, 0] + cy * q[:, 1], q[:, 2]], axis=1
        )
        half = np.asarray(bx["dims"], dtype=np.float64) / 2
        return np.all(np.abs(local) <= half, axis=1)

    ia = inside(a, pts)
    ib = inside(b, pts)
    inter = (ia & ib).mean() * vol_box
    union = (ia | ib).mean() * vol_box
    return inter / union if union > 0 else 0.0


class TestIou:
    def test_identical_boxes(self):
        b = box(1, 2, 3, 4.2, 1.8, 1.5, 0.7)
        assert iou_bev(b, b) == pytest.approx(1.0, abs=1e-12)
        assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_offset_unit_cubes(self):
        # closed form: inter 0.5, union 1.5 -> 1/3
        a = box()
        b = box(cx=0.5)
        assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)
        assert iou_3d(a, b) == pytest.approx(brute_force_iou3d(a, b), abs=2e-3)

    def test_rigid_invariance(self):
        a = box(l=4.0, w=1.8, h=1.5)
        b = box(cx=1.0, cy=0.5, l=4.2, w=1.7, h=1.4, yaw=0.3)
        base = iou_3d(a, b)
        for rho in (0.4, 1.2, -2.2):
            c, s = math.cos(rho), math.sin(rho)

            def rot(bx):
                x, y, z = bx["center"]
                return {
                    "center": [c * x - s * y, s * x + c * y, z],
                    "dims": bx["dims"],
                    "yaw": bx["yaw"] + rho,
                }

            assert iou_3d(rot(a), rot(b)) == pytest.approx(base, abs=1e-9)

    def test_random_pairs_match_brute_force(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for i in range(25):
            a = box(*rng.uniform(-1, 1, 3), *rng.uniform(1.0, 4.0, 3), rng.uniform(-3, 3))
            b = box(*(rng.uniform(-1, 1, 3) + np.array(a["center"]) * 0.5),
                    *rng.uniform(1.0, 4.0, 3), rng.uniform(-3, 3))
            got = iou_3d(a, b)
            want = brute_force_iou3d(a, b, n=200_000, seed=i)
            worst = max(worst, abs(got - want))
        assert worst < 5e-3

    def test_degenerate_box(self):
        with pytest.raises(DegenerateBox):
            iou_bev(box(l=0.0), box())

    def test_disjoint(self):
        assert iou_3d(box(), box(cx=5.0)) == 0.0
        assert iou_bev(box(), box(cy=5.0)) == 0.0

    def test_aligned_size_iou(self):
        a = box(l=4.0, w=2.0, h=1.0)
        b = box(l=2.0, w=2.0, h=2.0)
        assert aligned_size_iou(a, b) == pytest.approx((2 * 2 * 1) / (4 * 2 * 2))


class TestOrientationError:
    def test_pi_flip(self):
        assert orientation_error(math.pi, 0.0) == pytest.approx(math.pi)
        assert orientation_error(math.pi, 0.0, dagger=True) == pytest.approx(0.0, abs=1e-12)

    def test_zero(self):
        assert orientation_error(0.3, 0.3) == 0.0
        assert orientation_error(0.3, 0.3, dagger=True) == 0.0

    def test_quarter(self):
        assert orientation_error(math.pi / 4, 0.0) == pytest.approx(math.pi / 4)
        assert orientation_error(math.pi / 4, 0.0, dagger=True) == pytest.approx(math.pi / 4)

    def test_dagger_bound_and_order(self):
        for deg in range(0, 360):
            d = math.radians(deg)
            std = orientation_error(d, 0.0)
            dag = orientation_error(d, 0.0, dagger=True)
            assert 0 <= dag <= math.pi / 2 + 1e-12
            assert dag <= std + 1e-12


def brute_force_ap(scored_tp, n_gt):
    """PR-curve oracle: walk the ranked list, mean of interpolated precision
    at the 40 recall positions."""
    tps = np.cumsum([1 if t else 0 for t in scored_tp])
    ranks = np.arange(1, len(scored_tp) + 1)
    prec = tps / ranks
    rec = tps / n_gt
    total = 0.0
    for i in range(1, 41):
        r = i / 40
        vals = prec[rec >= r - 1e-12]
        total += vals.max() if len(vals) else 0.0
    return total / 40


class TestApR40:
    def test_all_correct(self):
        gts = [box(cx=i * 10.0) for i in range(3)]
        preds = [(box(cx=i * 10.0), 0.9 - 0.1 * i) for i in range(3)]
        assert ap_r40(preds, gts, 0.5) == pytest.approx(1.0)

    def test_none_match(self):
        gts = [box(cx=0.0)]
        preds = [(box(cx=50.0), 0.9)]
        assert ap_r40(preds, gts, 0.5) == 0.0

    def test_empty_gt_undefined(self):
        assert ap_r40([(box(), 0.5)], [], 0.5) is None

    def test_mid_ranked_fp_matches_oracle(self):
        gts = [box(cx=0.0), box(cx=10.0)]
        preds = [
            (box(cx=0.0), 0.9),     # TP
            (box(cx=55.0), 0.8),    # FP (mid-ranked)
            (box(cx=10.0), 0.7),    # TP
        ]
        got = ap_r40(preds, gts, 0.5)
        want = brute_force_ap([True, False, True], 2)
        assert got == pytest.approx(want, abs=1e-12)

    def test_random_sets_match_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n_gt = int(rng.integers(1, 6))
            gts = [box(cx=i * 10.0) for i in range(n_gt)]
            preds = []
            tp_flags = []
            for j in range(int(rng.integers(1, 8))):
                if rng.random() < 0.6 and j < n_gt:
                    preds.append((box(cx=j * 10.0 + rng.uniform(-0.1, 0.1)), rng.random()))
                else:
                    preds.append((box(cx=1000 + j * 50.0), rng.random()))
            got = ap_r40(preds, gts, 0.5)
            # oracle: replicate greedy matching in ranked order
            order = np.argsort(-np.array([c for _, c in preds]), kind="stable")
            taken = set()
            flags = []
            for pi in order:
                pb = preds[pi][0]
                best, bj = 0.0, -1
                for gj, gb in enumerate(gts):
                    if gj in taken:
                        continue
                    v = iou_3d(pb, gb)
                    if v > best:
                        best, bj = v, gj
                flags.append(best >= 0.5 and bj >= 0)
                if flags[-1]:
                    taken.add(bj)
            want = brute_force_ap(flags, n_gt)
            assert got == pytest.approx(want, abs=1e-12)
            del tp_flags

    def test_monotone_in_added_tp(self):
        gts = [box(cx=0.0), box(cx=10.0), box(cx=20.0)]
        preds = [(box(cx=0.0), 0.8), (box(cx=99.0), 0.6)]
        base = ap_r40(preds, gts, 0.5)
        better = [(box(cx=10.0), 0.9)] + preds
        assert ap_r40(better, gts, 0.5) >= base


class TestEvaluate:
    def test_exact_predictions(self):
        gts = [box(cx=i * 8.0, l=4, w=2, h=1.5, yaw=0.3 * i) for i in range(4)]
        preds = [(dict(g), 0.9) for g in gts]
        rep = evaluate(preds, gts)
        assert rep.ap[0.5] == pytest.approx(1.0)
        assert rep.ap[0.7] == pytest.approx(1.0)
        assert rep.mean_iou_3d == pytest.approx(1.0)
        assert rep.translation_error == pytest.approx(0.0, abs=1e-12)
        assert rep.size_error == pytest.approx(0.0, abs=1e-12)
        assert rep.orientation_error == 0.0
        assert (rep.tp, rep.fp, rep.fn) == (4, 0, 0)

    def test_counts_with_misses(self):
        gts = [box(cx=0.0), box(cx=10.0)]
        preds = [(box(cx=0.05), 0.9), (box(cx=50.0), 0.8)]
        rep = evaluate(preds, gts)
        assert (rep.tp, rep.fp, rep.fn) == (1, 1, 1)

    def test_report_matches_bruteforce_matcher(self):
        rng = np.random.default_rng(9)
        gts, preds = [], []
        for i in range(20):
            g = box(cx=i * 6.0, cy=rng.uniform(-2, 2), l=4.2, w=1.8, h=1.5,
                    yaw=rng.uniform(-3, 3))
            gts.append(g)
            p = dict(g)
            p["center"] = [g["center"][0] + rng.uniform(-0.2, 0.2),
                           g["center"][1] + rng.uniform(-0.2, 0.2), g["center"][2]]
            preds.append((p, rng.random()))
        rep = evaluate(preds, gts)
        # independent: every pred overlaps exactly its own gt
        ious = [iou_3d(p[0], g) for p, g in zip(preds, gts)]
        terr = [np.linalg.norm(np.array(p[0]["center"]) - np.array(g["center"]))
                for p, g in zip(preds, gts)]
        assert rep.tp == 20
        assert rep.mean_iou_3d == pytest.approx(np.mean(ious), abs=1e-9)
        assert rep.translation_error == pytest.approx(np.mean(terr), abs=1e-9)


def test_harness_rejects_unknown_axes():
    with pytest.raises(SpecError):
        from shapefit.metrics import run_harness

        run_harness({"axes": {"nope": [1]}})
    with pytest.raises(SpecError):
        from shapefit.metrics import run_harness

        run_harness({"axes": {"beams": [7]}})
