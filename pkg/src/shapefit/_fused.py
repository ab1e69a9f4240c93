"""Numba-fused inner loops of the soft renderer and the hit-point march.

The per-sample work (ray sampling, trilinear interpolation, softplus
accumulation) dominates fit time; materializing it as torch intermediates is
memory-bound. These kernels do one pass per ray in registers. The backward
of the render kernel is hand-written and is validated against finite
differences by the test suite; sample positions, cell/tie conventions, and
the exterior sentinel match shapefit._engine.trilinear exactly.
"""

from __future__ import annotations

import numba
import numpy as np
import torch

from .sdf import EXTERIOR_SENTINEL


@numba.njit(cache=True, fastmath=False)
def _ray_logmiss_fwd(values, l, w, h, ox, oy, oz, voxel,
                     ro, rd, t0, t1, seg, zeta, n_samples, out):
    R = ro.shape[0]
    n = l * w * h
    for r in range(R):
        lo = t0[r]
        span = t1[r] - lo
        if span <= 0.0:
            continue
        base = seg[r] * n
        acc = 0.0
        for j in range(n_samples):
            t = lo + span * (j + 0.5) / n_samples
            x = ro[r, 0] + t * rd[r, 0]
            y = ro[r, 1] + t * rd[r, 1]
            z = ro[r, 2] + t * rd[r, 2]
            gx = (x - ox) / voxel
            gy = (y - oy) / voxel
            gz = (z - oz) / voxel
            if gx < 0.0 or gx > l - 1.0 or gy < 0.0 or gy > w - 1.0 or gz < 0.0 or gz > h - 1.0:
                continue  # sentinel: softplus underflows to exactly 0
            i0 = min(int(gx), l - 2)
            j0 = min(int(gy), w - 2)
            k0 = min(int(gz), h - 2)
            fx = gx - i0
            fy = gy - j0
            fz = gz - k0
            c = base + i0 + l * (j0 + w * k0)
            v000 = values[c]
            v100 = values[c + 1]
            v010 = values[c + l]
            v110 = values[c + l + 1]
            v001 = values[c + l * w]
            v101 = values[c + l * w + 1]
            v011 = values[c + l * w + l]
            v111 = values[c + l * w + l + 1]
            c00 = v000 * (1 - fx) + v100 * fx
            c10 = v010 * (1 - fx) + v110 * fx
            c01 = v001 * (1 - fx) + v101 * fx
            c11 = v011 * (1 - fx) + v111 * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            phi = c0 * (1 - fz) + c1 * fz
            a = zeta * phi
            # -softplus(a); beyond +-37 the f64 result equals the asymptote
            # exactly (the correction term falls below half an ulp)
            if a > 37.0:
                acc -= a
            elif a > 0.0:
                acc -= a + np.log1p(np.exp(-a))
            elif a > -37.0:
                acc -= np.log1p(np.exp(a))
        out[r] = acc


@numba.njit(cache=True, fastmath=False)
def _ray_logmiss_bwd(values, l, w, h, ox, oy, oz, voxel,
                     ro, rd, t0, t1, seg, zeta, n_samples, g_out,
                     g_values, g_ro, g_rd, g_t0, g_t1):
    R = ro.shape[0]
    n = l * w * h
    for r in range(R):
        go = g_out[r]
        if go == 0.0:
            continue
        lo = t0[r]
        span = t1[r] - lo
        if span <= 0.0:
            continue
        base = seg[r] * n
        for j in range(n_samples):
            frac = (j + 0.5) / n_samples
            t = lo + span * frac
            x = ro[r, 0] + t * rd[r, 0]
            y = ro[r, 1] + t * rd[r, 1]
            z = ro[r, 2] + t * rd[r, 2]
            gx = (x - ox) / voxel
            gy = (y - oy) / voxel
            gz = (z - oz) / voxel
            if gx < 0.0 or gx > l - 1.0 or gy < 0.0 or gy > w - 1.0 or gz < 0.0 or gz > h - 1.0:
                continue
            i0 = min(int(gx), l - 2)
            j0 = min(int(gy), w - 2)
            k0 = min(int(gz), h - 2)
            fx = gx - i0
            fy = gy - j0
            fz = gz - k0
            c = base + i0 + l * (j0 + w * k0)
            v000 = values[c]
            v100 = values[c + 1]
            v010 = values[c + l]
            v110 = values[c + l + 1]
            v001 = values[c + l * w]
            v101 = values[c + l * w + 1]
            v011 = values[c + l * w + l]
            v111 = values[c + l * w + l + 1]
            c00 = v000 * (1 - fx) + v100 * fx
            c10 = v010 * (1 - fx) + v110 * fx
            c01 = v001 * (1 - fx) + v101 * fx
            c11 = v011 * (1 - fx) + v111 * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            phi = c0 * (1 - fz) + c1 * fz
            a = zeta * phi
            if a > 37.0:
                sig = 1.0
            elif a >= 0.0:
                sig = 1.0 / (1.0 + np.exp(-a))
            elif a > -37.0:
                ea = np.exp(a)
                sig = ea / (1.0 + ea)
            else:
                continue  # gradient below one ulp of the accumulators
            gphi = -go * zeta * sig
            # corner gradients
            w00 = (1 - fy) * (1 - fz)
            w10 = fy * (1 - fz)
            w01 = (1 - fy) * fz
            w11 = fy * fz
            g_values[c] += gphi * (1 - fx) * w00
            g_values[c + 1] += gphi * fx * w00
            g_values[c + l] += gphi * (1 - fx) * w10
            g_values[c + l + 1] += gphi * fx * w10
            g_values[c + l * w] += gphi * (1 - fx) * w01
            g_values[c + l * w + 1] += gphi * fx * w01
            g_values[c + l * w + l] += gphi * (1 - fx) * w11
            g_values[c + l * w + l + 1] += gphi * fx * w11
            # spatial gradient of the interpolant
            dgx = ((v100 - v000) * w00 + (v110 - v010) * w10
                   + (v101 - v001) * w01 + (v111 - v011) * w11) / voxel
            dc0 = (c10 - c00) * (1 - fz)
            dc1 = (c11 - c01) * fz
            dgy = (dc0 + dc1) / voxel
            dgz = (c1 - c0) / voxel
            gpx = gphi * dgx
            gpy = gphi * dgy
            gpz = gphi * dgz
            g_ro[r, 0] += gpx
            g_ro[r, 1] += gpy
            g_ro[r, 2] += gpz
            g_rd[r, 0] += gpx * t
            g_rd[r, 1] += gpy * t
            g_rd[r, 2] += gpz * t
            gt = gpx * rd[r, 0] + gpy * rd[r, 1] + gpz * rd[r, 2]
            g_t0[r] += gt * (1.0 - frac)
            g_t1[r] += gt * frac


@numba.njit(cache=True, fastmath=False)
def _first_hit_march(values, l, w, h, ox, oy, oz, voxel,
                     ro, rd, t0, t1, seg, coarse, bisect, hit, t_star):
    """First phi >= 0 crossing per ray, written into (hit u8, t*)."""
    R = ro.shape[0]
    n = l * w * h
    for r in range(R):
        lo = t0[r]
        span = t1[r] - lo
        if span <= 0.0:
            continue
        base = seg[r] * n

        prev_phi = -1.0
        prev_t = lo
        found = False
        t_hi = lo
        phi_hi = -1.0
        for j in range(coarse):
            t = lo + span * (j + 0.5) / coarse
            phi = _phi_at(values, base, l, w, h, ox, oy, oz, voxel,
                          ro[r, 0] + t * rd[r, 0], ro[r, 1] + t * rd[r, 1],
                          ro[r, 2] + t * rd[r, 2])
            if phi >= 0.0:
                found = True
                t_hi = t
                phi_hi = phi
                break
            prev_phi = phi
            prev_t = t
        if not found:
            continue
        t_lo_b = prev_t
        phi_lo = prev_phi
        for _ in range(bisect):
            tm = 0.5 * (t_lo_b + t_hi)
            pm = _phi_at(values, base, l, w, h, ox, oy, oz, voxel,
                         ro[r, 0] + tm * rd[r, 0], ro[r, 1] + tm * rd[r, 1],
                         ro[r, 2] + tm * rd[r, 2])
            if pm >= 0.0:
                t_hi = tm
                phi_hi = pm
            else:
                t_lo_b = tm
                phi_lo = pm
        denom = phi_hi - phi_lo
        if abs(denom) > 1e-15:
            alpha = -phi_lo / denom
            if alpha < 0.0:
                alpha = 0.0
            elif alpha > 1.0:
                alpha = 1.0
        else:
            alpha = 0.0
        hit[r] = 1
        t_star[r] = t_lo_b + alpha * (t_hi - t_lo_b)


@numba.njit(cache=True, inline="always")
def _phi_at(values, base, l, w, h, ox, oy, oz, voxel, x, y, z):
    gx = (x - ox) / voxel
    gy = (y - oy) / voxel
    gz = (z - oz) / voxel
    if gx < 0.0 or gx > l - 1.0 or gy < 0.0 or gy > w - 1.0 or gz < 0.0 or gz > h - 1.0:
        return EXTERIOR_SENTINEL
    i0 = min(int(gx), l - 2)
    j0 = min(int(gy), w - 2)
    k0 = min(int(gz), h - 2)
    fx = gx - i0
    fy = gy - j0
    fz = gz - k0
    c = base + i0 + l * (j0 + w * k0)
    c00 = values[c] * (1 - fx) + values[c + 1] * fx
    c10 = values[c + l] * (1 - fx) + values[c + l + 1] * fx
    c01 = values[c + l * w] * (1 - fx) + values[c + l * w + 1] * fx
    c11 = values[c + l * w + l] * (1 - fx) + values[c + l * w + l + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


class RayLogMiss(torch.autograd.Function):
    """log prod_j 1/(exp(zeta*phi_j)+1) accumulated along each ray."""

    @staticmethod
    def forward(ctx, values, ro, rd, t0, t1, seg, dims, origin, voxel, zeta, n_samples):
        l, w, h = dims
        v = values.detach().contiguous().view(-1).numpy()
        out = np.zeros(ro.shape[0], dtype=v.dtype)
        _ray_logmiss_fwd(
            v, l, w, h,
            float(origin[0]), float(origin[1]), float(origin[2]), float(voxel),
            np.ascontiguousarray(ro.detach().numpy()),
            np.ascontiguousarray(rd.detach().numpy()),
            np.ascontiguousarray(t0.detach().numpy()),
            np.ascontiguousarray(t1.detach().numpy()),
            np.ascontiguousarray(seg.numpy()), float(zeta), int(n_samples), out,
        )
        ctx.save_for_backward(values, ro, rd, t0, t1, seg)
        ctx.meta = (dims, tuple(float(o) for o in origin), float(voxel),
                    float(zeta), int(n_samples))
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, g_out):
        values, ro, rd, t0, t1, seg = ctx.saved_tensors
        dims, origin, voxel, zeta, n_samples = ctx.meta
        l, w, h = dims
        v = values.detach().contiguous().view(-1).numpy()
        ro_np = np.ascontiguousarray(ro.detach().numpy())
        rd_np = np.ascontiguousarray(rd.detach().numpy())
        t0_np = np.ascontiguousarray(t0.detach().numpy())
        t1_np = np.ascontiguousarray(t1.detach().numpy())
        gv = np.zeros_like(v)
        gro = np.zeros_like(ro_np)
        grd = np.zeros_like(rd_np)
        gt0 = np.zeros_like(t0_np)
        gt1 = np.zeros_like(t1_np)
        _ray_logmiss_bwd(
            v, l, w, h, origin[0], origin[1], origin[2], voxel,
            ro_np, rd_np, t0_np, t1_np,
            np.ascontiguousarray(seg.numpy()), zeta, n_samples,
            np.ascontiguousarray(g_out.detach().numpy()),
            gv, gro, grd, gt0, gt1,
        )
        return (
            torch.from_numpy(gv).view_as(values),
            torch.from_numpy(gro),
            torch.from_numpy(grd),
            torch.from_numpy(gt0),
            torch.from_numpy(gt1),
            None, None, None, None, None, None,
        )


def ray_logmiss(values, ro, rd, t0, t1, seg, dims, origin, voxel, zeta, n_samples):
    return RayLogMiss.apply(values, ro, rd, t0, t1, seg, dims, origin, voxel,
                            zeta, n_samples)


def first_hit_march(values, ro, rd, t0, t1, seg, dims, origin, voxel,
                    coarse=32, bisect=6):
    l, w, h = dims
    v = values.detach().contiguous().view(-1).numpy()
    hit = np.zeros(ro.shape[0], dtype=np.uint8)
    t_star = np.zeros(ro.shape[0], dtype=v.dtype)
    _first_hit_march(
        v, l, w, h, float(origin[0]), float(origin[1]), float(origin[2]), float(voxel),
        np.ascontiguousarray(ro.detach().numpy()),
        np.ascontiguousarray(rd.detach().numpy()),
        np.ascontiguousarray(t0.detach().numpy()),
        np.ascontiguousarray(t1.detach().numpy()),
        np.ascontiguousarray(seg.numpy()),
        int(coarse), int(bisect), hit, t_star,
    )
    return torch.from_numpy(hit.astype(bool)), torch.from_numpy(t_star)
