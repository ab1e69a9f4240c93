import numpy as np
import pytest

from shapefit.errors import BadMagic, NonWatertightMesh, OutOfSupport, ParamOutOfRange
from shapefit.sdf import (
    EXTERIOR_SENTINEL,
    CarParams,
    SdfGrid,
    default_grid_geometry,
    interior_bounds,
    interior_z_extent,
    load_grid,
    make_car_sdf,
    mesh_to_sdf,
    sample,
    save_grid,
    spatial_gradient,
)

from conftest import sphere_grid


def constant_grid(c, dims=(8, 8, 8), voxel=0.5):
    dims, voxel, origin = default_grid_geometry(dims, voxel)
    return SdfGrid(dims=dims, voxel_size=voxel, origin=origin,
                   values=np.full(int(np.prod(dims)), float(c)))


def linear_grid(a, b, dims=(10, 9, 8), voxel=0.3):
    dims, voxel, origin = default_grid_geometry(dims, voxel)
    g = SdfGrid(dims=dims, voxel_size=voxel, origin=origin,
                values=np.zeros(int(np.prod(dims))))
    g.values[:] = g.voxel_centers() @ np.asarray(a) + b
    return g


def icosphere(radius=1.0, subdivisions=2):
    """Subdivided icosahedron triangle list (watertight oracle mesh)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    tris = [tuple(verts[i] for i in f) for f in faces]
    for _ in range(subdivisions):
        new = []
        for a, b, c in tris:
            ab = (a + b) / 2
            bc = (b + c) / 2
            ca = (c + a) / 2
            ab /= np.linalg.norm(ab)
            bc /= np.linalg.norm(bc)
            ca /= np.linalg.norm(ca)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = new
    return radius * np.array(tris)


class TestSample:
    def test_constant_field(self):
        g = constant_grid(2.5)
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1.5, 1.5, (100, 3))
        assert np.allclose(sample(g, pts), 2.5)

    def test_sphere_against_analytic(self, sphere48):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1.0, 1.0, (2000, 3))
        got = sample(sphere48, pts)
        want = 1.0 - np.linalg.norm(pts, axis=1)
        # trilinear error bounded well below one voxel for this smooth field
        assert np.abs(got - want).max() < sphere48.voxel_size
        assert sample(sphere48, (0.0, 0.0, 0.0)) == pytest.approx(1.0, abs=sphere48.voxel_size)

    def test_exterior_sentinel(self, sphere48):
        span = sphere48.support_max[0] - sphere48.support_min[0]
        assert sample(sphere48, (sphere48.support_max[0] + span, 0, 0)) == EXTERIOR_SENTINEL
        assert sample(sphere48, (0, 0, -10.0)) == EXTERIOR_SENTINEL

    def test_continuity_lipschitz(self, sphere48):
        v3 = sphere48.values3d
        jumps = [
            np.abs(np.diff(v3, axis=a)).max() for a in range(3)
        ]
        lip = max(jumps) / sphere48.voxel_size * np.sqrt(3)
        rng = np.random.default_rng(2)
        x = rng.uniform(-0.9, 0.9, (500, 3))
        eps = 1e-3
        delta = rng.normal(size=(500, 3))
        delta *= eps / np.linalg.norm(delta, axis=1, keepdims=True)
        assert np.all(np.abs(sample(sphere48, x + delta) - sample(sphere48, x)) <= lip * eps + 1e-12)


class TestSpatialGradient:
    def test_linear_field(self):
        a = np.array([0.7, -1.1, 0.4])
        g = linear_grid(a, 0.2)
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.6, 0.6, (200, 3))
        assert np.allclose(spatial_gradient(g, pts), a, atol=1e-9)

    def test_constant_field(self):
        g = constant_grid(1.0)
        assert np.allclose(spatial_gradient(g, (0.1, 0.2, 0.3)), 0.0)

    def test_sphere_inward_gradient(self, sphere48):
        # finite differences of `sample` as the oracle
        x = np.array([0.5, 0.0, 0.0])
        h = 1e-4
        fd = np.array(
            [
                (sample(sphere48, x + h * e) - sample(sphere48, x - h * e)) / (2 * h)
                for e in np.eye(3)
            ]
        )
        got = spatial_gradient(sphere48, x)
        assert np.allclose(got, fd, atol=1e-6)
        assert np.allclose(got, [-1, 0, 0], atol=0.05)

    def test_matches_fd_at_random_points(self, sphere48):
        rng = np.random.default_rng(4)
        h = 1e-5
        for _ in range(50):
            x = rng.uniform(-0.8, 0.8, 3)
            # keep both FD evaluation points inside one cell
            gcoord = (x - sphere48.origin) / sphere48.voxel_size
            if np.any(np.abs(gcoord - np.round(gcoord)) * sphere48.voxel_size < 2 * h):
                continue
            fd = np.array(
                [
                    (sample(sphere48, x + h * e) - sample(sphere48, x - h * e)) / (2 * h)
                    for e in np.eye(3)
                ]
            )
            assert np.allclose(spatial_gradient(sphere48, x), fd, atol=1e-6)

    def test_out_of_support(self, sphere48):
        near_edge = sphere48.support_max - 0.4 * sphere48.voxel_size
        with pytest.raises(OutOfSupport):
            spatial_gradient(sphere48, near_edge)


class TestCarSdf:
    def test_degenerates_to_box(self):
        p = CarParams(length=4.4, width=1.8, body_height=1.2,
                      cabin_frac=0.0, cabin_height=0.3, hood_drop=0.0, rounding=0.0)
        g = make_car_sdf(p)
        rng = np.random.default_rng(5)
        pts = rng.uniform([-3.0, -1.5, -1.5], [3.0, 1.5, 1.5], (10_000, 3))
        inside_box = np.all(
            np.abs(pts / [4.4 / 2, 1.8 / 2, 1.2 / 2]) <= 1.0, axis=1
        )
        phi = sample(g, pts)
        near_surface = np.min(
            np.abs(np.abs(pts) - [2.2, 0.9, 0.6]), axis=1
        ) < 0.6 * g.voxel_size
        check = ~near_surface
        assert np.array_equal(phi[check] >= 0, inside_box[check])

    def test_origin_is_interior(self):
        rng = np.random.default_rng(6)
        from shapefit.sdf import random_car_params

        for _ in range(10):
            g = make_car_sdf(random_car_params(rng))
            assert sample(g, (0.0, 0.0, 0.0)) > 0

    def test_z_extent_matches_params(self):
        p = CarParams(length=4.6, width=1.85, body_height=1.1,
                      cabin_frac=0.5, cabin_height=0.45, hood_drop=0.2, rounding=0.08)
        g = make_car_sdf(p)
        assert interior_z_extent(g) == pytest.approx(1.1 + 0.45, abs=g.voxel_size)
        p2 = CarParams(length=4.6, width=1.85, body_height=1.1,
                       cabin_frac=0.0, cabin_height=0.45, hood_drop=0.2, rounding=0.08)
        g2 = make_car_sdf(p2)
        assert interior_z_extent(g2) == pytest.approx(1.1, abs=g2.voxel_size)

    def test_param_validation(self):
        with pytest.raises(ParamOutOfRange):
            CarParams(length=6.0, width=1.8, body_height=1.2,
                      cabin_frac=0.5, cabin_height=0.4, hood_drop=0.1, rounding=0.05)

    def test_grid_too_small(self):
        p = CarParams(length=5.2, width=2.0, body_height=1.3,
                      cabin_frac=0.5, cabin_height=0.5, hood_drop=0.1, rounding=0.05)
        with pytest.raises(ParamOutOfRange):
            make_car_sdf(p, dims=(32, 16, 16), voxel_size=0.1)

    def test_eikonal_sanity_near_surface(self):
        p = CarParams(length=4.5, width=1.8, body_height=1.15,
                      cabin_frac=0.5, cabin_height=0.42, hood_drop=0.18, rounding=0.1)
        g = make_car_sdf(p)
        band = near_surface_points(g)
        norms = np.linalg.norm(spatial_gradient(g, band), axis=1)
        frac = np.mean((norms >= 0.5) & (norms <= 1.5))
        assert frac >= 0.95


def near_surface_points(g, max_count=4000):
    centers = g.voxel_centers()
    phi = g.values
    lo = g.support_min + 1.5 * g.voxel_size
    hi = g.support_max - 1.5 * g.voxel_size
    inner = np.all((centers >= lo) & (centers <= hi), axis=1)
    band = centers[(np.abs(phi) < 2 * g.voxel_size) & inner]
    return band[:max_count]


class TestMeshToSdf:
    def test_icosphere_matches_analytic(self):
        tris = icosphere(radius=0.8, subdivisions=2)
        g = mesh_to_sdf(tris, dims=(24, 24, 24), voxel_size=0.1)
        centers = g.voxel_centers()
        want = 0.8 - np.linalg.norm(centers, axis=1)
        # icosphere subdiv 2 is a faceted approximation; allow 1.5 voxels
        assert np.abs(g.values - want).max() < 1.5 * g.voxel_size

    def test_box_mesh_signs(self):
        half = np.array([0.8, 0.5, 0.4])
        v = np.array(
            [[sx * half[0], sy * half[1], sz * half[2]]
             for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        )
        # 12 triangles, outward orientation not required by the parity test
        quads = [
            (0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
            (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3),
        ]
        tris = []
        for a, b, c, d in quads:
            tris.append((v[a], v[b], v[c]))
            tris.append((v[a], v[c], v[d]))
        tris = np.array(tris)
        g = mesh_to_sdf(tris, dims=(20, 16, 14), voxel_size=0.13)
        centers = g.voxel_centers()
        on_face = np.any(np.abs(np.abs(centers) - half) < 1e-9, axis=1)
        inside = np.all(np.abs(centers) < half, axis=1)
        assert np.array_equal(g.values[~on_face] >= 0, inside[~on_face])

    def test_open_mesh_rejected(self):
        tris = icosphere(radius=0.8, subdivisions=1)[:-1]  # drop one face
        with pytest.raises(NonWatertightMesh):
            mesh_to_sdf(tris, dims=(24, 24, 24), voxel_size=0.1)

    def test_eikonal_sanity(self):
        tris = icosphere(radius=0.8, subdivisions=2)
        g = mesh_to_sdf(tris, dims=(24, 24, 24), voxel_size=0.1)
        band = near_surface_points(g)
        norms = np.linalg.norm(spatial_gradient(g, band), axis=1)
        assert np.mean((norms >= 0.5) & (norms <= 1.5)) >= 0.95


class TestFlattening:
    def test_flat_order_round_trip(self):
        rng = np.random.default_rng(7)
        dims = (5, 4, 3)
        vals = rng.normal(size=np.prod(dims))
        g = SdfGrid(dims=dims, voxel_size=0.2, origin=(-0.5, -0.4, -0.3), values=vals.copy())
        # index = i + l*(j + w*k)
        l, w, h = dims
        for i, j, k in [(0, 0, 0), (4, 3, 2), (2, 1, 1), (1, 0, 2)]:
            assert g.values3d[i, j, k] == vals[i + l * (j + w * k)]
        # reflatten bit-for-bit
        assert np.array_equal(g.values3d.reshape(-1, order="F"), vals)

    def test_interior_bounds_box(self):
        p = CarParams(length=4.0, width=1.8, body_height=1.2,
                      cabin_frac=0.0, cabin_height=0.3, hood_drop=0.0, rounding=0.0)
        g = make_car_sdf(p)
        b = interior_bounds(g)
        assert np.allclose(b[:, 1] - b[:, 0], [4.0, 1.8, 1.2], atol=g.voxel_size)


class TestGridIO:
    def test_round_trip_bytes(self, tmp_path, sphere48):
        p1 = tmp_path / "a.slfg"
        p2 = tmp_path / "b.slfg"
        save_grid(sphere48, p1)
        g = load_grid(p1)
        save_grid(g, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert g.dims == sphere48.dims
        assert g.voxel_size == pytest.approx(sphere48.voxel_size)

    def test_truncated_rejected(self, tmp_path, sphere48):
        p = tmp_path / "t.slfg"
        save_grid(sphere48, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(BadMagic):
            load_grid(p)
        p.write_bytes(b"JUNK" + data[4:])
        with pytest.raises(BadMagic):
            load_grid(p)
