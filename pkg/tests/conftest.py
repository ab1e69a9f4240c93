import contextlib
import socket
import threading
import time

import numpy as np
import pytest

from shapefit.prior import build_prior
from shapefit.sdf import CarParams, make_car_sdf, procedural_bank


@contextlib.contextmanager
def run_server(app):
    """Serve an ASGI app on an ephemeral localhost port in a thread."""
    import uvicorn

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started:
        if time.time() > deadline:
            raise TimeoutError("server did not start")
        time.sleep(0.02)
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=10)


@pytest.fixture(scope="session")
def bank79():
    return procedural_bank()


@pytest.fixture(scope="session")
def prior79(bank79):
    return build_prior(bank79, d=5)


@pytest.fixture(scope="session")
def small_bank():
    """Cheap 12-model bank on a coarse lattice for unit tests."""
    rng = np.random.default_rng(7)
    grids = []
    for _ in range(12):
        p = CarParams(
            length=rng.uniform(3.6, 5.0),
            width=rng.uniform(1.65, 1.95),
            body_height=rng.uniform(0.95, 1.25),
            cabin_frac=rng.uniform(0.4, 0.6),
            cabin_height=rng.uniform(0.35, 0.55),
            hood_drop=rng.uniform(0.05, 0.3),
            rounding=rng.uniform(0.04, 0.15),
        )
        grids.append(make_car_sdf(p, dims=(32, 16, 16), voxel_size=0.2))
    return grids


@pytest.fixture(scope="session")
def small_prior(small_bank):
    return build_prior(small_bank, d=4)


def sphere_grid(radius=1.0, dims=(48, 48, 48), voxel_size=0.05):
    """Analytic positive-interior sphere field sampled on a centered lattice."""
    from shapefit.sdf import SdfGrid, default_grid_geometry

    dims, voxel_size, origin = default_grid_geometry(dims, voxel_size)
    g = SdfGrid(dims=dims, voxel_size=voxel_size, origin=origin,
                values=np.zeros(int(np.prod(dims))))
    pts = g.voxel_centers()
    g.values[:] = radius - np.linalg.norm(pts, axis=1)
    return g


@pytest.fixture(scope="session")
def sphere48():
    return sphere_grid()
