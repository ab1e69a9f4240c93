"""PCA latent shape space over a bank of SDF grids.

The prior stores the bank mean (flat n-vector) and an orthonormal n x d
basis whose columns are the top principal directions of the centered bank.
Encoding/decoding are the plain linear maps s = V^T (m - mean) and
m = V s + mean; no whitening is applied, so latent coordinates keep the
singular-value scale of the bank.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DegenerateBank,
    InsufficientModels,
    LengthMismatch,
    MetaMismatch,
    VersionMismatch,
)
from .sdf import SdfGrid, grid_meta_bytes, parse_grid_meta

_SLFP_MAGIC = b"SLFP"
_SLFP_VERSION = 1

DEFAULT_LATENT_DIM = 5


@dataclass
class ShapePrior:
    """Mean + orthonormal basis mapping shape codes to SDF grids."""

    mean: np.ndarray  # (n,)
    basis: np.ndarray  # (n, d), orthonormal columns
    sigma: np.ndarray  # (d,) per-component scale (std of bank codes)
    dims: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    model_count: int

    d: int = field(init=False)

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64).reshape(-1)
        self.basis = np.ascontiguousarray(self.basis, dtype=np.float64)
        self.sigma = np.ascontiguousarray(self.sigma, dtype=np.float64).reshape(-1)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(x) for x in self.dims)
        n = self.dims[0] * self.dims[1] * self.dims[2]
        if self.mean.size != n:
            raise LengthMismatch(f"mean length {self.mean.size} != grid size {n}")
        if self.basis.shape[0] != n:
            raise LengthMismatch(f"basis rows {self.basis.shape[0]} != grid size {n}")
        self.d = int(self.basis.shape[1])
        if self.sigma.size != self.d:
            raise LengthMismatch("sigma length != latent dimension")
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(self.d), atol=1e-6):
            raise ValueError("basis columns are not orthonormal")

    @property
    def n(self) -> int:
        return self.mean.size

    def grid_meta(self) -> tuple:
        return (self.dims, round(float(self.voxel_size), 12), tuple(np.round(self.origin, 12)))


def zero_code(prior: ShapePrior) -> np.ndarray:
    return np.zeros(prior.d, dtype=np.float64)


def build_prior(bank: list[SdfGrid], d: int = DEFAULT_LATENT_DIM) -> ShapePrior:
    """PCA of the flattened bank via thin SVD of the centered data matrix."""
    if len(bank) < d + 1:
        raise InsufficientModels(f"need at least {d + 1} models for d={d}, got {len(bank)}")
    meta = bank[0].meta()
    for g in bank[1:]:
        if g.meta() != meta:
            raise MetaMismatch(f"bank grid meta {g.meta()} != {meta}")

    data = np.stack([g.values for g in bank], axis=1)  # (n, count)
    mean = data.mean(axis=1)
    centered = data - mean[:, None]
    # thin SVD: centered = U S Vt with U (n, count)
    U, S, _ = np.linalg.svd(centered, full_matrices=False)
    if S[d - 1] <= 1e-9 * max(1.0, S[0]):
        raise DegenerateBank(f"bank variance vanishes before component {d}")
    basis = U[:, :d]
    # deterministic sign: largest-magnitude entry of each column positive
    for k in range(d):
        j = int(np.argmax(np.abs(basis[:, k])))
        if basis[j, k] < 0:
            basis[:, k] = -basis[:, k]
    sigma = S[:d] / np.sqrt(max(len(bank) - 1, 1))
    return ShapePrior(
        mean=mean,
        basis=basis,
        sigma=sigma,
        dims=bank[0].dims,
        voxel_size=bank[0].voxel_size,
        origin=bank[0].origin,
        model_count=len(bank),
    )


def encode(prior: ShapePrior, m: np.ndarray) -> np.ndarray:
    """Shape code of a flat grid-value vector: s = V^T (m - mean)."""
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if m.size != prior.n:
        raise LengthMismatch(f"vector length {m.size} != prior n {prior.n}")
    return prior.basis.T @ (m - prior.mean)


def decode(prior: ShapePrior, s: np.ndarray) -> SdfGrid:
    """Grid for a shape code: values = V s + mean, with the prior's geometry."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size != prior.d:
        raise LengthMismatch(f"code length {s.size} != d {prior.d}")
    values = prior.basis @ s + prior.mean
    return SdfGrid(dims=prior.dims, voxel_size=prior.voxel_size, origin=prior.origin, values=values)


def save_prior(prior: ShapePrior, path) -> None:
    """Write the SLFP binary blob (little-endian, f32 payload)."""
    fake_grid = SdfGrid(
        dims=prior.dims,
        voxel_size=prior.voxel_size,
        origin=prior.origin,
        values=np.zeros(prior.n),
    )
    with open(path, "wb") as f:
        f.write(_SLFP_MAGIC)
        f.write(struct.pack("<HHH", _SLFP_VERSION, prior.d, prior.model_count))
        f.write(grid_meta_bytes(fake_grid))
        f.write(prior.mean.astype("<f4").tobytes())
        f.write(prior.basis.astype("<f4").tobytes(order="F"))  # column-major
        f.write(prior.sigma.astype("<f4").tobytes())


def load_prior(path) -> ShapePrior:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != _SLFP_MAGIC:
        raise BadMagic(f"{path}: not an SLFP file")
    version, d, model_count = struct.unpack_from("<HHH", buf, 4)
    if version != _SLFP_VERSION:
        raise VersionMismatch(f"{path}: SLFP version {version}")
    dims, voxel, origin, off = parse_grid_meta(buf, 10)
    n = dims[0] * dims[1] * dims[2]
    expect = off + 4 * (n + n * d + d)
    if len(buf) != expect:
        raise BadMagic(f"{path}: payload size {len(buf)} != expected {expect}")
    mean = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64)
    off += 4 * n
    basis = (
        np.frombuffer(buf, dtype="<f4", count=n * d, offset=off)
        .astype(np.float64)
        .reshape((n, d), order="F")
    )
    off += 4 * n * d
    sigma = np.frombuffer(buf, dtype="<f4", count=d, offset=off).astype(np.float64)
    prior = ShapePrior(
        mean=mean,
        basis=basis,
        sigma=sigma,
        dims=dims,
        voxel_size=voxel,
        origin=origin,
        model_count=model_count,
    )
    return prior
