"""2-D Darcy benchmark: Gaussian random permeability, FD pressure solve, observations.

Fields are indexed ``a[i, j] = a(x_i, y_j)`` on the node lattice
``x_i = i / (R - 1)``; flattening is row-major, so lattice point ``i*R + j``
sits at ``(x_i, y_j)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._threads import thread_count
from .errors import NumericalError, ShapeError

log = logging.getLogger(__name__)

HIGH_PERMEABILITY = 12.0
LOW_PERMEABILITY = 3.0

# stream tags that keep per-sample random draws independent
_GRF_STREAM = 0
_OBS_STREAM = 1


def sample_seed(master_seed: int, index: int, stream: int) -> np.random.Generator:
    """Generator for one sample, a pure function of (master seed, index, stream)."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(index), int(stream))))


@dataclass(frozen=True)
class GRFSpec:
    resolution: int
    modes: int = 32
    shift: float = 9.0
    power: float = 2.0

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if self.modes < 1:
            raise ValueError("mode cutoff must be >= 1")
        if self.shift <= 0:
            raise ValueError("covariance shift must be positive")
        if self.power < 1:
            raise ValueError("covariance power must be >= 1")

    def eigenvalues(self) -> np.ndarray:
        """``lambda[m, n] = (pi^2 (m^2 + n^2) + shift)^-power`` for ``0 <= m, n <= modes``."""
        j = np.arange(self.modes + 1, dtype=np.float64)
        return (np.pi**2 * (j[:, None] ** 2 + j[None, :] ** 2) + self.shift) ** (-self.power)

    def basis(self) -> np.ndarray:
        """Neumann cosine eigenfunctions on the node lattice, ``[R, modes + 1]``."""
        x = np.linspace(0.0, 1.0, self.resolution)
        j = np.arange(self.modes + 1, dtype=np.float64)
        phi = np.sqrt(2.0) * np.cos(np.pi * x[:, None] * j[None, :])
        phi[:, 0] = 1.0
        return phi


def sample_grf(spec: GRFSpec, seed: int | np.random.Generator, coefficients: np.ndarray | None = None) -> np.ndarray:
    """Truncated Karhunen-Loeve draw of ``N(0, (-Laplace + shift)^-power)``.

    ``coefficients`` replaces the standard-normal draws, shape ``[modes+1, modes+1]``.
    """
    if coefficients is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        coefficients = rng.standard_normal((spec.modes + 1, spec.modes + 1))
    coefficients = np.asarray(coefficients, dtype=np.float64)
    phi = spec.basis()
    return phi @ (np.sqrt(spec.eigenvalues()) * coefficients) @ phi.T


def pushforward(mu: np.ndarray) -> np.ndarray:
    """Threshold a GRF to permeability: 12 where ``mu >= 0``, 3 elsewhere."""
    return np.where(np.asarray(mu) >= 0.0, HIGH_PERMEABILITY, LOW_PERMEABILITY)


# ---------------------------------------------------------------- FD solver


def darcy_operator(k: np.ndarray) -> sp.csr_matrix:
    """5-point FD matrix of ``-div(k grad h)`` on interior nodes, Dirichlet boundary.

    Face permeabilities are harmonic means of the two adjacent nodes.
    """
    k = np.asarray(k, dtype=np.float64)
    r = k.shape[0]
    if k.shape != (r, r) or r < 3:
        raise ShapeError(f"permeability must be a square grid with R >= 3, got {k.shape}")
    if np.any(k <= 0):
        raise ValueError("permeability must be positive everywhere")
    h2 = (1.0 / (r - 1)) ** 2
    # harmonic face means: fx[i, j] between (i, j) and (i+1, j); fy[i, j] between (i, j) and (i, j+1)
    fx = 2.0 * k[:-1, :] * k[1:, :] / (k[:-1, :] + k[1:, :]) / h2
    fy = 2.0 * k[:, :-1] * k[:, 1:] / (k[:, :-1] + k[:, 1:]) / h2
    n = r - 2
    idx = np.arange(n * n).reshape(n, n)
    ii, jj = np.meshgrid(np.arange(1, r - 1), np.arange(1, r - 1), indexing="ij")
    diag = fx[ii - 1, jj] + fx[ii, jj] + fy[ii, jj - 1] + fy[ii, jj]
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    # couplings to interior neighbours only; boundary values are zero
    for src, dst, coef in (
        (idx[1:, :], idx[:-1, :], fx[1 : r - 2, 1 : r - 1]),
        (idx[:-1, :], idx[1:, :], fx[1 : r - 2, 1 : r - 1]),
        (idx[:, 1:], idx[:, :-1], fy[1 : r - 1, 1 : r - 2]),
        (idx[:, :-1], idx[:, 1:], fy[1 : r - 1, 1 : r - 2]),
    ):
        rows.append(src.ravel())
        cols.append(dst.ravel())
        vals.append(-coef.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )


def conjugate_gradient(a, b: np.ndarray, rtol: float = 1e-10, max_iter: int | None = None) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG for SPD ``a``; stops when ``|r| <= rtol * |b|``."""
    n = b.size
    max_iter = max_iter or 10 * n
    inv_diag = 1.0 / a.diagonal()
    x = np.zeros(n)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, it
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NumericalError(f"CG did not reach relative residual {rtol:g} in {max_iter} iterations")


def solve_darcy(k: np.ndarray, forcing: float = 1.0, rtol: float = 1e-10, max_iter: int | None = None) -> np.ndarray:
    """Pressure ``h`` for ``-div(k grad h) = forcing``, ``h = 0`` on the boundary."""
    k = np.asarray(k, dtype=np.float64)
    r = k.shape[0]
    a = darcy_operator(k)
    n = r - 2
    x, _ = conjugate_gradient(a, np.full(n * n, float(forcing)), rtol=rtol, max_iter=max_iter)
    h = np.zeros((r, r))
    h[1:-1, 1:-1] = x.reshape(n, n)
    return h


def poisson_series(x, y, terms: int = 200) -> np.ndarray:
    """Exact ``-Laplace h = 1`` solution on the unit square, zero boundary.

    Uses ``x(1-x)/2`` minus a hyperbolic-cosine correction, which converges
    exponentially away from ``y in {0, 1}``.
    """
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    m = np.arange(1, 2 * terms, 2, dtype=np.float64)
    a = m * np.pi * np.abs(y - 0.5)
    b = m * np.pi / 2
    ratio = np.exp(a - b) * (1 + np.exp(-2 * a)) / (1 + np.exp(-2 * b))
    corr = (4.0 / (m**3 * np.pi**3) * np.sin(m * np.pi * x) * ratio).sum(axis=-1)
    return x[..., 0] * (1 - x[..., 0]) / 2 - corr


# ---------------------------------------------------------------- observations


def lattice(resolution: int) -> np.ndarray:
    """Uniform node lattice as ``[R*R, 2]`` points, row-major."""
    t = np.linspace(0.0, 1.0, resolution)
    xx, yy = np.meshgrid(t, t, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _banded(points: np.ndarray, rows: int) -> np.ndarray:
    """Sort points into ``rows`` bands by x, each band sorted by y."""
    k = len(points)
    by_x = points[np.argsort(points[:, 0], kind="stable")]
    bands = by_x.reshape(rows, k // rows, 2)
    order = np.argsort(bands[:, :, 1], axis=1, kind="stable")
    return np.take_along_axis(bands, order[:, :, None], axis=1).reshape(k, 2)


def sample_observations(resolution: int, count: int, mode: str, seed: int, index: int = 0, order: str = "banded") -> np.ndarray:
    """Observation coordinates ``[count, 2]`` for one sample.

    Aligned data uses the node lattice for every sample.  Unaligned data draws
    iid uniform points from a per-sample stream; ``order="banded"`` stores them
    so that point ``i*R + j`` lies in the i-th x-band (rank j by y), which
    keeps the packed ``[R, R, 2]`` trunk image spatially coherent (only when
    ``count == R*R``).  ``order="sampled"`` keeps draw order.
    """
    if mode == "aligned":
        if count != resolution * resolution:
            raise ShapeError(f"aligned observations need K = R^2 = {resolution * resolution}, got {count}")
        return lattice(resolution)
    if mode != "unaligned":
        raise ValueError(f"mode must be 'aligned' or 'unaligned', got {mode!r}")
    if count < 1:
        raise ValueError("observation count must be >= 1")
    if order not in ("banded", "sampled"):
        raise ValueError(f"unknown observation order {order!r}")
    pts = sample_seed(seed, index, _OBS_STREAM).random((count, 2))
    if order == "banded" and count == resolution * resolution:
        pts = _banded(pts, resolution)
    return pts


def interpolate_bilinear(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of lattice values ``h`` at ``points`` in the unit square."""
    h = np.asarray(h, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise ValueError("interpolation points must lie in [0, 1]^2")
    r = h.shape[0]
    u = points * (r - 1)
    i0 = np.minimum(np.floor(u).astype(np.intp), r - 2)
    t = u - i0
    ix, iy = i0[:, 0], i0[:, 1]
    tx, ty = t[:, 0], t[:, 1]
    return (
        h[ix, iy] * (1 - tx) * (1 - ty)
        + h[ix + 1, iy] * tx * (1 - ty)
        + h[ix, iy + 1] * (1 - tx) * ty
        + h[ix + 1, iy + 1] * tx * ty
    )


# ---------------------------------------------------------------- fields


@dataclass
class DarcyField:
    k: np.ndarray
    h: np.ndarray

    @property
    def resolution(self) -> int:
        return self.k.shape[0]


def generate_field(spec: GRFSpec, master_seed: int, index: int) -> DarcyField:
    mu = sample_grf(spec, sample_seed(master_seed, index, _GRF_STREAM))
    k = pushforward(mu)
    return DarcyField(k=k, h=solve_darcy(k))


def generate_fields(resolution: int, samples: int, seed: int, grf_modes: int = 32) -> list[DarcyField]:
    """``samples`` independent (k, h) pairs; identical for any worker count."""
    spec = GRFSpec(resolution=resolution, modes=grf_modes)
    workers = thread_count()
    log.info("generating %d Darcy fields at R=%d with %d worker(s)", samples, resolution, workers)
    if workers <= 1 or samples < 2:
        return [generate_field(spec, seed, i) for i in range(samples)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_field(spec, seed, i), range(samples)))
