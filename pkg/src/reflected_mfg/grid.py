"""Cell-centred 1-D grids, Neumann-aware finite differences and discrete measures.

Measures are stored as node weights (not densities) everywhere; the density
is ``weights / h``.  Homogeneous Neumann conditions are imposed through
mirrored ghost nodes, ``u[-1] = u[0]`` and ``u[n] = u[n-1]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reflected_mfg.errors import InvalidArgumentError, InvariantViolation

MIN_CELLS = 8
MASS_TOL = 1e-12


@dataclass(frozen=True)
class Grid1D:
    n_cells: int
    lo: float = 0.0
    hi: float = 1.0
    h: float = field(init=False, compare=False)
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_cells < MIN_CELLS:
            raise InvalidArgumentError(f"need at least {MIN_CELLS} cells, got {self.n_cells}")
        if not self.lo < self.hi:
            raise InvalidArgumentError(f"empty domain [{self.lo}, {self.hi}]")
        h = (self.hi - self.lo) / self.n_cells
        object.__setattr__(self, "h", h)
        nodes = self.lo + (np.arange(self.n_cells) + 0.5) * h
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def faces(self) -> np.ndarray:
        """Interior cell faces, one between each pair of neighbouring nodes."""
        return self.lo + np.arange(1, self.n_cells) * self.h

    def uniform(self) -> np.ndarray:
        return np.full(self.n_cells, 1.0 / self.n_cells)

    def node_index(self, x: float) -> int:
        """Index of the node closest to ``x``."""
        k = int(np.floor((x - self.lo) / self.h))
        return min(max(k, 0), self.n_cells - 1)


def build_grid(n_cells: int, domain: tuple[float, float] = (0.0, 1.0)) -> Grid1D:
    return Grid1D(int(n_cells), float(domain[0]), float(domain[1]))


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise InvalidArgumentError(f"t0={self.t0} must be below T={self.T}")
        if self.n_steps < 1:
            raise InvalidArgumentError("n_steps must be positive")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Step index of a time on the grid; off-grid times are rejected."""
        k = (t - self.t0) / self.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-9 or not 0 <= kr <= self.n_steps:
            raise InvalidArgumentError(f"time {t} is not on the time grid")
        return kr

    def refined(self, factor: int) -> TimeGrid:
        return TimeGrid(self.t0, self.T, self.n_steps * factor)


class GridMeasure:
    """Probability measure carried by the nodes of a grid."""

    __slots__ = ("weights",)

    def __init__(self, weights, *, check: bool = True):
        w = np.asarray(weights, dtype=float)
        if check:
            validate_weights(w)
        self.weights = w

    def density(self, grid: Grid1D) -> np.ndarray:
        return self.weights / grid.h

    def mean(self, grid: Grid1D) -> float:
        return float(self.weights @ grid.nodes)

    @classmethod
    def uniform(cls, grid: Grid1D) -> GridMeasure:
        return cls(grid.uniform())

    @classmethod
    def dirac(cls, grid: Grid1D, k: int) -> GridMeasure:
        w = np.zeros(grid.n_cells)
        w[k] = 1.0
        return cls(w)

    @classmethod
    def from_density(cls, grid: Grid1D, values) -> GridMeasure:
        w = np.clip(np.asarray(values, dtype=float), 0.0, None)
        return cls(w / w.sum())

    def __repr__(self):
        return f"GridMeasure(n={self.weights.size}, mean_weight={self.weights.mean():.3g})"


def validate_weights(w: np.ndarray, tol: float = MASS_TOL) -> None:
    """Raise unless every row of ``w`` is a probability vector."""
    if not np.all(np.isfinite(w)):
        raise InvariantViolation("measure has non-finite weights")
    if np.any(w < 0.0):
        raise InvariantViolation(f"measure has negative weight {w.min():.3e}")
    mass = w.sum(axis=-1)
    if np.any(np.abs(mass - 1.0) > tol):
        raise InvariantViolation(f"measure mass {np.ravel(mass)[0]:.15g} differs from 1")


def as_weights(m) -> np.ndarray:
    return m.weights if isinstance(m, GridMeasure) else np.asarray(m, dtype=float)


# --- differential operators -------------------------------------------------


def gradient(field, grid: Grid1D, axis: int = -1) -> np.ndarray:
    """Central differences with mirrored ghosts along ``axis``.

    At a boundary node the ghost equals the node itself, so the stencil reads
    ``(u[1] - u[0]) / 2h``; it vanishes for fields that satisfy the discrete
    Neumann condition.
    """
    u = np.asarray(field, dtype=float)
    if u.shape[axis] != grid.n_cells:
        raise InvalidArgumentError(f"field has {u.shape[axis]} entries, grid has {grid.n_cells}")
    u = np.moveaxis(u, axis, -1)
    g = np.empty_like(u)
    g[..., 1:-1] = u[..., 2:] - u[..., :-2]
    g[..., 0] = u[..., 1] - u[..., 0]
    g[..., -1] = u[..., -1] - u[..., -2]
    g /= 2.0 * grid.h
    return np.moveaxis(g, -1, axis)


def face_gradient(field, grid: Grid1D) -> np.ndarray:
    """One-sided differences on the ``n_cells - 1`` interior faces (last axis)."""
    u = np.asarray(field, dtype=float)
    return (u[..., 1:] - u[..., :-1]) / grid.h


def second_difference(field, grid: Grid1D, axis: int = -1) -> np.ndarray:
    u = np.moveaxis(np.asarray(field, dtype=float), axis, -1)
    ext = np.concatenate([u[..., :1], u, u[..., -1:]], axis=-1)
    d2 = (ext[..., 2:] - 2.0 * u + ext[..., :-2]) / grid.h**2
    return np.moveaxis(d2, -1, axis)


def neumann_diffusion_matrix(grid: Grid1D, a_values) -> np.ndarray:
    """Dense matrix of ``u -> a(x) u''`` with mirrored ghosts.

    Row ``i`` is ``a_i (u_{i+1} - 2u_i + u_{i-1}) / h^2`` with
    ``u_{-1} = u_0`` and ``u_n = u_{n-1}``.  Row sums vanish, so constants
    are annihilated; the transpose is the matching zero-flux operator for
    ``(a m)''`` acting on node weights and conserves total mass.
    """
    a = np.broadcast_to(np.asarray(a_values, dtype=float), (grid.n_cells,))
    n = grid.n_cells
    A = np.zeros((n, n))
    idx = np.arange(n)
    A[idx[1:], idx[:-1]] = a[1:]
    A[idx[:-1], idx[1:]] = a[:-1]
    A[idx, idx] = -2.0 * a
    A[0, 0] = -a[0]
    A[-1, -1] = -a[-1]
    return A / grid.h**2


def divergence_form_matrix(grid: Grid1D, a_values) -> np.ndarray:
    """Symmetric zero-flux matrix of ``u -> (a u')'`` with face averages of ``a``."""
    a = np.broadcast_to(np.asarray(a_values, dtype=float), (grid.n_cells,))
    af = 0.5 * (a[1:] + a[:-1])
    n = grid.n_cells
    L = np.zeros((n, n))
    idx = np.arange(n - 1)
    L[idx, idx + 1] = af
    L[idx + 1, idx] = af
    L[idx, idx] -= af
    L[idx + 1, idx + 1] -= af
    return L / grid.h**2


# --- measures -----------------------------------------------------------------


def wasserstein1(m1, m2, grid: Grid1D) -> np.ndarray | float:
    """Wasserstein-1 distance of node-supported measures via the CDF formula.

    Both CDFs are constant between neighbouring nodes, so the integral
    ``int |F1 - F2| dx`` is an exact sum.  Works row-wise on stacked weights.
    """
    w1, w2 = as_weights(m1), as_weights(m2)
    validate_weights(w1, tol=1e-9)
    validate_weights(w2, tol=1e-9)
    return signed_w1(w1 - w2, grid)


def signed_w1(rho, grid: Grid1D):
    """Kantorovich-type norm of a signed node measure: ``h sum |cumsum| + |total|``."""
    rho = np.asarray(rho, dtype=float)
    c = np.cumsum(rho, axis=-1)
    d = grid.h * np.abs(c[..., :-1]).sum(axis=-1) + np.abs(c[..., -1])
    return float(d) if np.ndim(d) == 0 else d


def deposit(positions, grid: Grid1D, weights=None) -> np.ndarray:
    """Cloud-in-cell deposit of point masses onto the two nearest nodes.

    Positions are broadcast along the leading axes; the last axis indexes
    particles.  Points between a wall and the first/last node put all their
    mass on that node.  Returns weights of shape ``positions.shape[:-1] + (n,)``.
    """
    x = np.asarray(positions, dtype=float)
    if np.any(x < grid.lo - 1e-12) or np.any(x > grid.hi + 1e-12):
        raise InvalidArgumentError("particle outside the domain")
    n = grid.n_cells
    if weights is None:
        weights = np.full(x.shape, 1.0 / x.shape[-1])
    else:
        weights = np.broadcast_to(np.asarray(weights, dtype=float), x.shape)
    s = np.clip((x - grid.nodes[0]) / grid.h, 0.0, n - 1.0)
    k = np.minimum(np.floor(s).astype(int), n - 2)
    frac = s - k
    lead = x.shape[:-1]
    out = np.zeros(lead + (n,))
    flat = out.reshape(-1, n)
    rows = np.broadcast_to(np.arange(flat.shape[0])[:, None], (flat.shape[0], x.shape[-1]))
    kk = k.reshape(flat.shape[0], -1)
    ff = frac.reshape(flat.shape[0], -1)
    ww = weights.reshape(flat.shape[0], -1)
    np.add.at(flat, (rows, kk), ww * (1.0 - ff))
    np.add.at(flat, (rows, kk + 1), ww * ff)
    return out


def empirical_measure(positions, grid: Grid1D, exclude_index: int | None = None) -> GridMeasure:
    """Empirical measure of the players, optionally leaving one out.

    With ``exclude_index`` each retained player carries mass ``1/(N-1)``;
    without it every player carries ``1/N``.
    """
    x = np.asarray(positions, dtype=float).ravel()
    if exclude_index is not None:
        x = np.delete(x, exclude_index)
    if x.size == 0:
        raise InvalidArgumentError("empirical measure of zero particles")
    return GridMeasure(deposit(x, grid), check=True)


def pushforward(m, displacement, grid: Grid1D) -> np.ndarray:
    """Weights of ``(id + phi)#m`` for a displacement sampled at the nodes."""
    w = as_weights(m)
    target = grid.nodes + np.asarray(displacement, dtype=float)
    if np.any(target < grid.lo - 1e-12) or np.any(target > grid.hi + 1e-12):
        raise InvalidArgumentError("displacement leaves the domain")
    return deposit(target[None, :], grid, weights=w[None, :])[0]


# --- interpolation -------------------------------------------------------------


def interpolate(field, grid: Grid1D, x):
    """Piecewise-linear interpolation along the last axis, clamped at the ends."""
    u = np.asarray(field, dtype=float)
    xs = np.asarray(x, dtype=float)
    if u.ndim == 1:
        return np.interp(xs, grid.nodes, u)
    s = np.clip((xs - grid.nodes[0]) / grid.h, 0.0, grid.n_cells - 1.0)
    k = np.minimum(np.floor(s).astype(int), grid.n_cells - 2)
    f = s - k
    return u[..., k] * (1.0 - f) + u[..., k + 1] * f


def interpolate_tensor(field, grid: Grid1D, points) -> np.ndarray:
    """Multilinear interpolation of a field on the tensor lattice of ``grid``.

    ``field`` has shape ``(n,)*N``; ``points`` has shape ``(..., N)``.
    Coordinates outside the node range are clamped to the boundary cells.
    """
    f = np.asarray(field, dtype=float)
    p = np.asarray(points, dtype=float)
    dim = f.ndim
    if p.shape[-1] != dim:
        raise InvalidArgumentError(f"points have {p.shape[-1]} coordinates, field has {dim}")
    n = grid.n_cells
    s = np.clip((p - grid.nodes[0]) / grid.h, 0.0, n - 1.0)
    k = np.minimum(np.floor(s).astype(int), n - 2)
    frac = s - k
    out = np.zeros(p.shape[:-1])
    for corner in range(1 << dim):
        idx = []
        wgt = np.ones(p.shape[:-1])
        for d in range(dim):
            bit = (corner >> d) & 1
            idx.append(k[..., d] + bit)
            wgt = wgt * (frac[..., d] if bit else 1.0 - frac[..., d])
        out += wgt * f[tuple(idx)]
    return out


# --- serialisation -------------------------------------------------------------


def write_field_csv(path, grid: Grid1D, values) -> None:
    """Write ``node,value`` rows with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["node", "value"])
        for x, v in zip(grid.nodes, np.asarray(values, dtype=float)):
            wr.writerow([repr(float(x)), repr(float(v))])


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    arr = np.array([[float(a), float(b)] for a, b in rows])
    return arr[:, 0], arr[:, 1]


def write_matrix_csv(path, values) -> None:
    np.savetxt(path, np.atleast_2d(values), delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def write_json_array(path, values) -> None:
    Path(path).write_text(json.dumps(np.asarray(values, dtype=float).tolist()))
