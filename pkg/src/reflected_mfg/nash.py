"""N-player Nash system on the tensor grid and projections of the master field.

The representative value ``v_1(t, x_1, x_2, ..., x_N)`` is stored with the
player's own position on axis 0; by exchangeability player ``j``'s value is the
same array with axes 0 and ``j`` swapped.  One backward step reads

    W   = V_{n+1} + dt (F(x_1, m^{N,1}) - H(x_1, D_1 V_{n+1}))
    V_n = Minv_1  prod_{j >= 2} [(I + dt T_j) Minv_j]  W

where ``Minv_j`` is the implicit diffusion along axis ``j`` and ``T_j`` is the
upwind transport generator of player ``j`` with face velocity
``-H_p(x_j, D_j v_j)`` evaluated at the unknown slice ``V_n``.  The dependence
on ``V_n`` is resolved by a Jacobi fixed point.  The other players' factor is
the adjoint of one Fokker-Planck step of :mod:`reflected_mfg.mfg`, so the
scheme is the exact N-particle counterpart of the MFG discretisation.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reflected_mfg.errors import BudgetError, InvalidArgumentError, NonConvergenceError
from reflected_mfg.grid import (
    Grid1D,
    TimeGrid,
    empirical_measure,
    gradient,
    interpolate,
    interpolate_tensor,
)
from reflected_mfg.master import MasterEvaluator, _weights_hash
from reflected_mfg.mfg import MfgDiscretization, _start_index
from reflected_mfg.model import Model

log = logging.getLogger(__name__)

DEFAULT_MEMORY_BUDGET = 600_000_000  # bytes for the stored time slices
COARSE_N = 4
COARSE_MAX_CELLS = 21


@dataclass
class NashTensorField:
    """``v^N_1`` on all time slices; ``values`` has shape ``(K+1,) + (n,) * N``."""

    N: int
    values: np.ndarray
    grid: Grid1D
    time_grid: TimeGrid
    coarse: bool = False
    inner_iterations: list = field(default_factory=list)

    def player_values(self, slice_index: int, i: int) -> np.ndarray:
        """``v^N_i`` on the lattice at one time slice (axis ``k`` = position of player ``k``)."""
        return np.swapaxes(self.values[slice_index], 0, i)

    def own_gradient(self, slice_index: int) -> np.ndarray:
        """``D_{x_1} v^N_1`` at one slice, central differences with mirrored ghosts."""
        return gradient(self.values[slice_index], self.grid, axis=0)

    def value_at(self, slice_index: int, points, i: int = 0) -> np.ndarray:
        """``v^N_i(t, x)`` at configurations ``points`` of shape ``(P, N)``."""
        pts = _own_first(np.atleast_2d(points), i)
        return interpolate_tensor(self.values[slice_index], self.grid, pts)

    def gradient_at(self, slice_index: int, points, i: int = 0) -> np.ndarray:
        """``D_{x_i} v^N_i(t, x)`` at configurations ``points`` of shape ``(P, N)``."""
        pts = _own_first(np.atleast_2d(points), i)
        return interpolate_tensor(self.own_gradient(slice_index), self.grid, pts)

    # -- persistence --

    def save(self, path, manifest: dict | None = None) -> None:
        """Flat binary: three little-endian int64 ``(N, n_cells, n_steps)`` then float64 values."""
        path = Path(path)
        header = np.array([self.N, self.grid.n_cells, self.time_grid.n_steps], dtype="<i8")
        with open(path, "wb") as fh:
            fh.write(header.tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        meta = {
            "N": self.N, "n_cells": self.grid.n_cells, "domain": [self.grid.lo, self.grid.hi],
            "t0": self.time_grid.t0, "T": self.time_grid.T, "n_steps": self.time_grid.n_steps,
            "coarse": self.coarse, "layout": "int64le[3] header + float64le row-major (time, x1..xN)",
        }
        meta.update(manifest or {})
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> NashTensorField:
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        raw = path.read_bytes()
        N, n, K = (int(v) for v in np.frombuffer(raw[:24], dtype="<i8"))
        values = np.frombuffer(raw[24:], dtype="<f8").reshape((K + 1,) + (n,) * N).copy()
        grid = Grid1D(n, *meta["domain"])
        tg = TimeGrid(meta["t0"], meta["T"], K)
        return cls(N, values, grid, tg, bool(meta.get("coarse", False)))


def _own_first(points: np.ndarray, i: int) -> np.ndarray:
    if i == 0:
        return points
    order = [i] + [k for k in range(points.shape[-1]) if k != i]
    return points[..., order]


def symmetrize(V: np.ndarray) -> np.ndarray:
    """Average over permutations of axes ``1..N-1`` (the other players)."""
    N = V.ndim
    if N <= 2:
        return V
    perms = list(itertools.permutations(range(1, N)))
    out = np.zeros_like(V)
    for p in perms:
        out += np.transpose(V, (0,) + p)
    return out / len(perms)


def _apply_along(M_T: np.ndarray, V: np.ndarray, axis: int) -> np.ndarray:
    """``V`` with the matrix ``M`` applied along ``axis`` (``M_T`` is its transpose)."""
    moved = np.moveaxis(V, axis, -1)
    return np.moveaxis(moved @ M_T, -1, axis)


def _bcast(vec: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = vec.size
    return vec.reshape(shape)


class NashScheme:
    """Operators of the backward step for one ``N`` and (model, time grid)."""

    def __init__(self, N: int, model: Model, time_grid: TimeGrid):
        if N < 2:
            raise InvalidArgumentError("the Nash system needs at least two players")
        self.N = N
        self.model = model
        self.grid = model.grid
        self.time_grid = time_grid
        self.dt = time_grid.dt
        disc = MfgDiscretization(model, time_grid)
        self.MinvT = disc.MinvT
        self.substeps = disc.substeps
        n = self.grid.n_cells
        c = model.config
        K = model.kernel
        self.source = np.zeros((n,) * N)
        for j in range(1, N):
            self.source += _bcast_pair(K, j, N)
        self.source /= N - 1
        self.F_src = c.c_F * self.source
        self.G = c.c_G * self.source
        self.c_nodes = [_bcast(model.c_H_nodes, j, N) for j in range(N)]
        self.c_faces = [_bcast(model.c_H_faces, j, N) for j in range(N)]

    def explicit_part(self, V_next: np.ndarray) -> np.ndarray:
        model = self.model
        p = gradient(V_next, self.grid, axis=0)
        return V_next + self.dt * (self.F_src - model.H(p, self.c_nodes[0]))

    def face_velocity(self, V_star: np.ndarray, j: int) -> np.ndarray:
        """``-H_p(x_j, D_j v_j)`` on faces along axis ``j``."""
        own = np.diff(V_star, axis=0) / self.grid.h
        return -self.model.H_p(np.swapaxes(own, 0, j), self.c_faces[j])

    def transport(self, W: np.ndarray, b: np.ndarray, j: int, c: float) -> np.ndarray:
        """``W + c h T_j W`` with upwind differences along axis ``j``."""
        d = np.diff(W, axis=j)
        out = W.copy()
        lo = [slice(None)] * W.ndim
        hi = [slice(None)] * W.ndim
        lo[j] = slice(0, -1)
        hi[j] = slice(1, None)
        out[tuple(lo)] += c * np.maximum(b, 0.0) * d
        out[tuple(hi)] += c * np.minimum(b, 0.0) * d
        return out

    def apply(self, V_star: np.ndarray, W: np.ndarray) -> np.ndarray:
        """``Minv_1 prod_j [(I + dt T_j(V_star)) Minv_j] W``, symmetrised over the other players.

        The split factors do not commute, so a fixed sweep order would favour
        some players; for exchangeable inputs the symmetrised result equals the
        average over all sweep orders.
        """
        c = self.dt / self.substeps / self.grid.h
        for j in range(1, self.N):
            b = self.face_velocity(V_star, j)
            W = _apply_along(self.MinvT, W, j)
            for _ in range(self.substeps):
                W = self.transport(W, b, j, c)
        return symmetrize(_apply_along(self.MinvT, W, 0))

    def step(self, V_next: np.ndarray, tol: float, max_inner: int) -> tuple[np.ndarray, int]:
        W = self.explicit_part(V_next)
        V = V_next
        for it in range(1, max_inner + 1):
            new = self.apply(V, W)
            delta = float(np.max(np.abs(new - V)))
            V = new
            if delta <= tol:
                return V, it
        raise NonConvergenceError("Nash inner iteration did not converge", delta, max_inner)

    def defect(self, V_n: np.ndarray, V_next: np.ndarray) -> np.ndarray:
        """``(V_n - step operator applied with V_n frozen) / dt`` on the whole lattice."""
        return (V_n - self.apply(V_n, self.explicit_part(V_next))) / self.dt


def _bcast_pair(K: np.ndarray, j: int, N: int) -> np.ndarray:
    """``K[x_1, x_j]`` as an array broadcastable over ``N`` axes."""
    shape = [1] * N
    shape[0] = K.shape[0]
    shape[j] = K.shape[1]
    return K.reshape(shape)


def check_budget(N: int, n_cells: int, n_steps: int, memory_budget: float = DEFAULT_MEMORY_BUDGET) -> bool:
    """Refuse oversized tensors; returns whether the run is flagged coarse."""
    if N not in (2, 3, 4):
        raise InvalidArgumentError("N must be 2, 3 or 4")
    if N == COARSE_N and n_cells > COARSE_MAX_CELLS:
        raise BudgetError(f"N=4 is only allowed with n_cells <= {COARSE_MAX_CELLS}")
    need = 8.0 * n_cells ** N * (n_steps + 1)
    if need > memory_budget:
        raise BudgetError(f"Nash tensor needs {need / 1e6:.0f} MB, budget {memory_budget / 1e6:.0f} MB")
    return N == COARSE_N


def solve_nash(N: int, model: Model, time_grid: TimeGrid, *, tol: float = 1e-12, max_inner: int = 500,
               memory_budget: float = DEFAULT_MEMORY_BUDGET) -> NashTensorField:
    """Backward semi-implicit solve of the N-player Nash system."""
    grid = model.grid
    coarse = check_budget(N, grid.n_cells, time_grid.n_steps, memory_budget)
    scheme = NashScheme(N, model, time_grid)
    K = time_grid.n_steps
    values = np.empty((K + 1,) + (grid.n_cells,) * N)
    values[K] = scheme.G
    inner = []
    for k in range(K - 1, -1, -1):
        values[k], its = scheme.step(values[k + 1], tol, max_inner)
        inner.append(its)
    if not np.all(np.isfinite(values)):
        raise NonConvergenceError("Nash solve produced non-finite values", math.nan, 0)
    log.info("Nash N=%d solved, inner iterations %d..%d", N, min(inner), max(inner))
    return NashTensorField(N, values, grid, time_grid, coarse, inner[::-1])


# --- projections of the master field ----------------------------------------------


class Projector:
    """``u^N_i(t, x) = U(t, x_i, m^{N,i}_x)`` with the solves cached per measure."""

    def __init__(self, evaluator: MasterEvaluator):
        self.evaluator = evaluator
        self.grid = evaluator.grid
        self._cache: dict[tuple[int, str], np.ndarray] = {}

    def slice_for(self, t, weights) -> np.ndarray:
        start = _start_index(t, self.evaluator.time_grid)
        key = (start, _weights_hash(weights))
        if key not in self._cache:
            self._cache[key] = self.evaluator.eval_U(start, weights).u_slice
        return self._cache[key]

    def __call__(self, t, x_vec, i: int) -> float:
        x = np.asarray(x_vec, dtype=float)
        if x.ndim != 1 or not 0 <= i < x.size:
            raise InvalidArgumentError("x_vec must list N positions and i one of the players")
        if np.any(x < self.grid.lo) or np.any(x > self.grid.hi):
            raise InvalidArgumentError("positions must lie in the domain")
        m = empirical_measure(x, self.grid, exclude_index=i)
        return float(interpolate(self.slice_for(t, m.weights), self.grid, x[i]))


def project_uNi(master: MasterEvaluator | Projector, t, x_vec, i: int) -> float:
    proj = master if isinstance(master, Projector) else Projector(master)
    return proj(t, x_vec, i)


class ProjectionLattice:
    """``u^N_1`` on every lattice configuration of the grid, slice by slice.

    The others' empirical measures are the multisets of ``N - 1`` nodes; each
    start slice is one batched MFG solve.  Slices are built from late to early
    so that each solve can start from the previous (time-shifted) solution.
    """

    def __init__(self, evaluator: MasterEvaluator, N: int):
        self.evaluator = evaluator
        self.N = N
        self.grid = evaluator.grid
        n = self.grid.n_cells
        combos = np.array(list(itertools.combinations_with_replacement(range(n), N - 1)), dtype=int)
        self.combos = combos
        self.weights = np.zeros((len(combos), n))
        for col in combos.T:
            np.add.at(self.weights, (np.arange(len(combos)), col), 1.0 / (N - 1))
        lookup = np.full((n,) * (N - 1), -1, dtype=int)
        for pos, c in enumerate(combos):
            for perm in itertools.permutations(c):
                lookup[perm] = pos
        self.lookup = lookup
        self.slices: dict[int, np.ndarray] = {}
        self._warm: tuple[int, np.ndarray] | None = None
        self.iterations: dict[int, int] = {}

    def build(self, slice_indices) -> None:
        for k in sorted(set(int(s) for s in slice_indices), reverse=True):
            if k not in self.slices:
                self._build_one(k)

    def _build_one(self, k: int) -> None:
        if k == self.evaluator.time_grid.n_steps:
            U = self.evaluator.model.coupling_G(self.weights)
            self.slices[k] = np.moveaxis(U[self.lookup], -1, 0)
            return
        guess = None
        if self._warm is not None and self._warm[0] == k + 1:
            m_next = self._warm[1]
            guess = np.concatenate([self.weights[None], m_next], axis=0)
        sol = self.evaluator.eval_U_batch(k, self.weights, initial_guess=guess)
        self._warm = (k, sol.m)
        self.iterations[k] = sol.iterations_used
        U = sol.u[0]  # (B, n)
        self.slices[k] = np.moveaxis(U[self.lookup], -1, 0)

    def tensor(self, k: int) -> np.ndarray:
        if k not in self.slices:
            self.build([k])
        return self.slices[k]

    def own_gradient(self, k: int) -> np.ndarray:
        return gradient(self.tensor(k), self.grid, axis=0)

    def gradient_at(self, k: int, points, i: int = 0) -> np.ndarray:
        """``D_{x_i} u^N_i(t_k, x)`` at configurations ``(P, N)`` by multilinear interpolation."""
        pts = _own_first(np.atleast_2d(points), i)
        return interpolate_tensor(self.own_gradient(k), self.grid, pts)

    def value_at(self, k: int, points, i: int = 0) -> np.ndarray:
        pts = _own_first(np.atleast_2d(points), i)
        return interpolate_tensor(self.tensor(k), self.grid, pts)


def nash_residual(lattice: ProjectionLattice, model: Model, time_grid: TimeGrid, slice_indices,
                  sample_points=None, per_slice: bool = False):
    """Sup over samples of the defect of ``u^N_1`` in the discrete Nash equations.

    ``sample_points`` is an integer array ``(P, N)`` of lattice node indices; by
    default every configuration with all players off the boundary nodes is used.
    Each slice ``k`` needs the lattice at ``k`` and ``k + 1``.
    """
    N = lattice.N
    n = model.grid.n_cells
    scheme = NashScheme(N, model, time_grid)
    ks = sorted(set(int(k) for k in slice_indices))
    if any(k < 0 or k >= time_grid.n_steps for k in ks):
        raise InvalidArgumentError("residual slices must lie strictly before the horizon")
    lattice.build(ks + [k + 1 for k in ks])
    if sample_points is None:
        inner = (slice(1, n - 1),) * N
    else:
        pts = np.asarray(sample_points, dtype=int)
        if pts.ndim != 2 or pts.shape[1] != N or np.any(pts <= 0) or np.any(pts >= n - 1):
            raise InvalidArgumentError("sample points must be interior lattice indices (P, N)")
        inner = tuple(pts.T)
    out = {}
    for k in ks:
        d = scheme.defect(lattice.tensor(k), lattice.tensor(k + 1))
        out[k] = float(np.max(np.abs(d[inner])))
    return out if per_slice else max(out.values())


def nash_field_residual(nash: NashTensorField, model: Model, slice_indices) -> float:
    """The same defect evaluated on a Nash solution (should vanish to the inner tolerance)."""
    scheme = NashScheme(nash.N, model, nash.time_grid)
    n = model.grid.n_cells
    inner = (slice(1, n - 1),) * nash.N
    return max(float(np.max(np.abs(scheme.defect(nash.values[k], nash.values[k + 1])[inner])))
               for k in slice_indices)


def derivative_formula_check(N: int, i: int, j: int, t, x_vec, projector: Projector, *,
                             fd_step: float | None = None, prefactor: float | None = None,
                             mollify: float = 0.0) -> tuple[float, float, float]:
    """Compare ``D_{x_j} u^N_i`` with ``D_m U(t, x_i, m^{N,i}, x_j) / (N - 1)``.

    The left side is a central difference of the projection in ``x_j`` with
    step ``fd_step`` (default ``h``); the right side evaluates the measure
    derivative with node Dirac directions.  Returns ``(lhs, rhs, |lhs - rhs|)``.
    """
    x = np.asarray(x_vec, dtype=float)
    if x.size != N or i == j or not (0 <= i < N and 0 <= j < N):
        raise InvalidArgumentError("need N positions and two distinct players")
    ev = projector.evaluator
    grid = ev.grid
    s = grid.h if fd_step is None else fd_step
    if x[j] - s < grid.lo or x[j] + s > grid.hi:
        raise InvalidArgumentError("finite-difference stencil leaves the domain")
    xp, xm = x.copy(), x.copy()
    xp[j] += s
    xm[j] -= s
    lhs = (projector(t, xp, i) - projector(t, xm, i)) / (2.0 * s)
    m = empirical_measure(x, grid, exclude_index=i).weights
    field = ev.dm_U_field(t, m, mollify)  # [y, x]
    at_xi = np.array([interpolate(row, grid, x[i]) for row in field])
    dmu = float(interpolate(at_xi, grid, x[j]))
    pref = 1.0 / (N - 1) if prefactor is None else prefactor
    rhs = pref * dmu
    return float(lhs), float(rhs), float(abs(lhs - rhs))
