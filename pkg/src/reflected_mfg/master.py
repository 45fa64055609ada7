"""The master field ``U(t0, x, m0)`` evaluated through MFG trajectories.

``U(t0, ., m0)`` is the time-``t0`` slice of the value function of the MFG
started from ``m0`` at ``t0``.  Its flat derivative in the measure is obtained
from the linearised forward-backward system around that solution.  The
linearisation here is the exact Jacobian of the discrete scheme in
:mod:`reflected_mfg.mfg`, so finite differences in the measure agree with it up
to second-order terms and solver tolerance.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reflected_mfg.errors import InvalidArgumentError, NonConvergenceError
from reflected_mfg.grid import (
    Grid1D,
    GridMeasure,
    TimeGrid,
    as_weights,
    deposit,
    gradient,
    read_field_csv,
    signed_w1,
    validate_weights,
    write_field_csv,
)
from reflected_mfg.mfg import MfgDiscretization, MfgSolution, _start_index, solve_mfg
from reflected_mfg.model import Model

log = logging.getLogger(__name__)

CACHE_ENV = "REFLECTED_MFG_CACHE"


@dataclass
class MasterEvaluation:
    """``U(t0, ., m0)`` together with the solve it was read from."""

    t0: float
    m0: GridMeasure
    u_slice: np.ndarray
    provenance: MfgSolution | None = None

    def __post_init__(self):
        if self.provenance is not None and not np.array_equal(self.u_slice, self.provenance.u[0]):
            raise InvalidArgumentError("u_slice must be the first slice of its solution")


@dataclass
class LinearizedSolution:
    """Solution ``(z, rho)`` of the linearised system on slices ``start..K``.

    Shapes are ``(n_slices, n)``, or ``(n_slices, B, n)`` for a batch of
    directions.
    """

    z: np.ndarray
    rho: np.ndarray
    start: int
    time_grid: TimeGrid
    iterations_used: int
    final_gap: float
    gap_history: list = field(default_factory=list)


# --- linearised system ----------------------------------------------------------


class _LinearizedOperator:
    """Jacobian of one HJB sweep and one Fokker-Planck sweep around a solution."""

    def __init__(self, base: MfgSolution, disc: MfgDiscretization):
        model = disc.model
        self.disc = disc
        self.model = model
        self.dt = disc.time_grid.dt
        u = base.u if base.u.ndim == 2 else base.u[:, 0]
        m = base.m if base.m.ndim == 2 else base.m[:, 0]
        self.m = m
        self.Km = m @ disc.KT
        self.Hp_nodes = model.H_p(u @ disc.DT, model.c_H_nodes)
        p_face = u @ disc.FgT
        self.b = -model.H_p(p_face, model.c_H_faces)
        self.Hpp_face = model.H_pp(p_face, model.c_H_faces)
        # base weights before every substep and the upwind weight each face carries
        sub = disc.substeps
        c = self.dt / sub / disc.grid.h
        self.c = c
        w_sub = np.empty((m.shape[0] - 1, sub, m.shape[1]))
        for k in range(m.shape[0] - 1):
            w = m[k]
            bp = c * np.maximum(self.b[k], 0.0)
            bm = c * np.minimum(self.b[k], 0.0)
            for s in range(sub):
                w_sub[k, s] = w
                flux = bp * w[:-1] + bm * w[1:]
                w = w.copy()
                w[:-1] -= flux
                w[1:] += flux
        left, right = w_sub[..., :-1], w_sub[..., 1:]
        bk = self.b[:-1, None, :]
        self.m_up = np.where(bk > 0, left, np.where(bk < 0, right, 0.5 * (left + right)))

    def pairing(self, rho, k, weight):
        """Normalised ``<dF/dm(., m_k, .), rho>`` for a batch ``rho`` of shape ``(B, n)``."""
        return weight * (rho @ self.disc.KT - rho.sum(axis=-1, keepdims=True) * self.Km[k])

    def backward(self, rho, h_src=None, z_T=None):
        disc, dt = self.disc, self.dt
        cF, cG = self.model.config.c_F, self.model.config.c_G
        z = np.empty_like(rho)
        z[-1] = self.pairing(rho[-1], -1, cG)
        if z_T is not None:
            z[-1] += z_T
        for k in range(rho.shape[0] - 2, -1, -1):
            nxt = z[k + 1]
            rhs = nxt - dt * self.Hp_nodes[k + 1] * (nxt @ disc.DT)
            if cF:
                rhs += dt * self.pairing(rho[k + 1], k + 1, cF)
            if h_src is not None:
                rhs += dt * h_src[k + 1]
            z[k] = rhs @ disc.MinvT
        return z

    def forward(self, z, rho0, c_src=None):
        disc, c = self.disc, self.c
        rho = np.empty_like(z)
        rho[0] = rho0
        for k in range(z.shape[0] - 1):
            bp = c * np.maximum(self.b[k], 0.0)
            bm = c * np.minimum(self.b[k], 0.0)
            db = -c * self.Hpp_face[k] * (z[k] @ disc.FgT)
            r = rho[k]
            for s in range(disc.substeps):
                flux = bp * r[..., :-1] + bm * r[..., 1:] + db * self.m_up[k, s]
                if c_src is not None:
                    flux = flux - c * c_src[k]
                r = r.copy()
                r[..., :-1] -= flux
                r[..., 1:] += flux
            rho[k + 1] = r @ disc.Minv
        return rho


def solve_linearized(
    base: MfgSolution,
    rho0,
    model: Model,
    time_grid: TimeGrid,
    *,
    h_src=None,
    c_src=None,
    z_T=None,
    damping: float = 0.5,
    tol: float = 1e-11,
    max_iter: int = 400,
    disc: MfgDiscretization | None = None,
) -> LinearizedSolution:
    """Solve the linearised MFG system around ``base`` by damped Picard on ``rho``.

    ``rho0`` is a signed node-weight vector or a stack ``(B, n)`` of them.
    Sources are optional: ``h_src`` is a field per slice ``(n_slices, n)``,
    ``c_src`` a weight flux per unit time on interior faces ``(n_slices - 1, n - 1)``
    (positive to the right) and ``z_T`` a terminal field.  The boundary faces
    carry no flux of any kind.
    """
    if base.u.ndim != 2:
        raise InvalidArgumentError("linearise around a single (unbatched) solution")
    disc = disc or MfgDiscretization(model, time_grid)
    r0 = np.asarray(rho0, dtype=float)
    single = r0.ndim == 1
    r0 = np.atleast_2d(r0)
    n_slices = base.u.shape[0]
    if r0.shape[-1] != model.grid.n_cells:
        raise InvalidArgumentError("direction does not match the grid")
    if not np.all(np.isfinite(r0)):
        raise InvalidArgumentError("non-finite direction")
    op = _LinearizedOperator(base, disc)

    def expand(src):
        if src is None:
            return None
        arr = np.asarray(src, dtype=float)
        return arr[:, None, :] if arr.ndim == 2 else arr

    h_arr, c_arr = expand(h_src), expand(c_src)
    rho = np.broadcast_to(r0, (n_slices,) + r0.shape).copy()
    theta = damping
    history: list[float] = []
    gap = math.inf
    for it in range(1, max_iter + 1):
        z = op.backward(rho, h_arr, z_T)
        phi = op.forward(z, r0, c_arr)
        gap = theta * float(np.max(signed_w1(phi - rho, model.grid)))
        rho = (1.0 - theta) * rho + theta * phi
        history.append(gap)
        if gap <= tol:
            break
        if it > 3 and gap > history[-2]:
            theta = max(theta * 0.5, 1.0 / 64.0)
    else:
        raise NonConvergenceError("linearised Picard iteration did not converge", gap, max_iter)
    z = op.backward(rho, h_arr, z_T)
    if single:
        z, rho = z[:, 0], rho[:, 0]
    return LinearizedSolution(z, rho, base.start, time_grid, len(history), gap, history)


# --- disk cache -------------------------------------------------------------------


def _weights_hash(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f8").tobytes()).hexdigest()[:20]


class EvaluationCache:
    """``U(t0, ., m0)`` slices on disk: ``index.json`` plus one CSV per entry."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._index_path = self.directory / "index.json"
        self._index = json.loads(self._index_path.read_text()) if self._index_path.exists() else {}
        self._write_lock = threading.Lock()

    @classmethod
    def from_env(cls) -> EvaluationCache | None:
        path = os.environ.get(CACHE_ENV)
        return cls(path) if path else None

    @staticmethod
    def key(config_digest: str, grid: Grid1D, time_grid: TimeGrid, start: int, w: np.ndarray) -> str:
        tg = f"{time_grid.t0!r}-{time_grid.T!r}-{time_grid.n_steps}"
        return f"{config_digest}|{grid.n_cells}|{tg}|{start}|{_weights_hash(w)}"

    def get(self, key: str):
        name = self._index.get(key)
        if name is None:
            return None
        path = self.directory / name
        if not path.exists():
            return None
        return read_field_csv(path)[1]

    def put(self, key: str, grid: Grid1D, u_slice: np.ndarray) -> None:
        """Writers are serialised; readers never block and only see completed entries."""
        name = hashlib.sha256(key.encode()).hexdigest()[:24] + ".csv"
        with self._write_lock:
            write_field_csv(self.directory / name, grid, u_slice)
            index = dict(self._index)
            index[key] = name
            tmp = self._index_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(index, indent=1, sort_keys=True))
            tmp.replace(self._index_path)
            self._index = index

    def __len__(self):
        return len(self._index)


# --- evaluator ------------------------------------------------------------------


class MasterEvaluator:
    """Evaluates ``U`` and its measure derivatives for one model and time grid.

    Solver settings are fixed per evaluator so repeated calls are
    deterministic.  Solves use Anderson mixing of depth ``anderson`` (0 selects
    plain damped Picard); some two-atom measures make the damped iteration
    contract very slowly.  ``cache`` may be an :class:`EvaluationCache`; by default the
    directory named by ``REFLECTED_MFG_CACHE`` is used when that variable is set.
    """

    def __init__(self, model: Model, time_grid: TimeGrid, *, tol: float = 1e-8,
                 damping: float = 0.5, max_iter: int = 300, linear_tol: float = 1e-11,
                 anderson: int = 5,
                 cache: EvaluationCache | None | str = "env"):
        self.model = model
        self.grid = model.grid
        self.time_grid = time_grid
        self.tol = tol
        self.damping = damping
        self.max_iter = max_iter
        self.linear_tol = linear_tol
        self.anderson = anderson
        self.disc = MfgDiscretization(model, time_grid)
        self.cache = EvaluationCache.from_env() if cache == "env" else cache
        self._digest = model.config.digest()
        self._mollifiers: dict[float, np.ndarray] = {}

    @property
    def default_mollify(self) -> float:
        return self.model.config.smoothing_eps / 4.0

    # -- solves --

    def solve(self, t0, m0, initial_guess=None) -> MfgSolution:
        return solve_mfg(m0, t0, self.model, self.time_grid, damping=self.damping, tol=self.tol,
                         max_iter=self.max_iter, disc=self.disc, initial_guess=initial_guess,
                         anderson=self.anderson)

    def eval_U(self, t0, m0) -> MasterEvaluation:
        w = as_weights(m0)
        validate_weights(w, tol=1e-10)
        start = _start_index(t0, self.time_grid)
        key = None
        if self.cache is not None:
            key = EvaluationCache.key(self._digest, self.grid, self.time_grid, start, w)
            hit = self.cache.get(key)
            if hit is not None:
                return MasterEvaluation(float(self.time_grid.times[start]), GridMeasure(w), hit)
        sol = self.solve(start, w)
        if self.cache is not None:
            self.cache.put(key, self.grid, sol.u[0])
        return MasterEvaluation(sol.t0, GridMeasure(w), sol.u[0], sol)

    def eval_U_batch(self, t0, weights, initial_guess=None) -> MfgSolution:
        """Batched solves from a stack of measures ``(B, n)``; returns the full solution."""
        return self.solve(t0, np.atleast_2d(weights), initial_guess)

    # -- derivatives --

    def mollifier(self, width: float) -> np.ndarray:
        if width not in self._mollifiers:
            self._mollifiers[width] = self.model.heat_flow_matrix(width)
        return self._mollifiers[width]

    def dirac_directions(self, m0, y_indices, mollify: float | None = None) -> np.ndarray:
        """Rows ``S_mollify e_y - m0`` for each node index ``y``."""
        mollify = self.default_mollify if mollify is None else mollify
        w = as_weights(m0)
        idx = np.atleast_1d(np.asarray(y_indices, dtype=int))
        if np.any(idx < 0) or np.any(idx >= self.grid.n_cells):
            raise InvalidArgumentError("y must be a grid node index")
        return self.mollifier(mollify)[idx] - w

    def base_solution(self, t0, m0) -> MfgSolution:
        return self.solve(t0, as_weights(m0))

    def linearized(self, base: MfgSolution, rho0, **sources) -> LinearizedSolution:
        return solve_linearized(base, rho0, self.model, self.time_grid, damping=self.damping,
                                tol=self.linear_tol, disc=self.disc, **sources)

    def derivative_kernel(self, t0, m0, y_indices=None, mollify: float | None = None,
                          base: MfgSolution | None = None) -> np.ndarray:
        """``dU/dm(t0, x, m0, y)`` as an array ``(len(y), n_x)`` (all nodes by default)."""
        if y_indices is None:
            y_indices = np.arange(self.grid.n_cells)
        base = base or self.base_solution(t0, m0)
        rho0 = self.dirac_directions(m0, y_indices, mollify)
        lin = self.linearized(base, rho0)
        return lin.z[0]

    def measure_derivative(self, t0, m0, y: int, mollify: float | None = None) -> np.ndarray:
        """``x -> dU/dm(t0, x, m0, y)`` for a node ``y``, normalised against ``m0``."""
        return self.derivative_kernel(t0, m0, [y], mollify)[0]

    def dm_U_field(self, t0, m0, mollify: float | None = None, base=None) -> np.ndarray:
        """``D_m U(t0, x, m0, y)`` on all node pairs, array indexed ``[y, x]``."""
        kernel = self.derivative_kernel(t0, m0, None, mollify, base)
        return gradient(kernel, self.grid, axis=0)

    def dm_U(self, t0, m0, y: int, mollify: float | None = None) -> np.ndarray:
        """``x -> D_m U(t0, x, m0, y)``: central difference in ``y``, mirrored at walls."""
        n = self.grid.n_cells
        if not 0 <= y < n:
            raise InvalidArgumentError("y must be a grid node index")
        lo, hi = max(y - 1, 0), min(y + 1, n - 1)
        ker = self.derivative_kernel(t0, m0, [lo, hi], mollify)
        return (ker[1] - ker[0]) / (2.0 * self.grid.h)

    # -- expansion check --

    def pushforward_expansion_check(self, t0, m0, phi, mollify: float = 0.0) -> float:
        """Sup-norm remainder of the first-order expansion along ``(id + phi)#m0``.

        ``phi`` is a displacement per node.  The derivative term uses node
        Dirac directions by default so that only the pushforward itself is
        discretised.
        """
        w = as_weights(m0)
        grid = self.grid
        phi = np.broadcast_to(np.asarray(phi, dtype=float), w.shape)
        target = grid.nodes + phi
        if np.any(target < grid.lo) or np.any(target > grid.hi):
            raise InvalidArgumentError("displacement leaves the domain")
        pushed = deposit(target, grid, w)
        base = self.base_solution(t0, w)
        u_push = self.solve(t0, pushed).u[0]
        support = np.flatnonzero(w > 0)
        dmu = self.dm_U_field(t0, w, mollify, base)
        linear = (w[support] * phi[support]) @ dmu[support]
        return float(np.max(np.abs(u_push - base.u[0] - linear)))


# --- functional interface ----------------------------------------------------------


def eval_U(t0, m0, model: Model, grid: Grid1D, time_grid: TimeGrid, **options) -> MasterEvaluation:
    """``U(t0, ., m0)`` from a fresh evaluator (no disk cache unless requested)."""
    if grid != model.grid:
        raise InvalidArgumentError("grid does not match the model")
    options.setdefault("cache", None)
    return MasterEvaluator(model, time_grid, **options).eval_U(t0, m0)


def measure_derivative(t0, m0, y: int, model: Model, grid: Grid1D, time_grid: TimeGrid,
                       mollify: float | None = None, **options) -> np.ndarray:
    if grid != model.grid:
        raise InvalidArgumentError("grid does not match the model")
    options.setdefault("cache", None)
    return MasterEvaluator(model, time_grid, **options).measure_derivative(t0, m0, y, mollify)
