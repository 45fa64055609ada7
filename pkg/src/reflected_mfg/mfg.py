"""Forward-backward solver for the mean field game system with zero-flux walls.

Discretisation on a cell-centred grid, time step ``dt``:

* HJB, backward:  ``(I - dt A) u_k = u_{k+1} + dt (F(m_{k+1}) - H(x, D u_{k+1}))``,
  ``u_K = G(m_K)``;
* Fokker-Planck, forward: upwind finite-volume drift ``-H_p(x, D u_k)`` with
  zero boundary flux, then ``(I - dt A^T) m_{k+1} = m_k - dt div(flux)``.

``A`` is :func:`reflected_mfg.grid.neumann_diffusion_matrix`; its transpose is
the conservative operator for ``(a m)''``, so mass is preserved to rounding.
The pair is coupled by damped Picard iteration on the measure path.  All
routines accept a batch of initial measures and march them together.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from reflected_mfg.errors import InvalidArgumentError, NonConvergenceError, NumericalError
from reflected_mfg.grid import (
    Grid1D,
    TimeGrid,
    as_weights,
    face_gradient,
    gradient,
    neumann_diffusion_matrix,
    signed_w1,
    validate_weights,
)
from reflected_mfg.model import Model

log = logging.getLogger(__name__)

NEGATIVE_CLIP = -1e-14


@dataclass
class MfgSolution:
    """Solution on the time slices ``start .. n_steps`` of ``time_grid``.

    ``u`` and ``m`` have shape ``(n_slices, n)`` for a single solve or
    ``(n_slices, batch, n)`` for a batched one.
    """

    u: np.ndarray
    m: np.ndarray
    start: int
    time_grid: TimeGrid
    iterations_used: int
    final_gap: float
    gap_history: list = field(default_factory=list)

    @property
    def t0(self) -> float:
        return float(self.time_grid.times[self.start])

    @property
    def times(self) -> np.ndarray:
        return self.time_grid.times[self.start:]

    @property
    def batched(self) -> bool:
        return self.u.ndim == 3

    def member(self, b: int) -> MfgSolution:
        if not self.batched:
            raise InvalidArgumentError("solution is not batched")
        return MfgSolution(self.u[:, b], self.m[:, b], self.start, self.time_grid,
                           self.iterations_used, self.final_gap, self.gap_history)


class MfgDiscretization:
    """Precomputed operators for one (model, time grid) pair."""

    def __init__(self, model: Model, time_grid: TimeGrid):
        self.model = model
        self.grid = model.grid
        self.time_grid = time_grid
        dt = time_grid.dt
        n = self.grid.n_cells
        self.A = neumann_diffusion_matrix(self.grid, model.a)
        M = np.eye(n) - dt * self.A
        try:
            self.Minv = np.linalg.inv(M)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - M is an M-matrix
            raise NumericalError(f"singular implicit diffusion matrix: {exc}") from exc
        # row vectors: u_k = rhs @ MinvT, m_{k+1} = w @ Minv
        self.MinvT = np.ascontiguousarray(self.Minv.T)
        self.KT = np.ascontiguousarray(model.kernel.T)
        eye = np.eye(n)
        self.DT = np.ascontiguousarray(gradient(eye, self.grid, axis=0).T)
        self.FgT = np.ascontiguousarray(face_gradient(eye, self.grid))
        cfl = dt * model.c_H_sup / self.grid.h
        self.substeps = max(1, math.ceil(cfl - 1e-12))
        if self.substeps > 1:
            warnings.warn(f"drift CFL number {cfl:.2f} > 1, using {self.substeps} substeps",
                          RuntimeWarning, stacklevel=2)

    # --- single sweeps --------------------------------------------------------

    def hjb_backward(self, m_path: np.ndarray, u_terminal_extra=None, source=None) -> np.ndarray:
        """Backward sweep for a measure path of shape ``(K+1, B, n)``.

        ``source`` is an optional extra running cost per slice, broadcastable
        to ``m_path``, added to ``F`` wherever ``F`` is evaluated.
        """
        model = self.model
        dt = self.time_grid.dt
        cF, cG = model.config.c_F, model.config.c_G
        chn = model.c_H_nodes
        K1 = m_path.shape[0]
        u = np.empty_like(m_path)
        u[-1] = cG * (m_path[-1] @ self.KT)
        if u_terminal_extra is not None:
            u[-1] += u_terminal_extra
        F_path = cF * (m_path @ self.KT) if cF else None
        if source is not None:
            F_path = np.broadcast_to(source, m_path.shape) + (0.0 if F_path is None else F_path)
        for k in range(K1 - 2, -1, -1):
            nxt = u[k + 1]
            p = nxt @ self.DT
            np.multiply(p, p, out=p)
            p += 1.0
            np.sqrt(p, out=p)
            p -= 1.0
            p *= -dt * chn
            p += nxt
            if F_path is not None:
                p += dt * F_path[k + 1]
            np.matmul(p, self.MinvT, out=u[k])
        if not np.all(np.isfinite(u)):
            bad = int(np.argwhere(~np.isfinite(u))[0, 0])
            raise NumericalError(f"HJB sweep produced non-finite values at step {bad}")
        return u

    def drift_flux(self, u_slice: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Upwind face fluxes (weight per unit time) for drift ``-H_p(x, Du)``."""
        b = self.face_velocity(u_slice)
        return (np.maximum(b, 0.0) * w[..., :-1] + np.minimum(b, 0.0) * w[..., 1:]) / self.grid.h

    def face_velocity(self, u_slice: np.ndarray) -> np.ndarray:
        p = u_slice @ self.FgT
        return -self.model.H_p(p, self.model.c_H_faces)

    def fp_step(self, w: np.ndarray, u_slice: np.ndarray) -> np.ndarray:
        dt = self.time_grid.dt / self.substeps
        c = dt / self.grid.h
        b = self.face_velocity(u_slice)
        bp = c * np.maximum(b, 0.0)
        bm = c * np.minimum(b, 0.0)
        for _ in range(self.substeps):
            flux = bp * w[..., :-1]
            flux += bm * w[..., 1:]
            w = w.copy()
            w[..., :-1] -= flux
            w[..., 1:] += flux
        return w @ self.Minv

    def fp_forward(self, u: np.ndarray, m0: np.ndarray) -> np.ndarray:
        """Forward sweep driven by ``u`` of shape ``(K+1, B, n)``."""
        m = np.empty_like(u)
        m[0] = m0
        for k in range(u.shape[0] - 1):
            w = self.fp_step(m[k], u[k])
            if np.any(w < NEGATIVE_CLIP):
                w = np.clip(w, 0.0, None)
                w /= w.sum(axis=-1, keepdims=True)
            m[k + 1] = w
        return m


class AndersonMixer:
    """Anderson acceleration of a fixed-point map, one problem per batch row.

    ``update(x, g)`` takes the current iterates ``x`` and their images
    ``g = G(x)`` (both shaped ``(B, ...)``) and returns the next iterates.
    The last ``depth`` differences are kept in a ring buffer; the least-squares
    mixing weights do not depend on their order.
    """

    def __init__(self, depth: int = 5, beta: float = 1.0, reg: float = 1e-12):
        self.depth = depth
        self.beta = beta
        self.reg = reg
        self._dx = None
        self._df = None
        self._count = 0
        self._prev = None

    def update(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        B = x.shape[0]
        xf = np.array(x.reshape(B, -1), copy=True)
        f = g.reshape(B, -1) - xf
        if self._dx is None:
            self._dx = np.empty((B, self.depth, xf.shape[1]))
            self._df = np.empty_like(self._dx)
        if self._prev is not None:
            slot = self._count % self.depth
            np.subtract(xf, self._prev[0], out=self._dx[:, slot])
            np.subtract(f, self._prev[1], out=self._df[:, slot])
            self._count += 1
        self._prev = (xf, f)
        step = xf + self.beta * f
        used = min(self._count, self.depth)
        if used:
            dF = self._df[:, :used]
            gram = dF @ dF.transpose(0, 2, 1)
            scale = np.trace(gram, axis1=1, axis2=2)[:, None, None] + 1e-300
            gram += self.reg * scale * np.eye(used)
            gamma = np.linalg.solve(gram, dF @ f[..., None]).transpose(0, 2, 1)
            step -= (gamma @ self._dx[:, :used])[:, 0]
            step -= self.beta * (gamma @ dF)[:, 0]
        return step.reshape(x.shape)

    def keep(self, mask: np.ndarray) -> None:
        """Drop the batch rows where ``mask`` is False from the stored history."""
        if self._dx is not None:
            self._dx = self._dx[mask]
            self._df = self._df[mask]
        if self._prev is not None:
            self._prev = (self._prev[0][mask], self._prev[1][mask])


def _prepare_m0(m0, grid: Grid1D) -> tuple[np.ndarray, bool]:
    w = as_weights(m0)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    if w.shape[-1] != grid.n_cells:
        raise InvalidArgumentError("initial measure does not match the grid")
    validate_weights(w, tol=1e-10)
    return w, single


def _start_index(t0, time_grid: TimeGrid) -> int:
    if isinstance(t0, (int, np.integer)):
        start = int(t0)
    else:
        start = time_grid.index_of(float(t0))
    if not 0 <= start < time_grid.n_steps:
        raise InvalidArgumentError(f"start index {start} must lie before the horizon")
    return start


def solve_hjb_backward(m_path, model: Model, time_grid: TimeGrid, disc=None, *, source=None,
                       terminal=None) -> np.ndarray:
    """Value function for a prescribed measure path (slices ``(K+1, n)`` or batched).

    ``source`` (slices ``(K+1, n)``) adds a running cost on top of ``F``;
    ``terminal`` adds a field to the terminal condition ``G``.
    """
    disc = disc or MfgDiscretization(model, time_grid)
    mp = np.asarray(m_path, dtype=float)
    single = mp.ndim == 2
    if single:
        mp = mp[:, None, :]
    validate_weights(mp, tol=1e-9)
    if source is not None:
        source = np.asarray(source, dtype=float)
        if source.ndim == 2:
            source = source[:, None, :]
    u = disc.hjb_backward(mp, terminal, source)
    return u[:, 0] if single else u


def solve_fp_forward(u, m0, model: Model, time_grid: TimeGrid, disc=None) -> np.ndarray:
    """Measure path driven by the value function ``u`` from ``m0``."""
    disc = disc or MfgDiscretization(model, time_grid)
    w0, single = _prepare_m0(m0, model.grid)
    uu = np.asarray(u, dtype=float)
    if uu.ndim == 2:
        uu = np.broadcast_to(uu[:, None, :], (uu.shape[0], w0.shape[0], uu.shape[1]))
    m = disc.fp_forward(uu, w0)
    return m[:, 0] if single else m


def solve_mfg(
    m0,
    t0,
    model: Model,
    time_grid: TimeGrid,
    *,
    damping: float = 0.5,
    tol: float = 1e-8,
    max_iter: int = 200,
    initial_guess=None,
    disc: MfgDiscretization | None = None,
    anderson: int = 0,
) -> MfgSolution:
    """Damped Picard iteration ``m <- (1 - theta) m + theta Phi(m)``.

    ``Phi`` solves the HJB equation along the current measure path and then the
    Fokker-Planck equation with the resulting drift.  Iteration stops when the
    sup over time of the Wasserstein-1 increment is at most ``tol``.  When the
    increment grows (after the third iteration) the damping is halved.

    ``m0`` may be a stack of measures; they are marched together and each one
    is frozen as soon as its own increment meets the tolerance.  ``initial_guess`` is a measure path (default: ``m0``
    frozen in time) or the string ``"uniform"``.

    ``anderson > 0`` replaces the damped update by Anderson mixing of that
    depth; the stopping rule then applies to ``sup_t d1(Phi(m), m)`` and the
    returned path is the last ``Phi(m)``.
    """
    if not 0 < damping <= 1:
        raise InvalidArgumentError("damping must lie in (0, 1]")
    grid = model.grid
    disc = disc or MfgDiscretization(model, time_grid)
    if disc.time_grid != time_grid or disc.model is not model:
        raise InvalidArgumentError("discretisation built for another model or time grid")
    w0, single = _prepare_m0(m0, grid)
    start = _start_index(t0, time_grid)
    n_slices = time_grid.n_steps - start + 1
    B = w0.shape[0]

    if initial_guess is None:
        m = np.broadcast_to(w0, (n_slices, B, grid.n_cells)).copy()
    elif isinstance(initial_guess, str) and initial_guess == "uniform":
        m = np.broadcast_to(grid.uniform(), (n_slices, B, grid.n_cells)).copy()
        m[0] = w0
    else:
        m = np.asarray(initial_guess, dtype=float).reshape(n_slices, B, grid.n_cells).copy()
        m[0] = w0

    theta = damping
    history: list[float] = []
    coupled = model.config.c_F != 0 or model.config.c_G != 0
    mixer = AndersonMixer(anderson, beta=damping) if anderson else None
    result = m.copy()
    member_gap = np.full(B, math.inf)
    active = np.arange(B)  # batch members still being iterated
    pending = np.ones(B, dtype=bool)  # ... and among those, the ones not yet converged
    w_act = w0
    for it in range(1, max_iter + 1):
        u = disc.hjb_backward(m)
        phi = disc.fp_forward(u, w_act)
        residual = np.max(signed_w1(phi - m, grid), axis=0)
        if mixer is not None:
            gaps, accepted = residual, phi
        else:
            gaps = theta * residual
            accepted = (1.0 - theta) * m + theta * phi
        done = pending & (gaps <= tol)
        if not coupled and it >= 2:
            done = pending.copy()
        result[:, active[done]] = accepted[:, done]
        member_gap[active[done]] = gaps[done]
        history.append(float(gaps[pending].max()))
        pending &= ~done
        log.debug("fixed-point iteration %d: gap %.3e, %d pending", it, history[-1], pending.sum())
        if not pending.any():
            break
        if mixer is not None:
            m = np.moveaxis(mixer.update(np.moveaxis(m, 1, 0), np.moveaxis(phi, 1, 0)), 0, 1)
        else:
            m = accepted
            if it > 3 and history[-1] > history[-2]:
                theta = max(theta * 0.5, 1.0 / 64.0)
        # converged members ride along until enough of them can be dropped at once
        if pending.sum() <= 0.75 * pending.size:
            if mixer is not None:
                mixer.keep(pending)
            m = m[:, pending]
            active = active[pending]
            w_act = w_act[pending]
            pending = np.ones(active.size, dtype=bool)
    else:
        raise NonConvergenceError("MFG fixed-point iteration did not converge", history[-1], max_iter)

    m = result
    gap = float(member_gap.max())
    u = disc.hjb_backward(m)
    if single:
        u, m = u[:, 0], m[:, 0]
    return MfgSolution(u, m, start, time_grid, len(history), gap, history)


def fixed_point_residual(sol: MfgSolution, model: Model, disc=None) -> float:
    """``sup_t d1(Phi(m)(t), m(t))``: how far the stored pair is from a fixed point."""
    disc = disc or MfgDiscretization(model, sol.time_grid)
    u = sol.u if sol.batched else sol.u[:, None]
    m = sol.m if sol.batched else sol.m[:, None]
    phi = disc.fp_forward(u, m[0])
    return float(np.max(signed_w1(phi - m, model.grid)))


def neumann_residual(field_slices, grid: Grid1D) -> float:
    """Largest one-sided boundary difference quotient over the given slices."""
    f = np.asarray(field_slices)
    left = np.abs(f[..., 1] - f[..., 0]) / grid.h
    right = np.abs(f[..., -1] - f[..., -2]) / grid.h
    return float(max(left.max(), right.max()))


def hjb_step_residual(u, m_path, model: Model, time_grid: TimeGrid) -> float:
    """Largest defect of ``u`` in the discrete HJB equations along ``m_path``."""
    disc = MfgDiscretization(model, time_grid)
    u = np.asarray(u)
    mp = np.asarray(m_path)
    dt = time_grid.dt
    c = model.config
    lhs = (u[:-1] - dt * (u[:-1] @ disc.A.T))
    rhs = u[1:] + dt * (c.c_F * (mp[1:] @ disc.KT) - model.H(gradient(u[1:], model.grid), model.c_H_nodes))
    term = np.abs(u[-1] - c.c_G * (mp[-1] @ disc.KT)).max()
    return float(max(np.abs(lhs - rhs).max() / dt, term))
