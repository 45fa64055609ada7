"""Reflected particle systems driven by Nash and by projected feedbacks.

Both systems share initial positions and Brownian increments.  Positions are
advanced by Euler-Maruyama and folded back into the interval; the folded
distance is logged as the reflection increment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from reflected_mfg.errors import BudgetError, InvalidArgumentError, InvariantViolation
from reflected_mfg.grid import Grid1D, TimeGrid, as_weights, validate_weights
from reflected_mfg.model import Model

MAX_FOLD_LENGTHS = 8.0
DEFAULT_SAMPLE_BUDGET = 50_000_000  # N * n_paths * n_steps

# stream identifiers mixed into the generator key
_STREAM_INITIAL = 1
_STREAM_NOISE = 2


def reflect_step(x, drift, sigma, dt: float, dW, lo: float = 0.0, hi: float = 1.0):
    """Euler-Maruyama proposal folded back into ``[lo, hi]``.

    Returns ``(x_new, dk)`` with ``dk = |x* - x_new|`` for the proposal ``x*``.
    """
    x = np.asarray(x, dtype=float)
    proposal = x + np.asarray(drift) * dt + np.sqrt(2.0) * np.asarray(sigma) * np.asarray(dW)
    L = hi - lo
    if np.any(np.abs(proposal - x) > MAX_FOLD_LENGTHS * L):
        raise InvalidArgumentError("step is many domain lengths long; reduce dt")
    y = np.mod(proposal - lo, 2.0 * L)
    x_new = lo + np.where(y <= L, y, 2.0 * L - y)
    dk = np.abs(proposal - x_new)
    if x.ndim == 0:
        return float(x_new), float(dk)
    return x_new, dk


def _uniforms(seed: int, stream: int, player: int, size: int) -> np.ndarray:
    """``size`` uniforms in ``(0, 1)`` from the counter-based stream ``(seed, stream, player)``.

    Entry ``k`` depends only on the key and ``k``, so a player's draws are the
    same whatever the number of players or the order of generation.
    """
    key = [seed & 0xFFFFFFFFFFFFFFFF, (stream << 32) | player]
    u = np.random.Generator(np.random.Philox(key=key)).random(size)
    return np.where(u == 0.0, np.finfo(float).tiny, u)


def gaussian_increments(seed: int, shape: tuple, dt: float, refine: int = 1) -> np.ndarray:
    """Brownian increments of shape ``(paths, players, steps)``.

    The increment of ``(path, player, fine step)`` is a fixed function of the
    seed and those three counters (Box-Muller on counter-indexed uniforms).
    With ``refine = r`` the increments are drawn on a grid ``r`` times finer and
    summed, which reproduces the Brownian paths of a run with ``r`` times more
    steps.
    """
    paths, players, steps = shape
    fine = steps * refine
    count = paths * fine
    out = np.empty(shape)
    for i in range(players):
        u = _uniforms(seed, _STREAM_NOISE, i, 2 * ((count + 1) // 2)).reshape(2, -1)
        r = np.sqrt(-2.0 * np.log(u[0]))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u[1]), r * np.sin(2.0 * np.pi * u[1])])[:count]
        out[:, i] = (z.reshape(paths, steps, refine) * np.sqrt(dt / refine)).sum(axis=-1)
    return out


def sample_initial(N: int, n_paths: int, m0, grid: Grid1D, seed: int) -> np.ndarray:
    """I.i.d. node positions of law ``m0`` by inverse CDF, shape ``(n_paths, N)``."""
    w = as_weights(m0)
    validate_weights(w, tol=1e-10)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    u = np.stack([_uniforms(seed, _STREAM_INITIAL, i, n_paths) for i in range(N)], axis=1)
    # side="right" never lands on a zero-weight node (its CDF step is empty)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), grid.n_cells - 1)
    return grid.nodes[idx]


@dataclass
class PathEnsemble:
    """Paired paths ``X`` (projection feedback) and ``Y`` (Nash feedback).

    Arrays are indexed ``(path, time slice, player)``; drifts have one slice
    fewer than positions.
    """

    X: np.ndarray
    Y: np.ndarray
    reflection_X: np.ndarray
    reflection_Y: np.ndarray
    drift_X: np.ndarray
    drift_Y: np.ndarray
    time_grid: TimeGrid
    seed: int
    domain: tuple = (0.0, 1.0)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[2]

    def check_invariants(self) -> None:
        lo, hi = self.domain
        for name, arr in (("X", self.X), ("Y", self.Y)):
            if np.any(arr < lo) or np.any(arr > hi):
                raise InvariantViolation(f"{name} left the domain")
        if not np.array_equal(self.X[:, 0], self.Y[:, 0]):
            raise InvariantViolation("X and Y must start from the same positions")
        for arr in (self.reflection_X, self.reflection_Y):
            if np.any(np.diff(arr, axis=1) < 0):
                raise InvariantViolation("reflection log must be nondecreasing")

    def save(self, path) -> None:
        """Header ``(N, n_paths, n_steps)`` as int64 LE, then X, Y and both logs as float64 LE."""
        path = Path(path)
        K = self.time_grid.n_steps
        with open(path, "wb") as fh:
            fh.write(np.array([self.N, self.n_paths, K], dtype="<i8").tobytes())
            for arr in (self.X, self.Y, self.reflection_X, self.reflection_Y, self.drift_X, self.drift_Y):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        meta = {"seed": int(self.seed), "N": self.N, "n_paths": self.n_paths, "dt": self.time_grid.dt,
                "t0": self.time_grid.t0, "T": self.time_grid.T, "n_steps": K,
                "domain": list(self.domain),
                "layout": "int64le[3] header; float64le X, Y, |k|_X, |k|_Y (path, slice, player); "
                          "drift_X, drift_Y (path, step, player)"}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> PathEnsemble:
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        raw = path.read_bytes()
        N, P, K = (int(v) for v in np.frombuffer(raw[:24], dtype="<i8"))
        data = np.frombuffer(raw[24:], dtype="<f8")
        size_pos, size_drift = P * (K + 1) * N, P * K * N
        parts, off = [], 0
        for size, shape in [(size_pos, (P, K + 1, N))] * 4 + [(size_drift, (P, K, N))] * 2:
            parts.append(data[off:off + size].reshape(shape).copy())
            off += size
        tg = TimeGrid(meta["t0"], meta["T"], K)
        return cls(*parts, time_grid=tg, seed=meta["seed"], domain=tuple(meta["domain"]))


def _check_budget(N: int, n_paths: int, n_steps: int, budget: float) -> None:
    if N * n_paths * n_steps > budget:
        raise BudgetError(f"{N * n_paths * n_steps} particle steps exceed the budget {budget:.3g}")


FeedbackFn = Callable[[int, np.ndarray], np.ndarray]


def simulate_paths(x0: np.ndarray, drift_fn: FeedbackFn, model: Model, time_grid: TimeGrid,
                   dW: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reflected Euler paths from ``x0 (paths, players)`` with increments ``dW``.

    ``drift_fn(k, positions)`` returns the drift of every particle at step
    ``k``.  Returns positions, cumulative reflection and the drifts used.
    """
    lo, hi = model.grid.lo, model.grid.hi
    P, N = x0.shape
    K = time_grid.n_steps
    dt = time_grid.dt
    X = np.empty((P, K + 1, N))
    refl = np.zeros((P, K + 1, N))
    drifts = np.empty((P, K, N))
    X[:, 0] = x0
    for k in range(K):
        x = X[:, k]
        b = drift_fn(k, x)
        drifts[:, k] = b
        X[:, k + 1], dk = reflect_step(x, b, model.sigma_at(x), dt, dW[:, :, k], lo, hi)
        refl[:, k + 1] = refl[:, k] + dk
    return X, refl, drifts


def tensor_feedback(gradient_at: Callable, model: Model, N: int) -> FeedbackFn:
    """Drift ``-H_p(x_i, D_{x_i} w_i(t, x))`` for a field given by ``gradient_at(k, points, i)``."""

    def drift(k: int, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for i in range(N):
            p = gradient_at(k, x, i)
            out[:, i] = -model.H_p(p, model.c_H_at(x[:, i]))
        return out

    return drift


def simulate_coupled(N: int, nash, lattice, model: Model, m0, n_paths: int, seed: int, *,
                     noise_refine: int = 1, budget: float = DEFAULT_SAMPLE_BUDGET) -> PathEnsemble:
    """Paired ``X`` (projection feedback from ``lattice``) and ``Y`` (Nash feedback).

    ``nash`` is a :class:`~reflected_mfg.nash.NashTensorField` and ``lattice`` a
    :class:`~reflected_mfg.nash.ProjectionLattice` on the same grids.
    """
    tg = nash.time_grid
    if nash.N != N or lattice.N != N:
        raise InvalidArgumentError("player counts disagree")
    if nash.grid != model.grid or lattice.grid != model.grid or lattice.evaluator.time_grid != tg:
        raise InvalidArgumentError("Nash field, lattice and model use different grids")
    _check_budget(N, n_paths, tg.n_steps, budget)
    lattice.build(range(tg.n_steps))
    z = sample_initial(N, n_paths, m0, model.grid, seed)
    dW = gaussian_increments(seed, (n_paths, N, tg.n_steps), tg.dt, noise_refine)
    Y, kY, bY = simulate_paths(z, tensor_feedback(nash.gradient_at, model, N), model, tg, dW)
    X, kX, bX = simulate_paths(z, tensor_feedback(lattice.gradient_at, model, N), model, tg, dW)
    ens = PathEnsemble(X, Y, kX, kY, bX, bY, tg, seed, (model.grid.lo, model.grid.hi))
    ens.check_invariants()
    return ens


# --- statistics ---------------------------------------------------------------------


def jackknife(samples: np.ndarray, statistic: Callable[[np.ndarray], float]) -> tuple[float, float]:
    """Estimate and jackknife standard error of ``statistic`` over the first axis."""
    n = samples.shape[0]
    full = statistic(samples)
    loo = np.array([statistic(np.delete(samples, p, axis=0)) for p in range(n)])
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(full), float(se)


def sup_of_mean(samples: np.ndarray) -> tuple[float, float]:
    """``sup_t mean_p samples[p, t]`` with its jackknife error, computed in one pass."""
    n = samples.shape[0]
    total = samples.sum(axis=0)
    full = float(np.max(total / n))
    loo = np.max((total[None] - samples) / (n - 1), axis=1)
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return full, float(se)


def mean_with_error(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and its standard error (the jackknife error of a mean)."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class GapEstimate:
    value: float
    stderr: float


def trajectory_gap(ens: PathEnsemble) -> dict:
    """Per-player ``sup_t E|X - Y|^2`` and ``E sup_t |X - Y|^2`` with standard errors."""
    d2 = (ens.X - ens.Y) ** 2
    sup_mean = [GapEstimate(*sup_of_mean(d2[:, :, i])) for i in range(ens.N)]
    mean_sup = [GapEstimate(*mean_with_error(d2[:, :, i].max(axis=1))) for i in range(ens.N)]
    pooled = GapEstimate(*mean_with_error(d2.max(axis=1).mean(axis=1)))
    return {"sup_mean": sup_mean, "mean_sup": mean_sup, "mean_sup_pooled": pooled}


def feedback_gap(ens: PathEnsemble, nash, lattice) -> dict:
    """``E int |D_i v_i - D_i u_i|^2 (t, Y_t) dt`` per player (trapezoid in time) and the t0 gap."""
    tg = ens.time_grid
    K, N = tg.n_steps, ens.N
    lattice.build(range(K + 1))
    sq = np.empty((ens.n_paths, K + 1, N))
    for k in range(K + 1):
        y = ens.Y[:, k]
        for i in range(N):
            sq[:, k, i] = (nash.gradient_at(k, y, i) - lattice.gradient_at(k, y, i)) ** 2
    w = np.full(K + 1, tg.dt)
    w[[0, -1]] *= 0.5
    integral = np.einsum("pkn,k->pn", sq, w)
    per_player = [GapEstimate(*mean_with_error(integral[:, i])) for i in range(N)]
    pooled = GapEstimate(*mean_with_error(integral.mean(axis=1)))
    z = ens.Y[:, 0]
    t0_abs = np.stack([np.abs(lattice.value_at(0, z, i) - nash.value_at(0, z, i)) for i in range(N)], axis=1)
    return {"per_player": per_player, "pooled": pooled,
            "t0_gap": GapEstimate(*mean_with_error(t0_abs.mean(axis=1))),
            "t0_gap_max": float(t0_abs.max())}


# --- Ito consistency ----------------------------------------------------------------


@dataclass
class TestFunction:
    """A smooth ``phi(t, x)`` with its derivatives, vectorised over arrays."""

    name: str
    value: Callable
    d_t: Callable
    d_x: Callable
    d_xx: Callable

    __test__ = False  # not a pytest class

    def neumann_defect(self, lo: float = 0.0, hi: float = 1.0, t: float = 0.0) -> float:
        return float(max(abs(self.d_x(t, np.float64(lo))), abs(self.d_x(t, np.float64(hi)))))


def ito_consistency_check(phi: TestFunction, positions: np.ndarray, drifts: np.ndarray,
                          model: Model, time_grid: TimeGrid) -> tuple[float, float]:
    """Mean and standard error of the per-path defect in the generator identity.

    ``positions (paths, K+1)`` and ``drifts (paths, K)`` describe one player.
    The defect is ``phi(T, X_T) - phi(t0, X_0) - sum_k dt L phi(t_k, X_k)`` with
    ``L phi = phi_t + a phi'' + b phi'`` and no boundary term.
    """
    t = time_grid.times
    x = positions
    gen = (phi.d_t(t[None, :-1], x[:, :-1]) + model.diffusion_at(x[:, :-1]) * phi.d_xx(t[None, :-1], x[:, :-1])
           + drifts * phi.d_x(t[None, :-1], x[:, :-1]))
    defect = phi.value(t[-1], x[:, -1]) - phi.value(t[0], x[:, 0]) - time_grid.dt * gen.sum(axis=1)
    return mean_with_error(defect)


def neumann_test_functions() -> list[TestFunction]:
    """Five functions with zero normal derivative at both ends of ``[0, 1]``."""
    pi = np.pi
    zero = lambda t, x: 0.0 * x  # noqa: E731
    return [
        TestFunction("cos(pi x)", lambda t, x: np.cos(pi * x), zero,
                     lambda t, x: -pi * np.sin(pi * x), lambda t, x: -pi**2 * np.cos(pi * x)),
        TestFunction("cos(2 pi x)", lambda t, x: np.cos(2 * pi * x), zero,
                     lambda t, x: -2 * pi * np.sin(2 * pi * x), lambda t, x: -4 * pi**2 * np.cos(2 * pi * x)),
        TestFunction("exp(t) cos(3 pi x)", lambda t, x: np.exp(t) * np.cos(3 * pi * x),
                     lambda t, x: np.exp(t) * np.cos(3 * pi * x),
                     lambda t, x: -3 * pi * np.exp(t) * np.sin(3 * pi * x),
                     lambda t, x: -9 * pi**2 * np.exp(t) * np.cos(3 * pi * x)),
        TestFunction("x^2 (1-x)^2", lambda t, x: x**2 * (1 - x) ** 2, zero,
                     lambda t, x: 2 * x * (1 - x) * (1 - 2 * x), lambda t, x: 2 - 12 * x + 12 * x**2),
        TestFunction("(2x^3 - 3x^2)(t+1)", lambda t, x: (2 * x**3 - 3 * x**2) * (t + 1),
                     lambda t, x: (2 * x**3 - 3 * x**2) + 0.0 * t,
                     lambda t, x: (6 * x**2 - 6 * x) * (t + 1), lambda t, x: (12 * x - 6) * (t + 1)),
    ]


def identity_test_function() -> TestFunction:
    """``phi(x) = x``: smooth but with nonzero normal derivative at the walls."""
    return TestFunction("x", lambda t, x: x + 0.0 * t, lambda t, x: 0.0 * x,
                        lambda t, x: 1.0 + 0.0 * x, lambda t, x: 0.0 * x)


def one_sided_test_function() -> TestFunction:
    """``phi(x) = x^2 / 2``: flat at the left wall, slope one at the right wall.

    Unlike ``x``, its boundary contributions cannot cancel between the two
    walls for a mirror-symmetric population.
    """
    return TestFunction("x^2/2", lambda t, x: 0.5 * x**2 + 0.0 * t, lambda t, x: 0.0 * x,
                        lambda t, x: x + 0.0 * t, lambda t, x: 1.0 + 0.0 * x)
