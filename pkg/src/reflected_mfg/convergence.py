"""Convergence experiments in the number of players and log-log rate fits."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reflected_mfg.errors import InvalidArgumentError
from reflected_mfg.grid import TimeGrid
from reflected_mfg.master import MasterEvaluator
from reflected_mfg.model import Model
from reflected_mfg.nash import (
    DEFAULT_MEMORY_BUDGET,
    NashTensorField,
    ProjectionLattice,
    nash_residual,
    solve_nash,
)
from reflected_mfg.particles import feedback_gap, simulate_coupled, trajectory_gap

log = logging.getLogger(__name__)

METRICS = ("value_gap", "w_gap", "residual", "trajectory_gap", "feedback_gap")


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {"slope": _jsonable(self.slope), "intercept": _jsonable(self.intercept),
                "r2": _jsonable(self.r2), "degenerate": self.degenerate}


DEGENERATE_FIT = RateFit(math.nan, math.nan, math.nan, True)


def rate_fit(Ns, errors) -> RateFit:
    """Least squares line through ``(log N, log error)``.

    Fewer than two points, repeated ``N`` or non-positive errors give
    :data:`DEGENERATE_FIT`.
    """
    N = np.asarray(Ns, dtype=float)
    e = np.asarray(errors, dtype=float)
    if N.size < 2 or N.size != e.size or np.any(e <= 0) or np.any(N <= 0) or np.unique(N).size < 2:
        return DEGENERATE_FIT
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(N))):
        return DEGENERATE_FIT
    x, y = np.log(N), np.log(e)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2)


def _jsonable(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


@dataclass
class Estimate:
    value: float
    stderr: float = 0.0


@dataclass
class ConvergenceReport:
    """Per-N metrics with error bars and the fitted slopes."""

    instance: str
    N_list: list
    metrics: dict = field(default_factory=dict)  # metric -> {N: Estimate}
    slopes: dict = field(default_factory=dict)  # metric -> RateFit
    runtime: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if list(self.N_list) != sorted(set(self.N_list)):
            raise InvalidArgumentError("N_list must be strictly increasing")

    def add(self, metric: str, N: int, value: float, stderr: float = 0.0) -> None:
        if not value >= 0:
            raise InvalidArgumentError(f"{metric} must be nonnegative, got {value}")
        self.metrics.setdefault(metric, {})[int(N)] = Estimate(float(value), float(stderr))

    def fit(self) -> None:
        for name, per_N in self.metrics.items():
            Ns = sorted(per_N)
            self.slopes[name] = rate_fit(Ns, [per_N[n].value for n in Ns])

    def values(self, metric: str) -> list:
        return [self.metrics[metric][n].value for n in sorted(self.metrics[metric])]

    def to_dict(self) -> dict:
        return {
            "instance": self.instance,
            "N_list": list(self.N_list),
            "metrics": {m: {str(n): {"value": e.value, "stderr": e.stderr} for n, e in sorted(v.items())}
                        for m, v in self.metrics.items()},
            "slopes": {m: f.as_dict() for m, f in self.slopes.items()},
            "runtime_s": self.runtime,
            "extras": self.extras,
        }

    def write(self, directory) -> Path:
        """``report.json`` plus one ``<metric>.csv`` with columns ``N,value,stderr``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        for name, per_N in self.metrics.items():
            with open(out / f"{name}.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["N", "value", "stderr"])
                for n in sorted(per_N):
                    wr.writerow([n, repr(per_N[n].value), repr(per_N[n].stderr)])
        return path


class ExperimentContext:
    """Shared solves for one instance: master evaluator, Nash fields and lattices."""

    def __init__(self, model: Model, time_grid: TimeGrid, evaluator: MasterEvaluator | None = None,
                 memory_budget: float = DEFAULT_MEMORY_BUDGET, nash_tol: float = 1e-12):
        self.model = model
        self.grid = model.grid
        self.time_grid = time_grid
        self.evaluator = evaluator or MasterEvaluator(model, time_grid)
        self.memory_budget = memory_budget
        self.nash_tol = nash_tol
        self._nash: dict[int, NashTensorField] = {}
        self._lattice: dict[int, ProjectionLattice] = {}
        self.timings: dict[str, float] = {}

    def nash(self, N: int) -> NashTensorField:
        if N not in self._nash:
            t = time.perf_counter()
            self._nash[N] = solve_nash(N, self.model, self.time_grid, tol=self.nash_tol,
                                       memory_budget=self.memory_budget)
            self.timings[f"nash_N{N}"] = time.perf_counter() - t
        return self._nash[N]

    def lattice(self, N: int) -> ProjectionLattice:
        if N not in self._lattice:
            self._lattice[N] = ProjectionLattice(self.evaluator, N)
        return self._lattice[N]

    def build_lattice(self, N: int, slices) -> ProjectionLattice:
        lat = self.lattice(N)
        t = time.perf_counter()
        lat.build(slices)
        key = f"lattice_N{N}"
        self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t
        return lat


# --- value convergence -------------------------------------------------------------


def sample_configurations(N: int, n_cells: int, n_random: int, seed: int) -> np.ndarray:
    """Lattice corners plus ``n_random`` uniformly drawn node configurations ``(P, N)``."""
    corners = np.array(list(itertools.product([0, n_cells - 1], repeat=N)), dtype=int)
    rng = np.random.default_rng(seed)
    rand = rng.integers(0, n_cells, size=(n_random, N))
    return np.concatenate([corners, rand])


def _full_empirical(idx: np.ndarray, n_cells: int) -> np.ndarray:
    P, N = idx.shape
    W = np.zeros((P, n_cells))
    for col in idx.T:
        np.add.at(W, (np.arange(P), col), 1.0 / N)
    return W


def experiment_value_convergence(ctx: ExperimentContext, N_list, *, n_random: int = 500,
                                 time_stride: int = 10, seed: int = 0, interior: dict | None = None) -> dict:
    """``sup |v^N_i(t, x) - U(t, x_i, m^N_x)|`` over sampled configurations, players and slices.

    ``m^N_x`` puts weight ``1/N`` on every player including ``i``.  At the
    terminal slice the gap is exactly proportional to ``1/N``; pass a dict as
    ``interior`` to also receive the sup over the slices before the horizon.
    """
    K = ctx.time_grid.n_steps
    slices = sorted(set(range(0, K + 1, time_stride)) | {K})
    out = {}
    for N in N_list:
        nash = ctx.nash(N)
        idx = sample_configurations(N, ctx.grid.n_cells, n_random, seed + N)
        W = _full_empirical(idx, ctx.grid.n_cells)
        P = idx.shape[0]
        sup = sup_interior = 0.0
        for k in slices:
            if k == K:
                U = ctx.model.coupling_G(W)
            else:
                U = ctx.evaluator.eval_U_batch(k, W).u[0]
            for i in range(N):
                order = [i] + [j for j in range(N) if j != i]
                v = nash.values[k][tuple(idx[:, order].T)]
                gap = float(np.max(np.abs(v - U[np.arange(P), idx[:, i]])))
                sup = max(sup, gap)
                if k < K:
                    sup_interior = max(sup_interior, gap)
        out[N] = sup
        if interior is not None:
            interior[N] = sup_interior
        log.info("value gap N=%d: %.4g", N, sup)
    return out


# --- L1(m0) convergence -------------------------------------------------------------


def averaged_value(nash: NashTensorField, m0, start: int = 0, mc_budget: int | None = None,
                   seed: int = 0) -> np.ndarray:
    """``w^N_1(t, x, m0) = E v^N_1(t, x, x_2..x_N)`` with ``x_j ~ m0`` i.i.d. on the nodes.

    Exact tensor contraction by default; ``mc_budget`` switches to Monte Carlo
    over that many draws of the other players.
    """
    w = np.asarray(getattr(m0, "weights", m0), dtype=float)
    V = nash.values[start]
    if mc_budget is None:
        out = V
        for _ in range(nash.N - 1):
            out = np.tensordot(out, w, axes=([1], [0]))
        return out
    rng = np.random.default_rng(seed)
    others = rng.choice(w.size, size=(mc_budget, nash.N - 1), p=w)
    return V[(slice(None),) + tuple(others.T)].mean(axis=-1)


def experiment_w_convergence(ctx: ExperimentContext, N_list, m0, *, start: int = 0,
                             mc_budget: int | None = None, seed: int = 0) -> dict:
    """``|| w^N_1(t0, ., m0) - U(t0, ., m0) ||_{L1(m0)}`` for each ``N``."""
    w = np.asarray(getattr(m0, "weights", m0), dtype=float)
    U = ctx.evaluator.eval_U(start, w).u_slice
    out = {}
    for N in N_list:
        avg = averaged_value(ctx.nash(N), w, start, mc_budget, seed + N)
        out[N] = float(w @ np.abs(avg - U))
    return out


# --- residual and trajectories -----------------------------------------------------


def experiment_residual(ctx: ExperimentContext, N_list, slices=None) -> dict:
    """Sup of the projection defect in the discrete Nash equations for each ``N``."""
    K = ctx.time_grid.n_steps
    slices = range(K) if slices is None else slices
    out = {}
    for N in N_list:
        lat = ctx.build_lattice(N, list(slices) + [k + 1 for k in slices])
        out[N] = nash_residual(lat, ctx.model, ctx.time_grid, slices)
    return out


def experiment_trajectories(ctx: ExperimentContext, N_list, m0, n_paths: int = 2000, seed: int = 0) -> dict:
    """Trajectory and feedback gaps from paired simulations (same seed for every ``N``)."""
    out = {}
    K = ctx.time_grid.n_steps
    for N in N_list:
        nash = ctx.nash(N)
        lat = ctx.build_lattice(N, range(K + 1))
        ens = simulate_coupled(N, nash, lat, ctx.model, m0, n_paths, seed)
        tr = trajectory_gap(ens)
        fb = feedback_gap(ens, nash, lat)
        out[N] = {"trajectory_gap": tr["mean_sup_pooled"], "trajectory_sup_mean": tr["sup_mean"],
                  "feedback_gap": fb["pooled"], "t0_gap": fb["t0_gap"], "t0_gap_max": fb["t0_gap_max"]}
    return out


def run_convergence(ctx: ExperimentContext, N_list, m0, *, metrics=METRICS, n_random: int = 500,
                    time_stride: int = 10, n_paths: int = 2000, seed: int = 0,
                    mc_budget: int | None = None) -> ConvergenceReport:
    """Run the requested experiments and collect them in one report."""
    N_list = list(N_list)
    report = ConvergenceReport(ctx.model.config.digest(), N_list)
    t_all = time.perf_counter()
    if "value_gap" in metrics:
        t = time.perf_counter()
        interior = {}
        for N, v in experiment_value_convergence(ctx, N_list, n_random=n_random, time_stride=time_stride,
                                                 seed=seed, interior=interior).items():
            report.add("value_gap", N, v)
        report.extras["value_gap_before_horizon"] = {str(n): v for n, v in interior.items()}
        report.runtime["value_gap"] = time.perf_counter() - t
    if "w_gap" in metrics:
        t = time.perf_counter()
        for N, v in experiment_w_convergence(ctx, N_list, m0, mc_budget=mc_budget, seed=seed).items():
            report.add("w_gap", N, v)
        report.runtime["w_gap"] = time.perf_counter() - t
    if "residual" in metrics:
        t = time.perf_counter()
        for N, v in experiment_residual(ctx, N_list).items():
            report.add("residual", N, v)
        report.runtime["residual"] = time.perf_counter() - t
    if "trajectory_gap" in metrics or "feedback_gap" in metrics:
        t = time.perf_counter()
        for N, res in experiment_trajectories(ctx, N_list, m0, n_paths, seed).items():
            report.add("trajectory_gap", N, res["trajectory_gap"].value, res["trajectory_gap"].stderr)
            report.add("feedback_gap", N, res["feedback_gap"].value, res["feedback_gap"].stderr)
            report.extras.setdefault("t0_gap", {})[str(N)] = res["t0_gap"].value
        report.runtime["trajectories"] = time.perf_counter() - t
    report.runtime.update(ctx.timings)
    report.runtime["total"] = time.perf_counter() - t_all
    report.fit()
    return report
