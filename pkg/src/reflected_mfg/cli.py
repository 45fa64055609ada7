"""Command line entry point: ``reflected-mfg <command> --config PATH [--out DIR] ...``.

Exit codes: 0 success, 1 configuration or argument error, 2 numerical failure,
3 budget refusal, 4 invariant failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np

from reflected_mfg import __version__
from reflected_mfg.config import RunConfig, parse_config
from reflected_mfg.convergence import ExperimentContext, run_convergence
from reflected_mfg.errors import BudgetError, ConfigError, ReflectedMfgError
from reflected_mfg.grid import (
    TimeGrid,
    empirical_measure,
    write_field_csv,
    write_matrix_csv,
)
from reflected_mfg.master import MasterEvaluator
from reflected_mfg.mfg import MfgDiscretization, fixed_point_residual, solve_mfg
from reflected_mfg.model import Model
from reflected_mfg.nash import COARSE_N, ProjectionLattice, solve_nash
from reflected_mfg.particles import (
    feedback_gap,
    gaussian_increments,
    sample_initial,
    simulate_coupled,
    simulate_paths,
    trajectory_gap,
)

log = logging.getLogger("reflected_mfg")

COMMANDS = ("solve-mfg", "solve-nash", "eval-master", "simulate", "converge", "check")


@dataclasses.dataclass
class RunContext:
    config: RunConfig
    out: Path
    jobs: int = 1
    expensive: bool = False

    @property
    def model(self) -> Model:
        return self.config.build_model()

    @property
    def time_grid(self) -> TimeGrid:
        return self.config.build_time_grid()

    def evaluator(self, model: Model | None = None) -> MasterEvaluator:
        e = self.config.experiment
        return MasterEvaluator(model or self.model, self.time_grid, tol=e.tolerances.mfg,
                               linear_tol=e.tolerances.linear, max_iter=e.max_iter, anderson=e.anderson)

    def wants(self, fmt: str) -> bool:
        return fmt in self.config.output.formats

    def write_json(self, name: str, payload) -> None:
        (self.out / name).write_text(json.dumps(payload, indent=2, sort_keys=True))

    def require_expensive_for(self, N_list) -> None:
        if COARSE_N in N_list and not self.expensive:
            raise BudgetError(f"N={COARSE_N} runs only with --expensive")


def _estimate(est) -> dict:
    return {"value": float(est.value), "stderr": float(est.stderr)}


# --- commands ------------------------------------------------------------------------


def cmd_solve_mfg(ctx: RunContext) -> int:
    model, tg = ctx.model, ctx.time_grid
    m0 = ctx.config.initial_measure(model.grid)
    e = ctx.config.experiment
    disc = MfgDiscretization(model, tg)
    sol = solve_mfg(m0, 0, model, tg, tol=e.tolerances.mfg, max_iter=e.max_iter, anderson=e.anderson, disc=disc)
    if ctx.wants("csv"):
        write_matrix_csv(ctx.out / "u.csv", sol.u)
        write_matrix_csv(ctx.out / "m.csv", sol.m)
    ctx.write_json("mfg.json", {
        "iterations": sol.iterations_used,
        "final_gap": sol.final_gap,
        "fixed_point_residual": fixed_point_residual(sol, model, disc),
        "mass_error": float(np.max(np.abs(sol.m.sum(axis=-1) - 1.0))),
    })
    return 0


def cmd_solve_nash(ctx: RunContext) -> int:
    e = ctx.config.experiment
    ctx.require_expensive_for(e.N_list)
    model, tg = ctx.model, ctx.time_grid

    def one(N):
        return N, solve_nash(N, model, tg, tol=e.tolerances.nash, memory_budget=e.budgets.memory_bytes)

    with ThreadPoolExecutor(max_workers=ctx.jobs) as pool:
        fields = dict(pool.map(one, e.N_list))
    summary = {}
    for N, field in fields.items():
        if ctx.wants("bin"):
            field.save(ctx.out / f"nash_N{N}.bin", {"config_hash": ctx.config.digest()})
        if ctx.wants("csv") and N == 2:
            write_matrix_csv(ctx.out / "nash_N2_t0.csv", field.values[0])
        summary[str(N)] = {"coarse": field.coarse, "max_inner_iterations": int(max(field.inner_iterations)),
                           "value_t0_min": float(field.values[0].min()),
                           "value_t0_max": float(field.values[0].max())}
    ctx.write_json("nash.json", summary)
    return 0


def cmd_eval_master(ctx: RunContext) -> int:
    ev = ctx.evaluator()
    grid = ev.grid
    m0 = ctx.config.initial_measure(grid)
    res = ev.eval_U(0, m0)
    y_mid = grid.n_cells // 2
    dmU = ev.dm_U(0, m0, y_mid)
    if ctx.wants("csv"):
        write_field_csv(ctx.out / "U_t0.csv", grid, res.u_slice)
        write_field_csv(ctx.out / "DmU_t0_mid.csv", grid, dmU)
        if ctx.expensive:
            write_matrix_csv(ctx.out / "dU_dm_kernel_t0.csv", ev.derivative_kernel(0, m0))
    ctx.write_json("master.json", {"y_index": y_mid, "U_t0_max": float(np.max(np.abs(res.u_slice))),
                                   "DmU_mid_max": float(np.max(np.abs(dmU))), "kernel_written": ctx.expensive})
    return 0


def cmd_simulate(ctx: RunContext) -> int:
    e = ctx.config.experiment
    ctx.require_expensive_for(e.N_list)
    model, tg = ctx.model, ctx.time_grid
    ev = ctx.evaluator(model)
    m0 = ctx.config.initial_measure(model.grid)
    out = {}
    for N in e.N_list:
        nash = solve_nash(N, model, tg, tol=e.tolerances.nash, memory_budget=e.budgets.memory_bytes)
        lat = ProjectionLattice(ev, N)
        for seed in e.seeds:
            ens = simulate_coupled(N, nash, lat, model, m0, e.n_paths, seed, budget=e.budgets.particle_bytes)
            if ctx.wants("bin"):
                ens.save(ctx.out / f"paths_N{N}_seed{seed}.bin")
            tr, fb = trajectory_gap(ens), feedback_gap(ens, nash, lat)
            out[f"N{N}_seed{seed}"] = {"trajectory_gap": _estimate(tr["mean_sup_pooled"]),
                                       "feedback_gap": _estimate(fb["pooled"]),
                                       "t0_gradient_gap": _estimate(fb["t0_gap"])}
    ctx.write_json("simulate.json", out)
    return 0


def cmd_converge(ctx: RunContext) -> int:
    e = ctx.config.experiment
    ctx.require_expensive_for(e.N_list)
    model, tg = ctx.model, ctx.time_grid
    ectx = ExperimentContext(model, tg, ctx.evaluator(model), memory_budget=e.budgets.memory_bytes,
                             nash_tol=e.tolerances.nash)
    if ctx.jobs > 1:
        with ThreadPoolExecutor(max_workers=ctx.jobs) as pool:
            list(pool.map(ectx.nash, e.N_list))
    report = run_convergence(ectx, e.N_list, ctx.config.initial_measure(model.grid), n_random=e.n_random,
                             time_stride=e.time_stride, n_paths=e.n_paths, seed=e.seed,
                             mc_budget=e.budgets.mc_samples or None)
    report.write(ctx.out)
    return 0


# --- fast invariant suite ----------------------------------------------------------


def _null_config(cfg: RunConfig) -> RunConfig:
    return cfg.replace("model", c_F=0.0, c_G=0.0, c_H=0.0, c_H_amp=0.0)


def invariant_checks(ctx: RunContext) -> list[tuple[str, bool, float]]:
    """Quick end-to-end checks; each entry is ``(name, passed, measured value)``."""
    cfg = ctx.config
    model, tg = ctx.model, ctx.time_grid
    grid = model.grid
    e = cfg.experiment
    results = []

    null_model = _null_config(cfg).build_model()
    m0 = cfg.initial_measure(grid)
    sol = solve_mfg(m0, 0, null_model, tg, tol=e.tolerances.mfg)
    results.append(("null MFG value vanishes", float(np.abs(sol.u).max()) <= 1e-12, float(np.abs(sol.u).max())))

    disc = MfgDiscretization(model, tg)
    sol = solve_mfg(m0, 0, model, tg, tol=e.tolerances.mfg, max_iter=e.max_iter, anderson=e.anderson, disc=disc)
    mass = float(np.abs(sol.m.sum(axis=-1) - 1.0).max())
    results.append(("FP mass conservation", mass <= 1e-10, mass))
    results.append(("FP positivity", float(sol.m.min()) >= -1e-14, float(sol.m.min())))

    # Mirror symmetry: the model profiles are even about the midpoint.
    mirror_u = np.abs(sol.u - sol.u[..., ::-1]).max()
    sym_m0 = np.allclose(m0.weights, m0.weights[::-1], atol=1e-15)
    if sym_m0:
        results.append(("MFG mirror symmetry", float(mirror_u) <= 1e-8, float(mirror_u)))

    nash_null = solve_nash(2, null_model, tg, tol=e.tolerances.nash, memory_budget=e.budgets.memory_bytes)
    results.append(("null Nash value vanishes", float(np.abs(nash_null.values).max()) <= 1e-12,
                    float(np.abs(nash_null.values).max())))
    nash = solve_nash(2, model, tg, tol=e.tolerances.nash, memory_budget=e.budgets.memory_bytes)
    mirror_v = float(np.abs(nash.values - nash.values[:, ::-1, ::-1]).max())
    results.append(("Nash mirror symmetry", mirror_v <= 1e-9, mirror_v))

    x0 = sample_initial(2, 500, m0, grid, e.seed)
    dW = gaussian_increments(e.seed, (500, 2, tg.n_steps), tg.dt)
    X, _, _ = simulate_paths(x0, lambda k, x: np.zeros_like(x), model, tg, dW)
    inside = bool(np.all((X >= grid.lo) & (X <= grid.hi)))
    results.append(("particles stay in the domain", inside, float(X.size)))

    mass_err = float(np.abs(empirical_measure(X[:, :, -1].ravel(), grid).weights.sum() - 1.0))
    results.append(("empirical measure mass", mass_err <= 1e-12, mass_err))

    rng = np.random.default_rng(e.seed)
    worst = np.inf
    for _ in range(100):
        m1, m2 = rng.dirichlet(np.ones(grid.n_cells)), rng.dirichlet(np.ones(grid.n_cells))
        d = m1 - m2
        worst = min(worst, float(d @ (model.coupling_F(m1) - model.coupling_F(m2))),
                    float(d @ (model.coupling_G(m1) - model.coupling_G(m2))))
    results.append(("coupling monotonicity", worst >= -1e-12, worst))
    return results


def cmd_check(ctx: RunContext) -> int:
    results = invariant_checks(ctx)
    for name, ok, value in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({value:.3g})")
    ctx.write_json("check.json", [{"name": n, "passed": ok, "value": v} for n, ok, v in results])
    return 0 if all(ok for _, ok, _ in results) else 4


HANDLERS = {
    "solve-mfg": cmd_solve_mfg,
    "solve-nash": cmd_solve_nash,
    "eval-master": cmd_eval_master,
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "check": cmd_check,
}


# --- manifest and dispatch -------------------------------------------------------------


def _versions() -> dict:
    out = {"python": platform.python_version(), "reflected_mfg": __version__}
    for pkg in ("numpy", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _artifact_hashes(out: Path) -> dict:
    hashes = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            hashes[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return hashes


def write_manifest(ctx: RunContext, command: str, status: int, wall: float, argv: list[str]) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "exit_status": status,
        "config": ctx.config.to_dict(),
        "config_hash": ctx.config.digest(),
        "seeds": list(ctx.config.experiment.seeds),
        "jobs": ctx.jobs,
        "expensive": ctx.expensive,
        "versions": _versions(),
        "started_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "wall_time_s": wall,
        "artifacts": _artifact_hashes(ctx.out),
    }
    (ctx.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def run_command(command: str, config: RunConfig, out=None, *, jobs: int = 1, expensive: bool = False,
                argv: list[str] | None = None) -> int:
    """Run one command and write its outputs plus ``manifest.json``; returns the exit status."""
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}")
    out = Path(out or config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config, out, max(1, jobs), expensive)
    t = time.perf_counter()
    status = HANDLERS[command](ctx)
    write_manifest(ctx, command, status, time.perf_counter() - t, argv or [])
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reflected-mfg", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (default: output.directory from the config)")
    p.add_argument("--seed", type=int, help="override experiment.seeds with a single seed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for independent per-N solves")
    p.add_argument("--expensive", action="store_true", help="allow full kernel assembly and N=4")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed: must be an unsigned 64-bit integer")
            config = config.replace("experiment", seeds=(args.seed,))
        if args.jobs < 1:
            print("error: --jobs must be at least 1", file=sys.stderr)
            return 1
        return run_command(args.command, config, args.out, jobs=args.jobs, expensive=args.expensive, argv=argv)
    except ReflectedMfgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
