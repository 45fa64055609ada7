import numpy as np
import pytest

from reflected_mfg import GridMeasure, TimeGrid, build_grid, wasserstein1
from reflected_mfg.errors import InvalidArgumentError, NonConvergenceError
from reflected_mfg.grid import signed_w1
from reflected_mfg.mfg import (
    MfgDiscretization,
    fixed_point_residual,
    hjb_step_residual,
    neumann_residual,
    solve_fp_forward,
    solve_hjb_backward,
    solve_mfg,
)

from conftest import make_model, make_null, random_measure


def bump(grid, center=0.3, width=0.1):
    w = np.exp(-0.5 * ((grid.nodes - center) / width) ** 2)
    return w / w.sum()


class TestHJB:
    def test_zero_data(self):
        m = make_null(21)
        tg = TimeGrid(0.0, 0.5, 20)
        u = solve_hjb_backward(np.tile(m.grid.uniform(), (21, 1)), m, tg)
        assert np.all(u == 0.0)

    def test_constant_terminal(self):
        m = make_model(21, c_F=0.0, c_G=1.0)
        tg = TimeGrid(0.0, 0.5, 20)
        u = solve_hjb_backward(np.tile(m.grid.uniform(), (21, 1)), m, tg)
        assert np.allclose(u, 1.0, atol=1e-12)

    def test_manufactured_solution(self):
        """``e^{-t} cos(pi x)`` with its source: second order in ``h`` at small ``dt``."""
        T, K, a = 0.1, 10_000, 0.1
        errs = []
        for n in (20, 40, 80):
            m = make_model(n, c_F=0.0, c_G=0.0, horizon_T=T, diffusion=a)
            tg = TimeGrid(0.0, T, K)
            t, x = tg.times[:, None], m.grid.nodes[None, :]
            exact = np.exp(-t) * np.cos(np.pi * x)
            src = exact + a * np.pi**2 * exact + m.H(-np.pi * np.exp(-t) * np.sin(np.pi * x), 1.0)
            u = solve_hjb_backward(np.tile(m.grid.uniform(), (K + 1, 1)), m, tg, source=src, terminal=exact[-1])
            errs.append(np.abs(u - exact).max())
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders >= 1.5), orders

    def test_step_residual_small(self, small_model, small_time):
        sol = solve_mfg(bump(small_model.grid), 0, small_model, small_time, anderson=5)
        assert hjb_step_residual(sol.u, sol.m, small_model, small_time) <= 1e-10


class TestFP:
    def test_uniform_stationary(self):
        m = make_null(21)
        tg = TimeGrid(0.0, 0.5, 20)
        path = solve_fp_forward(np.zeros((21, 21)), m.grid.uniform(), m, tg)
        assert np.abs(path - m.grid.uniform()).max() <= 1e-14

    def test_mass_every_step(self, small_model, small_time, rng):
        u = rng.standard_normal((small_time.n_steps + 1, 21)) * 3
        path = solve_fp_forward(u, bump(small_model.grid), small_model, small_time)
        assert np.abs(path.sum(axis=1) - 1).max() <= 1e-12
        assert path.min() >= 0

    def test_eigen_series(self):
        """Cell averages of ``1 + cos(pi x)/2`` decaying at rate ``a pi^2``."""
        a = 0.1
        errs = []
        for n, K in ((20, 50), (40, 100), (80, 200)):
            m = make_null(n, diffusion=a)
            tg = TimeGrid(0.0, 0.5, K)
            edges = np.linspace(0.0, 1.0, n + 1)

            def cell_mass(t):
                return np.diff(edges + 0.5 * np.exp(-a * np.pi**2 * t) * np.sin(np.pi * edges) / np.pi)

            path = solve_fp_forward(np.zeros((K + 1, n)), cell_mass(0.0), m, tg)
            exact = np.array([cell_mass(t) for t in tg.times])
            errs.append(np.abs(path - exact).max() / m.grid.h)
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders >= 1.0), orders

    def test_cfl_substeps_warn(self):
        m = make_model(41, c_H=3.0)
        with pytest.warns(RuntimeWarning, match="CFL"):
            MfgDiscretization(m, TimeGrid(0.0, 0.5, 20))


class TestMfg:
    def test_decoupled(self):
        m = make_null(21)
        tg = TimeGrid(0.0, 0.5, 40)
        sol = solve_mfg(bump(m.grid), 0, m, tg)
        assert sol.iterations_used <= 2
        assert np.all(sol.u == 0.0)

    def test_terminal_condition_and_mass(self, small_model, small_time):
        sol = solve_mfg(bump(small_model.grid), 0, small_model, small_time)
        assert np.allclose(sol.u[-1], small_model.coupling_G(sol.m[-1]), atol=1e-14)
        assert np.abs(sol.m.sum(axis=1) - 1).max() <= 1e-10
        assert sol.m.min() >= 0
        assert neumann_residual(sol.u, small_model.grid) <= 5 * small_model.grid.h * np.abs(sol.u).max()

    def test_converged_fixed_point(self, small_model, small_time):
        sol = solve_mfg(bump(small_model.grid), 0, small_model, small_time, tol=1e-10)
        assert sol.final_gap <= 1e-10
        assert fixed_point_residual(sol, small_model) <= 1e-9

    def test_symmetry(self):
        m = make_model(31, diffusion_amp=0.03, c_H_amp=0.2)
        tg = TimeGrid(0.0, 0.5, 50)
        w = bump(m.grid, 0.5, 0.1) + bump(m.grid, 0.2, 0.05) + bump(m.grid, 0.8, 0.05)
        sol = solve_mfg(w / w.sum(), 0, m, tg, tol=1e-11)
        assert np.abs(sol.u - sol.u[:, ::-1]).max() <= 1e-8
        assert np.abs(sol.m - sol.m[:, ::-1]).max() <= 1e-8

    def test_gap_monotone_after_three(self, small_model, small_time):
        sol = solve_mfg(bump(small_model.grid), 0, small_model, small_time, tol=1e-12)
        hist = np.array(sol.gap_history)
        assert np.all(np.diff(hist[3:]) <= 1e-15)

    def test_uniqueness_proxy(self, small_model, small_time):
        w = bump(small_model.grid, 0.7)
        a = solve_mfg(w, 0, small_model, small_time, tol=1e-9)
        b = solve_mfg(w, 0, small_model, small_time, tol=1e-9, initial_guess="uniform")
        assert np.max(signed_w1(a.m - b.m, small_model.grid)) <= 10 * 1e-9

    def test_anderson_agrees_with_picard(self, small_model, small_time):
        w = bump(small_model.grid, 0.25)
        a = solve_mfg(w, 0, small_model, small_time, tol=1e-11)
        b = solve_mfg(w, 0, small_model, small_time, tol=1e-11, anderson=5)
        assert np.abs(a.u - b.u).max() <= 1e-8

    def test_batched_matches_single(self, small_model, small_time, rng):
        W = np.stack([random_measure(rng, 21, atoms=2) for _ in range(4)])
        batch = solve_mfg(W, 0, small_model, small_time, tol=1e-10, anderson=5)
        for b in range(4):
            single = solve_mfg(W[b], 0, small_model, small_time, tol=1e-10, anderson=5)
            assert np.abs(batch.member(b).u - single.u).max() <= 1e-7

    def test_stability_in_data(self, small_model, small_time, rng):
        ratios = []
        for _ in range(5):
            w1, w2 = random_measure(rng, 21), random_measure(rng, 21)
            s1 = solve_mfg(w1, 0, small_model, small_time, anderson=5)
            s2 = solve_mfg(w2, 0, small_model, small_time, anderson=5)
            ratios.append(np.max(signed_w1(s1.m - s2.m, small_model.grid)) / wasserstein1(w1, w2, small_model.grid))
        assert max(ratios) < 5.0

    def test_time_regularity(self, small_model):
        consts = []
        for K in (25, 100):
            tg = TimeGrid(0.0, 0.5, K)
            sol = solve_mfg(GridMeasure.dirac(small_model.grid, 5), 0, small_model, tg, anderson=5)
            d = signed_w1(np.diff(sol.m, axis=0), small_model.grid)
            consts.append(np.max(d) / np.sqrt(tg.dt))
        assert consts[1] <= 2 * consts[0]

    def test_start_index(self, small_model, small_time):
        sol = solve_mfg(bump(small_model.grid), 0.25, small_model, small_time)
        assert sol.start == 25 and sol.u.shape[0] == 26
        with pytest.raises(InvalidArgumentError):
            solve_mfg(bump(small_model.grid), 0.5, small_model, small_time)

    def test_non_convergence_reports_gap(self, small_model, small_time):
        with pytest.raises(NonConvergenceError) as info:
            solve_mfg(bump(small_model.grid), 0, small_model, small_time, max_iter=2, tol=1e-14)
        assert info.value.last_gap > 0 and info.value.iterations == 2

    def test_bad_damping(self, small_model, small_time):
        with pytest.raises(InvalidArgumentError):
            solve_mfg(bump(small_model.grid), 0, small_model, small_time, damping=0.0)
