import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflected_mfg.errors import InvalidArgumentError, InvariantViolation
from reflected_mfg.model import ModelConfig

from conftest import make_model, random_measure


class TestConfig:
    def test_ellipticity_enforced(self):
        with pytest.raises(InvariantViolation):
            ModelConfig(diffusion=0.06, diffusion_amp=0.02)

    @pytest.mark.parametrize("field,value", [("smoothing_eps", 0.0), ("horizon_T", 0.0), ("domain_hi", 0.0)])
    def test_rejects_bad_values(self, field, value):
        with pytest.raises(InvalidArgumentError):
            ModelConfig(**{field: value})

    def test_bounds_on_nodes(self):
        m = make_model(31, diffusion=0.12, diffusion_amp=0.05)
        assert m.a.min() >= m.config.lambda_min
        assert m.a.max() <= m.mu

    def test_digest_depends_on_values(self):
        assert ModelConfig().digest() != ModelConfig(c_F=2.0).digest()
        assert ModelConfig().digest() == ModelConfig().digest()

    def test_null_switches_everything_off(self):
        c = ModelConfig.null()
        assert c.c_F == c.c_G == c.c_H == 0.0


class TestHamiltonian:
    def test_origin(self):
        H, Hp, Hpp = make_model().hamiltonian(0.5, 0.0)
        assert (H, Hp, Hpp) == (0.0, 0.0, 1.0)

    def test_sqrt_three(self):
        H, Hp, Hpp = make_model().hamiltonian(0.5, np.sqrt(3.0))
        assert H == pytest.approx(1.0, abs=1e-14)
        assert Hp == pytest.approx(np.sqrt(3.0) / 2, abs=1e-14)
        assert Hpp == pytest.approx(1 / 8, abs=1e-14)

    def test_derivative_by_central_difference(self):
        m = make_model(c_H_amp=0.3)
        x, p = np.linspace(0, 1, 11), np.linspace(-3, 3, 11)
        errs = []
        for h in (1e-2, 5e-3):
            Hp_fd = (m.hamiltonian(x, p + h)[0] - m.hamiltonian(x, p - h)[0]) / (2 * h)
            errs.append(np.abs(Hp_fd - m.hamiltonian(x, p)[1]).max())
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)

    def test_bounds_random(self, rng):
        m = make_model(c_H_amp=0.4)
        x = rng.uniform(0, 1, 10_000)
        p = rng.standard_normal(10_000) * 50
        _, Hp, Hpp = m.hamiltonian(x, p)
        assert np.all(Hpp > 0) and Hpp.max() <= m.c_H_sup
        assert np.abs(Hp).max() <= m.c_H_sup

    def test_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            make_model().hamiltonian(0.5, np.nan)


class TestCouplings:
    def test_uniform_gives_constant(self):
        m = make_model(31, c_F=2.0)
        F = m.coupling_F(m.grid.uniform())
        assert np.allclose(F, 2.0 / m.grid.length, atol=1e-12)

    def test_monotone(self, rng):
        m = make_model(31, diffusion_amp=0.03)
        for _ in range(100):
            a, b = random_measure(rng, 31), random_measure(rng, 31)
            assert (a - b) @ (m.coupling_F(a) - m.coupling_F(b)) >= -1e-12
            assert (a - b) @ (m.coupling_G(a) - m.coupling_G(b)) >= -1e-12

    def test_boundary_slope_shrinks(self, rng):
        slopes = []
        for n in (21, 41, 81):
            m = make_model(n)
            w = np.zeros(n)
            w[n // 4] = 1.0
            F = m.coupling_F(w)
            slopes.append(abs(F[1] - F[0]) / m.grid.h)
        assert slopes[2] < slopes[1] < slopes[0]

    def test_rejects_non_probability(self):
        m = make_model()
        with pytest.raises(InvariantViolation):
            m.coupling_F(np.full(21, 0.5))

    def test_derivative_normalised(self, rng):
        m = make_model(31)
        w = random_measure(rng, 31)
        D = m.flat_derivative_matrix(w)
        assert np.abs(D @ w).max() <= 1e-12
        assert m.coupling_derivative(4, 9, w) == pytest.approx(D[4, 9], abs=1e-14)

    def test_kernel_symmetric(self):
        K = make_model(31, diffusion_amp=0.04).kernel
        assert np.abs(K - K.T).max() <= 1e-10

    def test_linear_expansion_exact(self, rng):
        m = make_model(31)
        a, b = random_measure(rng, 31), random_measure(rng, 31)
        s = 0.3
        lhs = m.coupling_F((1 - s) * a + s * b) - m.coupling_F(a)
        rhs = s * m.flat_derivative_matrix(a) @ (b - a)
        assert np.abs(lhs - rhs).max() <= 1e-12

    def test_heat_flow(self):
        m = make_model(21)
        assert np.array_equal(m.heat_flow_matrix(0.0), np.eye(21))
        S = m.heat_flow_matrix(0.05)
        assert np.allclose(S.sum(axis=0), 1.0) and np.all(S >= 0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 3.0), st.floats(0.0, 3.0))
    def test_monotone_weights(self, cF, cG):
        m = make_model(15, c_F=cF, c_G=cG)
        rng = np.random.default_rng(int(cF * 1000 + cG))
        a, b = random_measure(rng, 15), random_measure(rng, 15)
        assert (a - b) @ (m.coupling_F(a) - m.coupling_F(b)) >= -1e-12
