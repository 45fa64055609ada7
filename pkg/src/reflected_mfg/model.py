"""Problem instance: diffusion, Hamiltonian and monotone smoothing couplings.

The couplings are ``F(x, m) = c_F (S S m)(x)`` and likewise for ``G``, where
``S`` is the zero-flux heat flow with diffusivity ``a`` run for the smoothing
time.  ``S`` is assembled from a symmetric operator, which makes the couplings
monotone and gives them Neumann-compatible kernels in both variables.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from reflected_mfg.errors import InvalidArgumentError, InvariantViolation
from reflected_mfg.grid import Grid1D, as_weights, divergence_form_matrix, validate_weights

LAMBDA_MIN = 0.05


@dataclass(frozen=True)
class ModelConfig:
    """Parameters of one mean field game instance.

    ``a(x) = diffusion + diffusion_amp * cos(2 pi (x - lo) / |Omega|)`` and
    ``c_H(x) = c_H + c_H_amp * cos(...)`` with the same profile; both are even
    about the midpoint of the domain.
    """

    domain_lo: float = 0.0
    domain_hi: float = 1.0
    horizon_T: float = 0.5
    diffusion: float = 0.1
    diffusion_amp: float = 0.0
    c_H: float = 1.0
    c_H_amp: float = 0.0
    smoothing_eps: float = 0.05
    smoothing_steps: int = 4
    c_F: float = 1.0
    c_G: float = 1.0
    lambda_min: float = LAMBDA_MIN

    def __post_init__(self):
        if not self.domain_lo < self.domain_hi:
            raise InvalidArgumentError("domain_lo must be below domain_hi")
        if self.horizon_T <= 0:
            raise InvalidArgumentError("horizon_T must be positive")
        if self.smoothing_eps <= 0:
            raise InvalidArgumentError("smoothing_eps must be positive")
        if self.smoothing_steps < 1:
            raise InvalidArgumentError("smoothing_steps must be at least 1")
        if self.c_F < 0 or self.c_G < 0:
            raise InvalidArgumentError("coupling weights must be nonnegative")
        if self.c_H < 0 or self.c_H - abs(self.c_H_amp) < 0:
            raise InvalidArgumentError("c_H(x) must be nonnegative")
        if self.diffusion - abs(self.diffusion_amp) < self.lambda_min:
            raise InvariantViolation(
                f"diffusion drops below lambda={self.lambda_min}: "
                f"min a = {self.diffusion - abs(self.diffusion_amp)}"
            )

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def null(cls, **overrides) -> ModelConfig:
        """Instance with every coupling and the Hamiltonian switched off."""
        return cls(c_F=0.0, c_G=0.0, c_H=0.0, c_H_amp=0.0, **overrides)


def _profile(x, base, amp, lo, hi):
    return base + amp * np.cos(2.0 * np.pi * (np.asarray(x, dtype=float) - lo) / (hi - lo))


class Model:
    """A :class:`ModelConfig` bound to a spatial grid."""

    def __init__(self, config: ModelConfig, grid: Grid1D):
        if abs(grid.lo - config.domain_lo) > 1e-14 or abs(grid.hi - config.domain_hi) > 1e-14:
            raise InvalidArgumentError("grid and model disagree on the domain")
        self.config = config
        self.grid = grid
        self.a = self.diffusion_at(grid.nodes)
        if np.any(self.a < config.lambda_min) or np.any(self.a > self.mu):
            raise InvariantViolation("diffusion violates uniform ellipticity on the grid")
        self.sigma = np.sqrt(self.a)
        self.c_H_nodes = self.c_H_at(grid.nodes)
        self.c_H_faces = self.c_H_at(grid.faces)

    @property
    def mu(self) -> float:
        c = self.config
        return c.diffusion + abs(c.diffusion_amp)

    @property
    def c_H_sup(self) -> float:
        c = self.config
        return c.c_H + abs(c.c_H_amp)

    def diffusion_at(self, x):
        c = self.config
        return _profile(x, c.diffusion, c.diffusion_amp, c.domain_lo, c.domain_hi)

    def sigma_at(self, x):
        return np.sqrt(self.diffusion_at(x))

    def c_H_at(self, x):
        c = self.config
        return _profile(x, c.c_H, c.c_H_amp, c.domain_lo, c.domain_hi)

    # --- Hamiltonian -----------------------------------------------------------

    def hamiltonian(self, x, p, c_h=None):
        """``(H, H_p, H_pp)`` for ``H = c_H(x) (sqrt(1 + p^2) - 1)``.

        ``c_h`` may be passed pre-evaluated to skip the profile evaluation.
        """
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise InvalidArgumentError("non-finite argument to the Hamiltonian")
        if c_h is None:
            c_h = self.c_H_at(x)
        r = np.sqrt(1.0 + p * p)
        return c_h * (r - 1.0), c_h * p / r, c_h / (r * r * r)

    def H(self, p, c_h):
        return c_h * (np.sqrt(1.0 + p * p) - 1.0)

    def H_p(self, p, c_h):
        return c_h * p / np.sqrt(1.0 + p * p)

    def H_pp(self, p, c_h):
        r = np.sqrt(1.0 + p * p)
        return c_h / (r * r * r)

    # --- couplings -------------------------------------------------------------

    def heat_flow_matrix(self, duration: float, steps: int | None = None) -> np.ndarray:
        """Backward-Euler zero-flux heat flow with diffusivity ``a`` over ``duration``.

        Symmetric with unit row and column sums, so it maps node weights to
        node weights and fields to fields.
        """
        if duration < 0:
            raise InvalidArgumentError("heat flow duration must be nonnegative")
        n = self.grid.n_cells
        if duration == 0:
            return np.eye(n)
        steps = steps or self.config.smoothing_steps
        L = divergence_form_matrix(self.grid, self.a)
        step = np.linalg.inv(np.eye(n) - (duration / steps) * L)
        S = np.linalg.matrix_power(step, steps)
        return 0.5 * (S + S.T)

    @cached_property
    def smoothing_matrix(self) -> np.ndarray:
        """``S``: the heat flow over the smoothing time ``smoothing_eps``."""
        return self.heat_flow_matrix(self.config.smoothing_eps)

    @cached_property
    def kernel(self) -> np.ndarray:
        """``k(x_i, y_j)``: ``S S`` applied to node indicators divided by ``h``.

        ``F(., m) = c_F * kernel @ weights``.
        """
        S = self.smoothing_matrix
        K = S @ S / self.grid.h
        return 0.5 * (K + K.T)

    def coupling_F(self, m) -> np.ndarray:
        return self._coupling(m, self.config.c_F)

    def coupling_G(self, m) -> np.ndarray:
        return self._coupling(m, self.config.c_G)

    def _coupling(self, m, weight):
        w = as_weights(m)
        validate_weights(w, tol=1e-9)
        return weight * (w @ self.kernel.T)

    def coupling_linear(self, rho, weight) -> np.ndarray:
        """Couplings applied to an arbitrary signed node measure, no checks."""
        return weight * (np.asarray(rho) @ self.kernel.T)

    def flat_derivative_matrix(self, m, weight=None) -> np.ndarray:
        """Matrix ``D[x, y] = dF/dm(x, m, y)`` under the zero-mean normalisation."""
        w = as_weights(m)
        weight = self.config.c_F if weight is None else weight
        K = self.kernel
        return weight * (K - (K @ w)[:, None])

    def coupling_derivative(self, x_index: int, y_index: int, m, weight=None) -> float:
        """``dF/dm(x, m, y)`` at grid nodes ``x`` and ``y``."""
        n = self.grid.n_cells
        if not (0 <= x_index < n and 0 <= y_index < n):
            raise InvalidArgumentError("node index out of range")
        w = as_weights(m)
        weight = self.config.c_F if weight is None else weight
        row = self.kernel[x_index]
        return float(weight * (row[y_index] - row @ w))

    def derivative_pairing(self, m, rho, weight):
        """``int dF/dm(., m, y) rho(dy)`` for a signed node measure ``rho``."""
        rho = np.asarray(rho, dtype=float)
        K = self.kernel
        base = rho @ K.T
        mass = rho.sum(axis=-1, keepdims=True)
        return weight * (base - mass * (np.asarray(m) @ K.T))
