"""Fifth-order experimental plant: first-order actuator lag feeding a
4-state spring-coupled mechanics with gravity and actuator Coulomb
disturbance, plus the PI feedback used in the case study.

State vector of the mechanics is (dz, z, dy, y); the only measured output
is the load position y.  The actuator filter state nu is appended as a
fifth state for integration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .lti import RationalTF, StateSpace, rk4_step

BLOWUP_LIMIT = 1e6  # m (or m/s); beyond this the run is declared diverged

# Velocities below this magnitude count as rest for the Coulomb sign term,
# so equilibria are not disturbed by floating-point dust (sign(0) = 0).
VEL_EPS = 1e-12


def _sign_db(v: float) -> float:
    if abs(v) <= VEL_EPS:
        return 0.0
    return math.copysign(1.0, v)


class NumericalBlowup(Exception):
    """A state magnitude exceeded BLOWUP_LIMIT; the run must be truncated."""

    def __init__(self, t: float, magnitude: float):
        super().__init__(f"state magnitude {magnitude:.3e} at t={t:.4f}s")
        self.t = t
        self.magnitude = magnitude


def _default_A() -> np.ndarray:
    return np.array(
        [
            [-333.35, -333.33, 0.015, 333.33],
            [1.0, 0.0, 0.0, 0.0],
            [0.012, 266.66, -0.012, -266.66],
            [0.0, 0.0, 1.0, 0.0],
        ]
    )


@dataclass(frozen=True)
class PlantParams:
    """Nominal identified model parameters.

    Overriding any value is allowed for experiments but must be surfaced in
    the run metadata by the caller.
    """

    A: np.ndarray = field(default_factory=_default_A)
    B: np.ndarray = field(default_factory=lambda: np.array([1.667, 0.0, 0.0, 0.0]))
    C: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    gravity: float = 9.806          # m/s^2, acts on both velocity rows
    coulomb: float = 0.83           # m/s^2 equivalent, actuator row only
    actuator_gain: float = 3.2811   # V -> force-equivalent DC gain
    actuator_tc: float = 0.0012    # s, actuator filter time constant

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float).reshape(4)
        C = np.asarray(self.C, dtype=float).reshape(4)
        if A.shape != (4, 4):
            raise ValueError("A must be 4x4")
        A.setflags(write=False)
        B.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    def constant_disturbance(self) -> np.ndarray:
        """Gravity-only disturbance rate vector (Coulomb term frozen at zero)."""
        return np.array([-self.gravity, 0.0, -self.gravity, 0.0])

    def disturbance(self, x: np.ndarray) -> np.ndarray:
        """Full disturbance rate: gravity plus the identified actuator
        Coulomb-type term signed by the actuator velocity (first state);
        sign(0) = 0.  The positive orientation is the identified one; it is
        what makes the PI loop's divergence reproducible."""
        d = self.constant_disturbance()
        d[0] += self.coulomb * _sign_db(float(x[0]))
        return d

    def mechanics_ss(self) -> StateSpace:
        return StateSpace(self.A, self.B, self.C, bias=self.constant_disturbance())

    def actuator_tf(self) -> RationalTF:
        return RationalTF([self.actuator_gain], [self.actuator_tc, 1.0])

    def augmented_matrices(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(A5, B5, bias5) for the stacked state (dz, z, dy, y, nu)."""
        A5 = np.zeros((5, 5))
        A5[:4, :4] = self.A
        A5[:4, 4] = self.B
        A5[4, 4] = -1.0 / self.actuator_tc
        B5 = np.zeros(5)
        B5[4] = self.actuator_gain / self.actuator_tc
        bias5 = np.zeros(5)
        bias5[:4] = self.constant_disturbance()
        return A5, B5, bias5


@dataclass(frozen=True)
class PlantState:
    """Mechanics state, actuator filter state, and current time."""

    x: np.ndarray
    nu: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(4)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def y(self) -> float:
        return float(self.x[3])


@dataclass(frozen=True)
class NoiseModel:
    """Bounded measurement noise specification; a seeded stream is drawn from it."""

    kind: str = "uniform"  # "none" or "uniform"
    bound: float = 5e-5    # m, half-width
    seed: int = 2024

    def __post_init__(self):
        if self.kind not in ("none", "uniform"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.bound < 0.0:
            raise ValueError("noise bound must be nonnegative")

    def stream(self) -> "NoiseStream":
        return NoiseStream(self)


class NoiseStream:
    """Deterministic sample source for a NoiseModel (same seed, same sequence)."""

    def __init__(self, model: NoiseModel):
        self.model = model
        self._rng = np.random.Generator(np.random.PCG64(model.seed))

    def sample(self) -> float:
        if self.model.kind == "none" or self.model.bound == 0.0:
            return 0.0
        return float(self._rng.uniform(-self.model.bound, self.model.bound))


def plant_step(
    state: PlantState,
    u: float,
    dt: float,
    noise: Optional[NoiseStream] = None,
    params: Optional[PlantParams] = None,
) -> Tuple[PlantState, float]:
    """Advance actuator filter and mechanics together by one 4-stage step.

    Returns the new state and the measured output y + v at the new state.

    Raises:
        NumericalBlowup: if any advanced state magnitude exceeds BLOWUP_LIMIT.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if not math.isfinite(u):
        raise ValueError("input must be finite")
    p = params if params is not None else PlantParams()
    A5, B5, bias5 = p.augmented_matrices()
    coulomb = p.coulomb
    bu = B5 * float(u)

    def rate(xa: np.ndarray) -> np.ndarray:
        r = A5 @ xa + bu + bias5
        r[0] += coulomb * _sign_db(xa[0])
        return r

    xa0 = np.concatenate([state.x, [state.nu]])
    xa1 = rk4_step(None, xa0, 0.0, dt, rate_fn=rate)
    peak = float(np.max(np.abs(xa1)))
    if peak > BLOWUP_LIMIT:
        raise NumericalBlowup(state.t + dt, peak)
    new = PlantState(x=xa1[:4], nu=float(xa1[4]), t=state.t + dt)
    v = noise.sample() if noise is not None else 0.0
    return new, new.y + v


@dataclass(frozen=True)
class PiState:
    """PI regulator state: gains, reference, feed-forward and the error integral."""

    r1: float = 0.010     # m, position reference
    r2: float = 0.0       # V, constant feed-forward
    kp: float = 140.0
    ki: float = 170.0
    integral: float = 0.0  # m*s, accumulated (r1 - y) dt

    def __post_init__(self):
        if not math.isfinite(self.integral):
            raise ValueError("integral must be finite")


def pi_control(pi: PiState, y: float, dt: float) -> Tuple[PiState, float]:
    """One PI update: output uses the integral accumulated so far, then the
    integral advances by the rectangular rule."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    err = pi.r1 - y
    u = pi.kp * err + pi.ki * pi.integral + pi.r2
    return replace(pi, integral=pi.integral + err * dt), u


def make_gtilde() -> RationalTF:
    """Feed-forward sub-dynamics of the identified plant (exact coefficients)."""
    return RationalTF(num=[0.1544, 3432.0], den=[0.002824, 3.295, 785.5, 784.5])


def equilibrium(params: PlantParams, r1: float) -> Tuple[np.ndarray, float, float]:
    """Stationary point (x*, nu*, u*) with the Coulomb term frozen at zero
    and the output pinned to r1.

    The mechanics matrix is singular (rigid translation of both masses), so
    the output constraint C x = r1 closes the system.
    """
    M = np.zeros((5, 5))
    M[:4, :4] = params.A
    M[:4, 4] = params.B
    M[4, :4] = params.C
    rhs = np.concatenate([-params.constant_disturbance(), [r1]])
    sol = np.linalg.solve(M, rhs)
    x_star, nu_star = sol[:4], float(sol[4])
    # the velocity rows force these to exact zero; drop solver dust so the
    # sign term stays off at rest
    x_star[0] = 0.0
    x_star[2] = 0.0
    return x_star, nu_star, nu_star / params.actuator_gain


def gravity_feedforward(params: PlantParams, r1: float) -> float:
    """Constant input that balances gravity at the reference position."""
    return equilibrium(params, r1)[2]


def closed_loop_matrix(
    params: PlantParams, kp: float = 140.0, ki: float = 170.0
) -> np.ndarray:
    """Frozen-LTI matrix of plant + actuator + PI (Coulomb term dropped).

    Stacked state: (dz, z, dy, y, nu, q) with q the PI error integral.
    """
    Acl = np.zeros((6, 6))
    A5, B5, _ = params.augmented_matrices()
    Acl[:5, :5] = A5
    # u = kp (r1 - y) + ki q + r2 enters through the actuator input column.
    Acl[:5, 3] += B5 * (-kp)
    Acl[:5, 5] += B5 * ki
    Acl[5, 3] = -1.0  # q' = r1 - y
    return Acl


def closed_loop_ss(params: PlantParams, kp: float = 140.0, ki: float = 170.0) -> StateSpace:
    Acl = closed_loop_matrix(params, kp, ki)
    Bcl = np.zeros((6, 1))
    Ccl = np.zeros((1, 6))
    Ccl[0, 3] = 1.0
    return StateSpace(Acl, Bcl, Ccl)
