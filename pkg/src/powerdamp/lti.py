"""Continuous LTI primitives shared by the plant, controller and simulator.

Provides immutable state-space and rational transfer-function models,
frequency-response evaluation, dominant-mode analysis, and a classical
4-stage fixed-step integrator.  All operations are pure functions over
value objects and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# Relative singularity tolerance for denominator / resolvent checks.
SINGULARITY_RTOL = 1e-12
RESOLVENT_RTOL = 1e-10


class PoleOnAxis(Exception):
    """Transfer function evaluated at (numerically) a pole on the imaginary axis."""


class SingularResolvent(Exception):
    """(jw*I - A) is numerically singular at the requested frequency."""


class NoOscillatoryMode(Exception):
    """The system has no complex-conjugate eigenvalue pair."""


@dataclass(frozen=True)
class StateSpace:
    """Continuous-time model  x' = A x + B u + bias,  y = C x.

    ``bias`` holds the constant part of an additive disturbance rate; any
    state-dependent part (e.g. a velocity sign term) is supplied by the
    caller through ``rate_fn`` of :func:`rk4_step`.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        C = np.asarray(self.C, dtype=float)
        if C.ndim == 1:
            C = C[None, :]
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        bias = self.bias
        bias = np.zeros(n) if bias is None else np.asarray(bias, dtype=float)
        if bias.shape != (n,):
            raise ValueError(f"bias must be a {n}-vector, got {bias.shape}")
        for name, arr in (("A", A), ("B", B), ("C", C), ("bias", bias)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        for name, arr in (("A", A), ("B", B), ("C", C), ("bias", bias)):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "bias", bias)

    @property
    def order(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class RationalTF:
    """Rational transfer function with real coefficients in descending powers of s."""

    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        num = np.atleast_1d(np.asarray(self.num, dtype=float))
        den = np.atleast_1d(np.asarray(self.den, dtype=float))
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise ValueError("coefficients must be finite")
        if den[0] == 0.0:
            raise ValueError("leading denominator coefficient must be nonzero")
        num.setflags(write=False)
        den.setflags(write=False)
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)


@dataclass(frozen=True)
class FreqResponse:
    """Polar frequency response: nonnegative gain and phase in (-pi, pi]."""

    magnitude: float
    phase: float

    def __post_init__(self):
        if self.magnitude < 0.0:
            raise ValueError("magnitude must be nonnegative")
        if not -math.pi < self.phase <= math.pi or not math.isfinite(self.phase):
            raise ValueError("phase must lie in (-pi, pi]")

    @classmethod
    def from_complex(cls, z: complex) -> "FreqResponse":
        phase = math.atan2(z.imag, z.real)
        if phase <= -math.pi:
            phase += 2.0 * math.pi
        return cls(abs(z), phase)

    @property
    def as_complex(self) -> complex:
        return self.magnitude * complex(math.cos(self.phase), math.sin(self.phase))


@dataclass(frozen=True)
class ModeInfo:
    """One complex-conjugate pole pair sigma +/- j*omega and its damping ratio."""

    sigma: float
    omega: float
    zeta: float


def eval_tf(tf: RationalTF, omega: float) -> FreqResponse:
    """Evaluate ``num(jw)/den(jw)`` at a real frequency (rad/s).

    Raises:
        PoleOnAxis: if the denominator magnitude at jw falls below
            ``SINGULARITY_RTOL * max|den coeff|``.
    """
    s = 1j * float(omega)
    d = np.polyval(tf.den, s)
    if abs(d) < SINGULARITY_RTOL * np.max(np.abs(tf.den)):
        raise PoleOnAxis(f"denominator vanishes at omega={omega!r}")
    return FreqResponse.from_complex(np.polyval(tf.num, s) / d)


def ss_freq_response(ss: StateSpace, omega: float) -> FreqResponse:
    """Gain of the strictly-proper part C (jw*I - A)^-1 B at a real frequency.

    Single-input single-output systems only; the bias vector is ignored.

    Raises:
        SingularResolvent: if jw is (numerically) an eigenvalue of A.
    """
    if ss.B.shape[1] != 1 or ss.C.shape[0] != 1:
        raise ValueError("frequency response requires a SISO system")
    n = ss.order
    M = 1j * float(omega) * np.eye(n) - ss.A
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] < RESOLVENT_RTOL * sv[0]:
        raise SingularResolvent(f"jw is an eigenvalue of A at omega={omega!r}")
    x = np.linalg.solve(M, ss.B.astype(complex))
    return FreqResponse.from_complex((ss.C @ x).item())


def dominant_mode(ss: StateSpace) -> ModeInfo:
    """Return the complex-conjugate eigenvalue pair of A with the largest real part.

    The damping ratio is zeta = -sigma / sqrt(sigma^2 + omega^2).

    Raises:
        NoOscillatoryMode: if every eigenvalue is (numerically) real.
    """
    eigs = np.linalg.eigvals(ss.A)
    scale = max(1.0, float(np.max(np.abs(eigs))))
    pairs = [lam for lam in eigs if lam.imag > 1e-9 * scale]
    if not pairs:
        raise NoOscillatoryMode("all eigenvalues are real")
    lam = max(pairs, key=lambda z: z.real)
    sigma, omega = float(lam.real), float(lam.imag)
    zeta = -sigma / math.hypot(sigma, omega)
    return ModeInfo(sigma=sigma, omega=omega, zeta=zeta)


def rk4_step(
    ss: StateSpace,
    x: np.ndarray,
    u_input: np.ndarray | float,
    dt: float,
    rate_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Advance the state by one classical 4-stage step with the input held.

    ``rate_fn(x) -> dx/dt`` overrides the default linear rate
    ``A x + B u + bias``; the plant uses this hook to add its
    state-dependent disturbance term.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    if rate_fn is None:
        u = np.atleast_1d(np.asarray(u_input, dtype=float))
        A, B, bias = ss.A, ss.B, ss.bias

        def rate_fn(xv: np.ndarray) -> np.ndarray:
            return A @ xv + B @ u + bias

    k1 = rate_fn(x)
    k2 = rate_fn(x + 0.5 * dt * k1)
    k3 = rate_fn(x + 0.5 * dt * k2)
    k4 = rate_fn(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
