"""Online estimation of the parameters of a biased harmonic output
y = Y0 + A sin(w t + phi) + v from delayed samples.

The frequency enters through theta0 = cos(w tau) of a delayed-difference
linear regression; amplitude, bias and phase follow from a second
regression against the regressor (1, sin(w_hat t), cos(w_hat t)).
Excitation analysis supplies the tuning rule for the delay tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np


class NotReady(Exception):
    """The delay line does not yet span the requested tap horizon."""


class InvalidBounds(Exception):
    """Frequency bounds are not 0 < omega_min <= omega_max."""


class DelayLine:
    """Uniformly sampled ring buffer serving integer-sample delay taps.

    The requested delay tau is rounded to a whole number of samples; the
    rounding residual is exposed for logging.
    """

    def __init__(self, dt: float, capacity: int):
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.dt = dt
        self._buf = np.zeros(int(capacity))
        self._count = 0

    def __len__(self) -> int:
        return min(self._count, len(self._buf))

    def push(self, y: float) -> None:
        self._buf[self._count % len(self._buf)] = y
        self._count += 1

    def samples_for(self, tau: float) -> int:
        return int(round(tau / self.dt))

    def rounding_error(self, tau: float) -> float:
        return self.samples_for(tau) * self.dt - tau

    def ready(self, lag_samples: int) -> bool:
        return 0 <= lag_samples < self._count and lag_samples < len(self._buf)

    def tap(self, lag_samples: int) -> float:
        """Value lag_samples before the most recent push."""
        if not self.ready(lag_samples):
            raise NotReady(f"tap at lag {lag_samples} not buffered yet")
        return float(self._buf[(self._count - 1 - lag_samples) % len(self._buf)])


def build_freq_regression(line: DelayLine, tau: float) -> Tuple[float, float]:
    """Delayed-difference pair (y_tilde, phi_tilde) for the frequency regression.

    y_tilde = y(t-3tau) - y(t-2tau) + y(t-tau) - y(t) and
    phi_tilde = 2 (y(t-2tau) - y(t-tau)); for a noise-free biased sinusoid
    y_tilde = phi_tilde * cos(w tau) exactly.

    Raises:
        NotReady: while the buffer spans less than 3 tau.
    """
    m = line.samples_for(tau)
    if m < 1:
        raise ValueError("tau must round to at least one sample")
    y0 = line.tap(0)
    y1 = line.tap(m)
    y2 = line.tap(2 * m)
    y3 = line.tap(3 * m)
    return (y3 - y2 + y1 - y0), 2.0 * (y2 - y1)


@dataclass(frozen=True)
class FreqEstimState:
    """Scalar regression state for theta0 = cos(w tau)."""

    theta0_hat: float
    tau: float
    gamma1: float
    mode: str = "gradient"  # or "finite_time"
    clamp_count: int = 0

    def __post_init__(self):
        if self.mode not in ("gradient", "finite_time"):
            raise ValueError(f"unknown estimator mode {self.mode!r}")
        if not -1.0 <= self.theta0_hat <= 1.0:
            raise ValueError("theta0_hat must start in [-1, 1]")


def _clamped(st: FreqEstimState, theta_raw: float) -> FreqEstimState:
    theta = min(1.0, max(-1.0, theta_raw))
    bumps = 1 if theta != theta_raw else 0
    return replace(st, theta0_hat=theta, clamp_count=st.clamp_count + bumps)


def freq_grad_step(
    st: FreqEstimState, y_tilde: float, phi_tilde: float, dt: float
) -> FreqEstimState:
    """Explicit-Euler gradient update of theta0, clamped to [-1, 1]."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    e = y_tilde - phi_tilde * st.theta0_hat
    return _clamped(st, st.theta0_hat + dt * st.gamma1 * phi_tilde * e)


def freq_ft_step(
    st: FreqEstimState, y_tilde: float, phi_tilde: float, dt: float
) -> FreqEstimState:
    """Finite-time variant: square-root error injection, clamped to [-1, 1]."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    e = y_tilde - phi_tilde * st.theta0_hat
    rate = st.gamma1 * phi_tilde * math.sqrt(abs(e)) * math.copysign(1.0, e)
    if e == 0.0:
        rate = 0.0
    return _clamped(st, st.theta0_hat + dt * rate)


def freq_step(
    st: FreqEstimState, y_tilde: float, phi_tilde: float, dt: float
) -> FreqEstimState:
    """Dispatch on the state's configured update law."""
    if st.mode == "finite_time":
        return freq_ft_step(st, y_tilde, phi_tilde, dt)
    return freq_grad_step(st, y_tilde, phi_tilde, dt)


def recover_frequency(theta0_hat: float, tau: float) -> float:
    """w_hat = arccos(theta0_hat) / tau, on the principal branch [0, pi/tau]."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    return math.acos(min(1.0, max(-1.0, theta0_hat))) / tau


# Per-sample cap on the dimensionless step gain of the amplitude/bias
# update.  Each sample contributes one scalar equation in a regressor
# direction that rotates only by w*dt between samples; pushing the
# per-sample gain beyond a few multiples of that rotation makes the
# iteration chase individual samples instead of converging (the continuous
# flow at such gains is likewise overdamped by orders of magnitude).  The
# cap keeps the discrete flow in its convergent regime at any configured
# gain; below the cap the update is the exact integral of the gradient
# flow over one sample and matches forward Euler to first order.
AMP_STEP_CAP = 0.004


@dataclass(frozen=True)
class AmpBiasEstimState:
    """Three-parameter regression state [Y0, A cos(phi), A sin(phi)]."""

    y0: float = 0.0
    a_cos: float = 0.0
    a_sin: float = 0.0
    gamma2: float = 1e6
    step_cap: float = AMP_STEP_CAP


def amp_bias_step(
    st: AmpBiasEstimState, y: float, omega_hat: float, t: float, dt: float
) -> AmpBiasEstimState:
    """Advance the amplitude/bias regression by one sample.

    Integrates the gradient flow theta' = gamma2 * phi * (y - phi.theta)
    over dt with the regressor phi = (1, sin(w_hat t), cos(w_hat t)) held;
    |phi|^2 = 2, so the exact step gain is (1 - exp(-2 gamma2 dt)) / 2,
    bounded by ``step_cap`` (see AMP_STEP_CAP).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if omega_hat < 0.0:
        raise ValueError("omega_hat must be nonnegative")
    s = math.sin(omega_hat * t)
    c = math.cos(omega_hat * t)
    e = y - (st.y0 + st.a_cos * s + st.a_sin * c)
    g = min(-math.expm1(-2.0 * st.gamma2 * dt) / 2.0, st.step_cap)
    return replace(
        st,
        y0=st.y0 + g * e,
        a_cos=st.a_cos + g * s * e,
        a_sin=st.a_sin + g * c * e,
    )


@dataclass(frozen=True)
class HarmonicEstimate:
    """Instantaneous estimate of the biased harmonic parameters."""

    omega_hat: float
    A_hat: float
    Y0_hat: float
    phi_hat: float


def extract_params(st: AmpBiasEstimState, omega_hat: float) -> HarmonicEstimate:
    """Map the regression state to (w_hat, A_hat, Y0_hat, phi_hat).

    The phase uses the four-quadrant arctangent; (0, 0) maps to phi = 0.
    """
    a_hat = math.hypot(st.a_cos, st.a_sin)
    phi = math.atan2(st.a_sin, st.a_cos) if a_hat > 0.0 else 0.0
    return HarmonicEstimate(
        omega_hat=omega_hat, A_hat=a_hat, Y0_hat=st.y0, phi_hat=phi
    )


def excitation_level(A: float, omega: float, tau: float) -> float:
    """One-period excitation integral of the frequency regressor:
    16 A^2 (pi/omega) sin^2(omega tau / 2)."""
    if omega <= 0.0:
        raise InvalidBounds("omega must be positive")
    return 16.0 * A * A * (math.pi / omega) * math.sin(omega * tau / 2.0) ** 2


def recommend_tau(omega_min: float, omega_max: float) -> Tuple[float, float]:
    """Recommended delay interval [pi/omega_max, pi/omega_min]; the excitation
    maximizer for a known frequency omega is the point pi/omega."""
    if omega_min <= 0.0 or omega_min > omega_max:
        raise InvalidBounds(
            f"need 0 < omega_min <= omega_max, got [{omega_min}, {omega_max}]"
        )
    return math.pi / omega_max, math.pi / omega_min
