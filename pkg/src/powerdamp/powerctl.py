"""Discrete power-based oscillation compensator.

A piecewise-constant command sized k * w_hat^2 * A_hat is issued at each
detected output extremum, signed by the side of the extremum relative to
the estimated bias.  The command is shifted by a synchronization delay
computed from the feed-forward sub-dynamics' phase and scaled by a shaping
gain bounded by the inverse of its magnitude.
"""

from __future__ import annotations

import math
import numpy as np
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .estimator import HarmonicEstimate
from .lti import RationalTF, eval_tf
from .plant import make_gtilde

# Impulse weighting that cancels an undamped oscillation over one period:
# the velocity ramp a pulse of height k*w^2*A builds over a half period
# carries half the mean-square velocity of the oscillation it opposes.
DEFAULT_IMPULSE_GAIN = math.sqrt(3.0) / (2.0 * math.pi)


class FrequencyTooLow(Exception):
    """Synchronization delay undefined below the frequency floor."""


@dataclass(frozen=True)
class PeakEvent:
    """A detected output extremum with the estimate snapshot taken there."""

    t_star: float
    sign: int  # sign of (y(t*) - Y0_hat)
    snapshot: HarmonicEstimate


@dataclass
class PowerCtlConfig:
    """Tuning of the power-based compensator.

    The shaping gain must satisfy 1 < K < 1/|Gt(jw)|; violations at the
    current frequency estimate are reported as warnings, not errors.
    """

    k: float = DEFAULT_IMPULSE_GAIN
    K: float = 2.4
    enable_time: float = 2.5
    gtilde: RationalTF = field(default_factory=make_gtilde)
    arg_freq_multiplier: int = 2  # per the printed delay law; 1 for experiments
    smooth_window: int = 21      # samples, moving-average for peak detection
    amplitude_floor: float = 1e-4  # m, 2x the default noise bound
    hysteresis: float = 5e-5     # m, peak-confirmation retreat
    min_separation_periods: float = 0.25  # of 2*pi/w_hat
    omega_floor: float = 1.0     # rad/s, below this the delay law is held

    def __post_init__(self):
        if self.smooth_window < 3 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be an odd count >= 3")
        if self.arg_freq_multiplier not in (1, 2):
            raise ValueError("arg_freq_multiplier must be 1 or 2")


def power_command(
    snapshot: HarmonicEstimate, sign: int, k: float = DEFAULT_IMPULSE_GAIN
) -> float:
    """Commanded level k * w_hat^2 * A_hat, signed by the extremum side."""
    if snapshot.A_hat < 0.0:
        raise ValueError("A_hat must be nonnegative")
    return k * snapshot.omega_hat**2 * snapshot.A_hat * float(sign)


def sync_delay(
    gtilde: RationalTF,
    omega_hat: float,
    mult: int = 2,
    omega_floor: float = 1.0,
) -> float:
    """Delay T = (2 pi + arg[Gt(j mult w_hat)]) / w_hat synchronizing the
    shifted command with the plant's internal oscillation drive.

    Raises:
        FrequencyTooLow: for omega_hat at or below the floor, where the
            delay diverges.
    """
    if omega_hat <= omega_floor:
        raise FrequencyTooLow(f"omega_hat={omega_hat!r} <= floor {omega_floor!r}")
    phase = eval_tf(gtilde, mult * omega_hat).phase
    return (2.0 * math.pi + phase) / omega_hat


def gain_bound(gtilde: RationalTF, omega: float) -> float:
    """Upper shaping-gain bound 1/|Gt(jw)|."""
    if omega <= 0.0:
        raise ValueError("omega must be positive")
    return 1.0 / eval_tf(gtilde, omega).magnitude


def ideal_cancellation_ratio(k: float, n_grid: int = 4001) -> float:
    """Per-period amplitude ratio left by the commutated pulse on the ideal
    normalized plant: a double-integrator output stage carrying a unit
    undamped harmonic (A = 1, w = 1).

    Each commutation holds the level k * w^2 * A for one half period; the
    output-stage double integrator turns it into a velocity ramp.  The two
    ramps per period can absorb the oscillation's velocity power when each
    carries half of it; the surviving energy fraction is the quadrature
    residual |1 - P_ramp / (P_osc / 2)| and amplitude is its square root.
    Over-driving re-excites the stage, so the ratio is V-shaped in k.
    """
    if k < 0.0:
        raise ValueError("k must be nonnegative")
    t = np.linspace(0.0, math.pi, n_grid)  # one half period at w = 1
    v_ramp = k * t
    v_osc = np.sin(t)
    p_ramp = np.trapezoid(v_ramp**2, t) / math.pi
    p_osc = np.trapezoid(v_osc**2, t) / math.pi
    return math.sqrt(abs(1.0 - 2.0 * p_ramp / p_osc))


def sweep_impulse_gain(
    grid: np.ndarray | list,
) -> List[Tuple[float, float]]:
    """Evaluate the ideal-plant amplitude ratio over a gain grid."""
    return [(float(k), ideal_cancellation_ratio(float(k))) for k in grid]


class PeakDetector:
    """Streaming extremum detector on the bias-removed output.

    A moving average over ``window`` samples smooths the signal; a maximum
    is confirmed once the smoothed value retreats ``hysteresis`` below the
    running best (symmetrically for minima).  The event time is the running
    best's center time, the sign the side of the extremum, and events honor
    the amplitude floor and minimum separation.  Hysteresis rather than a
    raw slope-sign flip keeps the timing within a few percent of a period
    at the default noise level.
    """

    def __init__(
        self,
        dt: float,
        window: int = 21,
        amplitude_floor: float = 1e-4,
        hysteresis: float = 5e-5,
    ):
        if window < 3:
            raise ValueError("window must be >= 3 samples")
        if hysteresis <= 0.0:
            raise ValueError("hysteresis must be positive")
        self.dt = dt
        self.window = window
        self.amplitude_floor = amplitude_floor
        self.hysteresis = hysteresis
        self._buf: deque = deque(maxlen=window)
        self._sum = 0.0
        self._direction = 0  # +1 seeking a maximum, -1 seeking a minimum
        self._best = 0.0
        self._best_t = 0.0
        self._last_event_t = -math.inf

    def _center_time(self, now: float) -> float:
        return now - (self.window - 1) / 2.0 * self.dt

    def detect_peak(
        self,
        now: float,
        deviation: float,
        snapshot: HarmonicEstimate,
        min_separation: float,
    ) -> Optional[PeakEvent]:
        """Feed one sample of (y - Y0_hat); return the confirmed extremum, if any."""
        if len(self._buf) == self._buf.maxlen:
            self._sum -= self._buf[0]
        self._buf.append(deviation)
        self._sum += deviation
        if len(self._buf) < self.window:
            return None
        smooth = self._sum / self.window
        t_c = self._center_time(now)
        if self._direction == 0:
            if smooth > self._best + self.hysteresis:
                self._direction = 1
            elif smooth < self._best - self.hysteresis:
                self._direction = -1
            if self._direction != 0 or abs(smooth) > abs(self._best):
                self._best, self._best_t = smooth, t_c
            return None
        better = smooth > self._best if self._direction > 0 else smooth < self._best
        if better:
            self._best, self._best_t = smooth, t_c
            return None
        retreat = (self._best - smooth) if self._direction > 0 else (smooth - self._best)
        if retreat < self.hysteresis:
            return None
        event: Optional[PeakEvent] = None
        if (
            abs(self._best) >= self.amplitude_floor
            and now - self._last_event_t >= min_separation
        ):
            event = PeakEvent(
                t_star=self._best_t,
                sign=1 if self._best > 0 else -1,
                snapshot=snapshot,
            )
            self._last_event_t = now
        # rearm for the opposite extremum regardless of emission
        self._direction = -self._direction
        self._best, self._best_t = smooth, t_c
        return event


class CommandBuffer:
    """Sample-indexed command history with per-command delay scheduling.

    The shaped output is K times the command stream delayed by T; a delay
    change at a peak event applies to commands issued afterwards only, so
    already scheduled transitions never shift retroactively.
    """

    def __init__(self, dt: float, K: float):
        self.dt = dt
        self.K = K
        self.delay_samples = 0
        self._history: List[float] = []  # held u' value per sample
        self._held = 0.0
        self._schedule: List[Tuple[int, float]] = []  # (effect sample, u' value)
        self._sched_pos = 0
        self._active_u = 0.0

    def set_delay(self, T: float) -> None:
        self.delay_samples = int(round(T / self.dt))

    def issue(self, u_prime: float, at_sample: int) -> None:
        """Register a new command level starting at ``at_sample``; it reaches
        the output ``delay_samples`` later."""
        self._held = u_prime
        self._schedule.append((at_sample + self.delay_samples, u_prime))

    def record_sample(self) -> float:
        """Append the currently held command to the history; returns it."""
        self._history.append(self._held)
        return self._held

    def u_prime_at(self, sample: int) -> float:
        if 0 <= sample < len(self._history):
            return self._history[sample]
        return 0.0

    def shaped_output(self, sample: int) -> float:
        """K * u'(t - T) at sample resolution; zero before any command lands."""
        while (
            self._sched_pos < len(self._schedule)
            and self._schedule[self._sched_pos][0] <= sample
        ):
            self._active_u = self._schedule[self._sched_pos][1]
            self._sched_pos += 1
        return self.K * self._active_u
