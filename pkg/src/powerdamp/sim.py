"""Deterministic closed-loop scenario engine.

Assembles plant + PI + online estimators + power-based compensator,
records a uniformly sampled trace, and derives envelope metrics from it.
The written trace file is the public contract consumed by external
plotting tools: '#'-prefixed metadata lines, a header row, then
comma-separated data rows in full round-trip precision.
"""

from __future__ import annotations

import dataclasses
from collections import deque
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .estimator import (
    AmpBiasEstimState,
    DelayLine,
    FreqEstimState,
    NotReady,
    amp_bias_step,
    build_freq_regression,
    extract_params,
    freq_step,
    recover_frequency,
)
from .lti import dominant_mode
from .plant import (
    NoiseModel,
    NumericalBlowup,
    PiState,
    PlantParams,
    PlantState,
    closed_loop_ss,
    equilibrium,
    pi_control,
    plant_step,
)
from .powerctl import (
    CommandBuffer,
    FrequencyTooLow,
    PeakDetector,
    PowerCtlConfig,
    gain_bound,
    power_command,
    sync_delay,
)

SCENARIOS = ("pi-unstable", "pi-plus-power", "sim-boundary-gains", "synthetic-estimation")

TRACE_COLUMNS = (
    "t",
    "y_meas",
    "y_true",
    "u_tilde",
    "u_prime",
    "u_bar",
    "omega_hat",
    "A_hat",
    "Y0_hat",
    "peak_flag",
)


class InsufficientPeriods(Exception):
    """Fewer than two oscillation periods available in the requested window."""


class IoFailure(Exception):
    """Trace file could not be written or read."""


@dataclass
class EstimatorConfig:
    tau: float = 0.075
    gamma1: float = 1.5e5
    gamma2: float = 1e6
    mode: str = "gradient"  # or "finite_time"
    omega_guess: Optional[float] = None  # None: derived from the dominant mode
    omega_guess_error: float = 0.10      # relative offset applied to the guess


@dataclass
class PiConfig:
    r1: float = 0.010
    r2: Optional[float] = None  # None: gravity feed-forward from the model
    kp: float = 140.0
    ki: float = 170.0


@dataclass
class SyntheticConfig:
    amp: float = 1.2e-3
    omega: float = 16.0
    bias: float = 0.010
    phase: float = 0.7


@dataclass
class ScenarioConfig:
    scenario: str = "pi-plus-power"
    duration: float = 15.0
    dt: float = 5e-4
    seed: int = 2024
    noise_kind: str = "uniform"
    noise_bound: float = 5e-5
    y_kick: float = 1e-3          # m, initial output offset seeding the run
    saturation: bool = False      # clip plant input into [0, 10] V
    # None resolves per scenario: the boundary-gain study reproduces the
    # linear-model simulation (no Coulomb term); the others keep the
    # identified value 0.83.
    coulomb: Optional[float] = None
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    powerctl: PowerCtlConfig = field(default_factory=PowerCtlConfig)
    pi: PiConfig = field(default_factory=PiConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.duration <= 0.0 or self.dt <= 0.0:
            raise ValueError("duration and dt must be positive")


# Defaults the source material does not prescribe; echoed as assumptions.
ASSUMED_KEYS = frozenset(
    {
        "seed",
        "noise_kind",
        "noise_bound",
        "y_kick",
        "saturation",
        "coulomb",
        "estimator.mode",
        "estimator.omega_guess",
        "estimator.omega_guess_error",
        "powerctl.smooth_window",
        "powerctl.amplitude_floor",
        "powerctl.hysteresis",
        "powerctl.min_separation_periods",
        "powerctl.omega_floor",
        "powerctl.arg_freq_multiplier",
        "pi.r1",
        "pi.r2",
        "synthetic.amp",
        "synthetic.omega",
        "synthetic.bias",
        "synthetic.phase",
    }
)

_SUBCONFIGS = ("estimator", "powerctl", "pi", "synthetic")


def config_to_flat(cfg: ScenarioConfig) -> Dict[str, object]:
    """Dotted-key view of the full configuration (gtilde excluded)."""
    flat: Dict[str, object] = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name in _SUBCONFIGS:
            for sub in dataclasses.fields(val):
                if sub.name == "gtilde":
                    continue
                flat[f"{f.name}.{sub.name}"] = getattr(val, sub.name)
        else:
            flat[f.name] = val
    return flat


def flat_config_keys() -> Tuple[str, ...]:
    return tuple(config_to_flat(ScenarioConfig()).keys())


def set_flat_key(cfg: ScenarioConfig, key: str, raw: str) -> None:
    """Apply one dotted-key override with string-to-field-type coercion.

    Raises:
        KeyError: naming the unknown key.
    """
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SUBCONFIGS:
            raise KeyError(key)
        target = getattr(cfg, section)
    else:
        target, name = cfg, key
    fields = {f.name: f for f in dataclasses.fields(target)}
    if name not in fields or name == "gtilde":
        raise KeyError(key)
    current = getattr(target, name)
    text = raw.strip()
    value: object
    if isinstance(current, bool):
        value = text.lower() in ("1", "true", "yes", "on")
    elif isinstance(current, int) and not isinstance(current, bool):
        value = int(text)
    elif isinstance(current, float):
        value = float(text)
    elif current is None:
        value = None if text.lower() in ("none", "") else float(text)
    else:
        value = text
    setattr(target, name, value)


@dataclass
class SimTrace:
    """Uniform-grid record of one scenario run plus its metadata echo."""

    columns: Dict[str, np.ndarray]
    metadata: Dict[str, str]

    def __post_init__(self):
        missing = [c for c in TRACE_COLUMNS if c not in self.columns]
        if missing:
            raise ValueError(f"trace missing columns {missing}")
        n = len(self.columns["t"])
        for c in TRACE_COLUMNS:
            if len(self.columns[c]) != n:
                raise ValueError("trace columns must have equal length")

    def __len__(self) -> int:
        return len(self.columns["t"])

    @property
    def t(self) -> np.ndarray:
        return self.columns["t"]


def write_trace(trace: SimTrace, path) -> None:
    """Write metadata comments, header, and rows in round-trip precision."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(trace.metadata):
                fh.write(f"# {key} = {trace.metadata[key]}\n")
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            cols = [trace.columns[c] for c in TRACE_COLUMNS]
            for i in range(len(trace)):
                fh.write(",".join(repr(float(col[i])) for col in cols) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write trace to {path}: {exc}") from exc


def read_trace(path) -> SimTrace:
    """Read a trace written by :func:`write_trace` bit-exactly."""
    metadata: Dict[str, str] = {}
    rows: List[List[float]] = []
    header: Optional[List[str]] = None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    body = line[1:].strip()
                    if "=" in body:
                        key, val = body.split("=", 1)
                        metadata[key.strip()] = val.strip()
                    continue
                if header is None:
                    header = line.split(",")
                    continue
                rows.append([float(x) for x in line.split(",")])
    except OSError as exc:
        raise IoFailure(f"cannot read trace from {path}: {exc}") from exc
    if header is None:
        raise IoFailure(f"no header row in {path}")
    if header != list(TRACE_COLUMNS):
        raise IoFailure(f"unexpected trace columns {header}")
    data = np.array(rows, dtype=float).reshape(len(rows), len(TRACE_COLUMNS))
    columns = {c: data[:, i].copy() for i, c in enumerate(TRACE_COLUMNS)}
    return SimTrace(columns=columns, metadata=metadata)


@dataclass
class EnvelopeMetrics:
    """Per-period oscillation amplitudes and their fitted exponential rate."""

    times: np.ndarray       # midpoints of consecutive extrema pairs
    amplitudes: np.ndarray  # half swing between consecutive extrema
    sigma_fit: float        # 1/s, slope of log amplitude over time
    settled: bool           # sigma_fit < 0

    def amplitude_at(self, t: float) -> float:
        """Envelope amplitude nearest/interpolated at time t."""
        if t <= self.times[0]:
            return float(self.amplitudes[0])
        if t >= self.times[-1]:
            return float(self.amplitudes[-1])
        return float(np.interp(t, self.times, self.amplitudes))

    def ratio(self, t_num: float, t_den: float) -> float:
        return self.amplitude_at(t_num) / self.amplitude_at(t_den)


def envelope_metrics(trace: SimTrace, window: Tuple[float, float]) -> EnvelopeMetrics:
    """Peak-pick the noise-free channel inside ``window`` and fit the
    exponential envelope rate by least squares on log amplitude.

    Raises:
        InsufficientPeriods: with fewer than four extrema in the window.
    """
    t = trace.columns["t"]
    y = trace.columns["y_true"]
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    if not np.any(sel):
        raise InsufficientPeriods(f"window {window} outside trace")
    ts, ys = t[sel], y[sel]
    d = np.diff(ys)
    sign = np.sign(d)
    nz = sign != 0
    # indices where the slope sign flips: local extrema of the smooth channel
    flips = []
    prev = 0.0
    for i in range(len(sign)):
        if sign[i] == 0:
            continue
        if prev != 0 and sign[i] != prev:
            flips.append(i)
        prev = sign[i]
    if len(flips) < 4:
        raise InsufficientPeriods(f"only {len(flips)} extrema in window {window}")
    idx = np.asarray(flips)
    amps = np.abs(np.diff(ys[idx])) / 2.0
    mids = (ts[idx][1:] + ts[idx][:-1]) / 2.0
    ok = amps > 0.0
    if np.count_nonzero(ok) < 3:
        raise InsufficientPeriods("degenerate envelope (zero amplitudes)")
    slope, _ = np.polyfit(mids[ok], np.log(amps[ok]), 1)
    return EnvelopeMetrics(
        times=mids, amplitudes=amps, sigma_fit=float(slope), settled=slope < 0.0
    )


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _base_metadata(cfg: ScenarioConfig) -> Dict[str, str]:
    meta = {"version": __version__}
    for key, val in config_to_flat(cfg).items():
        meta[f"config.{key}"] = _fmt(val)
        if key in ASSUMED_KEYS:
            meta[f"assumed.{key}"] = _fmt(val)
    return meta


def run_scenario(cfg: ScenarioConfig) -> SimTrace:
    """Run one scenario deterministically; identical config (including seed)
    yields a bit-identical trace.

    A numerical blowup truncates the run; the partial trace is returned with
    ``blowup`` metadata set.
    """
    if cfg.scenario == "synthetic-estimation":
        return _run_synthetic(cfg)
    return _run_plant_loop(cfg)


def _estimator_setup(cfg: ScenarioConfig, omega_ref: float):
    est = cfg.estimator
    line = DelayLine(cfg.dt, capacity=3 * int(round(est.tau / cfg.dt)) + 8)
    tau_samples = line.samples_for(est.tau)
    tau_eff = tau_samples * cfg.dt
    guess = est.omega_guess
    if guess is None:
        guess = omega_ref * (1.0 + est.omega_guess_error)
    theta0 = min(1.0, max(-1.0, math.cos(guess * tau_eff)))
    fst = FreqEstimState(theta0_hat=theta0, tau=tau_eff, gamma1=est.gamma1, mode=est.mode)
    ast = AmpBiasEstimState(gamma2=est.gamma2)
    return line, tau_eff, fst, ast, guess


def _run_synthetic(cfg: ScenarioConfig) -> SimTrace:
    n = int(round(cfg.duration / cfg.dt))
    syn = cfg.synthetic
    noise = NoiseModel(cfg.noise_kind, cfg.noise_bound, cfg.seed).stream()
    line, tau_eff, fst, ast, guess = _estimator_setup(cfg, syn.omega)
    cols = {c: np.zeros(n) for c in TRACE_COLUMNS}
    diag_stepsize = 0
    for k in range(n):
        t = k * cfg.dt
        y_true = syn.bias + syn.amp * math.sin(syn.omega * t + syn.phase)
        y_meas = y_true + noise.sample()
        line.push(y_meas)
        try:
            y_t, p_t = build_freq_regression(line, tau_eff)
            if cfg.dt * fst.gamma1 * p_t * p_t >= 2.0:
                diag_stepsize += 1
            fst = freq_step(fst, y_t, p_t, cfg.dt)
        except NotReady:
            pass
        w_hat = recover_frequency(fst.theta0_hat, tau_eff)
        ast = amp_bias_step(ast, y_meas, w_hat, t, cfg.dt)
        est = extract_params(ast, w_hat)
        cols["t"][k] = t
        cols["y_meas"][k] = y_meas
        cols["y_true"][k] = y_true
        cols["omega_hat"][k] = w_hat
        cols["A_hat"][k] = est.A_hat
        cols["Y0_hat"][k] = est.Y0_hat
    meta = _base_metadata(cfg)
    meta.update(
        {
            "tau_effective": _fmt(tau_eff),
            "omega_guess_used": _fmt(guess),
            "diag.theta0_clamps": str(fst.clamp_count),
            "diag.freq_stepsize_violations": str(diag_stepsize),
            "blowup": "false",
            "truth.omega": _fmt(syn.omega),
            "truth.amp": _fmt(syn.amp),
            "truth.bias": _fmt(syn.bias),
        }
    )
    return SimTrace(columns={c: cols[c][: n] for c in TRACE_COLUMNS}, metadata=meta)


def _run_plant_loop(cfg: ScenarioConfig) -> SimTrace:
    n = int(round(cfg.duration / cfg.dt))
    coulomb = cfg.coulomb
    if coulomb is None:
        coulomb = 0.0 if cfg.scenario == "sim-boundary-gains" else 0.83
    params = PlantParams(coulomb=coulomb)
    power_on = cfg.scenario in ("pi-plus-power", "sim-boundary-gains")

    x_star, nu_star, u_star = equilibrium(params, cfg.pi.r1)
    r2 = cfg.pi.r2 if cfg.pi.r2 is not None else u_star
    pi = PiState(r1=cfg.pi.r1, r2=r2, kp=cfg.pi.kp, ki=cfg.pi.ki)

    mode = dominant_mode(closed_loop_ss(params, cfg.pi.kp, cfg.pi.ki))
    line, tau_eff, fst, ast, guess = _estimator_setup(cfg, mode.omega)

    pc = cfg.powerctl
    detector = PeakDetector(cfg.dt, pc.smooth_window, pc.amplitude_floor, pc.hysteresis)
    buffer = CommandBuffer(cfg.dt, pc.K)
    noise = NoiseModel(cfg.noise_kind, cfg.noise_bound, cfg.seed).stream()
    # recent estimates so events can snapshot the values at the peak instant,
    # which precedes the hysteresis confirmation by a variable lag
    est_hist: deque = deque(maxlen=4096)

    x0 = x_star.copy()
    x0[3] += cfg.y_kick
    state = PlantState(x=x0, nu=nu_star, t=0.0)
    y_meas = state.y + noise.sample()

    cols = {c: np.zeros(n) for c in TRACE_COLUMNS}
    diag_stepsize = 0
    n_events = 0
    warnings: List[str] = []
    kbound_violations = 0
    lowfreq_holds = 0
    blowup_at: Optional[float] = None
    filled = 0

    for k in range(n):
        t = k * cfg.dt
        y_true = state.y
        line.push(y_meas)
        try:
            y_t, p_t = build_freq_regression(line, tau_eff)
            if cfg.dt * fst.gamma1 * p_t * p_t >= 2.0:
                diag_stepsize += 1
            fst = freq_step(fst, y_t, p_t, cfg.dt)
        except NotReady:
            pass
        w_hat = recover_frequency(fst.theta0_hat, tau_eff)
        ast = amp_bias_step(ast, y_meas, w_hat, t, cfg.dt)
        est = extract_params(ast, w_hat)
        est_hist.append(est)

        peak_flag = 0
        if power_on and t >= pc.enable_time:
            w_for_sep = max(w_hat, pc.omega_floor)
            min_sep = pc.min_separation_periods * 2.0 * math.pi / w_for_sep
            ev = detector.detect_peak(t, y_meas - est.Y0_hat, est, min_sep)
            if ev is not None:
                lag = int(round((t - ev.t_star) / cfg.dt))
                if 0 < lag < len(est_hist):
                    ev = dataclasses.replace(ev, snapshot=est_hist[-1 - lag])
                peak_flag = ev.sign
                n_events += 1
                try:
                    T = sync_delay(
                        pc.gtilde, ev.snapshot.omega_hat, pc.arg_freq_multiplier,
                        pc.omega_floor,
                    )
                    # the command is issued some samples after the extremum it
                    # belongs to; shrink the buffer delay by that detection lag
                    # so the shaped output still lands T after the extremum
                    buffer.set_delay(max(0.0, T - (t - ev.t_star)))
                    buffer.issue(power_command(ev.snapshot, ev.sign, pc.k), k)
                except FrequencyTooLow:
                    lowfreq_holds += 1
                k_max = gain_bound(pc.gtilde, max(ev.snapshot.omega_hat, pc.omega_floor))
                if not (1.0 < pc.K < k_max):
                    kbound_violations += 1
                    if len(warnings) < 1:
                        warnings.append(
                            f"shaping gain K={pc.K} outside (1, {k_max:.3f}) "
                            f"at omega_hat={ev.snapshot.omega_hat:.3f}"
                        )
        u_prime = buffer.record_sample()
        u_bar = buffer.shaped_output(k)
        pi, u_tilde = pi_control(pi, y_meas, cfg.dt)
        u = u_tilde + u_bar
        if cfg.saturation:
            u = min(10.0, max(0.0, u))

        cols["t"][k] = t
        cols["y_meas"][k] = y_meas
        cols["y_true"][k] = y_true
        cols["u_tilde"][k] = u_tilde
        cols["u_prime"][k] = u_prime
        cols["u_bar"][k] = u_bar
        cols["omega_hat"][k] = w_hat
        cols["A_hat"][k] = est.A_hat
        cols["Y0_hat"][k] = est.Y0_hat
        cols["peak_flag"][k] = peak_flag
        filled = k + 1

        try:
            state, y_meas = plant_step(state, u, cfg.dt, noise, params)
        except NumericalBlowup as exc:
            blowup_at = exc.t
            break

    meta = _base_metadata(cfg)
    meta.update(
        {
            "tau_effective": _fmt(tau_eff),
            "omega_guess_used": _fmt(guess),
            "coulomb_used": _fmt(coulomb),
            "r2_used": _fmt(r2),
            "lti.omega_dom": _fmt(mode.omega),
            "lti.sigma_dom": _fmt(mode.sigma),
            "lti.zeta_dom": _fmt(mode.zeta),
            "gain_bound_at_omega_dom": _fmt(gain_bound(pc.gtilde, mode.omega)),
            "diag.theta0_clamps": str(fst.clamp_count),
            "diag.freq_stepsize_violations": str(diag_stepsize),
            "diag.peak_events": str(n_events),
            "diag.kbound_violations": str(kbound_violations),
            "diag.lowfreq_holds": str(lowfreq_holds),
            "blowup": "true" if blowup_at is not None else "false",
        }
    )
    if blowup_at is not None:
        meta["blowup_time"] = _fmt(blowup_at)
    for i, w in enumerate(warnings):
        meta[f"warning.{i}"] = w
    return SimTrace(
        columns={c: cols[c][:filled] for c in TRACE_COLUMNS}, metadata=meta
    )


def summarize(trace: SimTrace) -> Dict[str, object]:
    """Derived metrics recomputable from the written trace alone."""
    meta = trace.metadata
    out: Dict[str, object] = {
        "scenario": meta.get("config.scenario", "?"),
        "samples": len(trace),
        "blowup": meta.get("blowup", "false") == "true",
    }
    if "blowup_time" in meta:
        out["blowup_time"] = float(meta["blowup_time"])
    t = trace.t
    t_end = float(t[-1]) if len(trace) else 0.0
    scenario = out["scenario"]
    enable = float(meta.get("config.powerctl.enable_time", "2.5"))
    if scenario in ("pi-plus-power", "sim-boundary-gains"):
        try:
            pre = envelope_metrics(trace, (0.5, min(enable, t_end)))
            out["sigma_fit_pre_enable"] = pre.sigma_fit
        except InsufficientPeriods as exc:
            out["envelope_note_pre"] = str(exc)
        try:
            post = envelope_metrics(trace, (enable, t_end))
            out["sigma_fit_post_enable"] = post.sigma_fit
            out["envelope_at_enable"] = post.amplitude_at(enable)
            out["envelope_at_end"] = post.amplitude_at(t_end)
            out["envelope_end_over_enable"] = post.ratio(t_end, enable)
        except InsufficientPeriods as exc:
            out["envelope_note"] = str(exc)
    elif scenario == "pi-unstable":
        try:
            m = envelope_metrics(trace, (0.5, t_end))
            out["sigma_fit"] = m.sigma_fit
            if t_end >= 12.0:
                out["envelope_ratio_12s_over_5s"] = m.ratio(12.0, 5.0)
        except InsufficientPeriods as exc:
            out["envelope_note"] = str(exc)
    if "lti.sigma_dom" in meta:
        out["lti_sigma_dom"] = float(meta["lti.sigma_dom"])
        out["lti_omega_dom"] = float(meta["lti.omega_dom"])
    if len(trace):
        out["omega_hat_final"] = float(trace.columns["omega_hat"][-1])
        out["A_hat_final"] = float(trace.columns["A_hat"][-1])
        out["Y0_hat_final"] = float(trace.columns["Y0_hat"][-1])
    if "truth.omega" in meta:
        out["omega_true"] = float(meta["truth.omega"])
        out["omega_hat_rel_error"] = abs(
            out["omega_hat_final"] - out["omega_true"]
        ) / out["omega_true"]
    for key in (
        "diag.theta0_clamps",
        "diag.freq_stepsize_violations",
        "diag.peak_events",
        "diag.kbound_violations",
        "diag.lowfreq_holds",
    ):
        if key in meta:
            out[key.split(".", 1)[1]] = int(meta[key])
    out["warnings"] = [meta[k] for k in sorted(meta) if k.startswith("warning.")]
    return out


def format_summary(summary: Dict[str, object]) -> str:
    lines = [f"scenario: {summary['scenario']}  ({summary['samples']} samples)"]
    if summary.get("blowup"):
        lines.append(
            f"  run truncated by numerical blowup at t={summary.get('blowup_time', float('nan')):.4f} s"
        )
    for key in (
        "sigma_fit",
        "sigma_fit_pre_enable",
        "sigma_fit_post_enable",
        "lti_sigma_dom",
        "lti_omega_dom",
        "envelope_at_enable",
        "envelope_at_end",
        "envelope_end_over_enable",
        "envelope_ratio_12s_over_5s",
        "omega_hat_final",
        "A_hat_final",
        "Y0_hat_final",
        "omega_true",
        "omega_hat_rel_error",
    ):
        if key in summary:
            val = summary[key]
            lines.append(f"  {key} = {val:.6g}" if isinstance(val, float) else f"  {key} = {val}")
    diag = ", ".join(
        f"{k}={summary[k]}"
        for k in ("theta0_clamps", "freq_stepsize_violations", "peak_events",
                  "kbound_violations", "lowfreq_holds")
        if k in summary
    )
    if diag:
        lines.append(f"  diagnostics: {diag}")
    for w in summary.get("warnings", []):
        lines.append(f"  WARNING: {w}")
    return "\n".join(lines)
