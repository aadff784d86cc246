"""Command-line interface: run scenarios, tune the estimator delay, check
the shaping-gain bound, and sweep the impulse gain on the ideal plant.

Exit codes: 0 success, 2 configuration error, 3 numerical blowup
(truncated run, partial trace retained), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .estimator import InvalidBounds, excitation_level, recommend_tau
from .lti import PoleOnAxis, RationalTF, dominant_mode, eval_tf
from .plant import PlantParams, closed_loop_ss, make_gtilde
from .powerctl import DEFAULT_IMPULSE_GAIN, ideal_cancellation_ratio, sweep_impulse_gain
from .sim import (
    IoFailure,
    ScenarioConfig,
    SCENARIOS,
    format_summary,
    run_scenario,
    set_flat_key,
    summarize,
    write_trace,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_IO = 4


class ConfigError(Exception):
    """Bad configuration file or override; the message names the offender."""


def parse_config_file(path: Path) -> List[Tuple[int, str, str]]:
    """Parse 'key = value' lines with '#' comments into (line, key, value)."""
    entries = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        entries.append((lineno, key.strip(), value.strip()))
    return entries


def build_config(
    config_path: Optional[str],
    overrides: Sequence[str],
    scenario: Optional[str] = None,
    duration: Optional[float] = None,
    seed: Optional[int] = None,
) -> Tuple[ScenarioConfig, List[str]]:
    """Assemble the scenario configuration: file values first, then CLI
    overrides; unknown keys are rejected by name."""
    cfg = ScenarioConfig()
    applied: List[str] = []
    if config_path is not None:
        for lineno, key, value in parse_config_file(Path(config_path)):
            try:
                set_flat_key(cfg, key, value)
            except KeyError:
                raise ConfigError(
                    f"{config_path}:{lineno}: unknown configuration key {key!r}"
                ) from None
            except ValueError as exc:
                raise ConfigError(
                    f"{config_path}:{lineno}: bad value for {key!r}: {exc}"
                ) from None
            applied.append(f"{key}={value}")
    if scenario is not None:
        cfg.scenario = scenario
        applied.append(f"scenario={scenario}")
    if duration is not None:
        cfg.duration = duration
        applied.append(f"duration={duration}")
    if seed is not None:
        cfg.seed = seed
        applied.append(f"seed={seed}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        try:
            set_flat_key(cfg, key, value)
        except KeyError:
            raise ConfigError(f"unknown configuration key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
        applied.append(f"{key}={value.strip()}")
    try:
        ScenarioConfig(**{f.name: getattr(cfg, f.name) for f in cfg.__dataclass_fields__.values()})  # type: ignore[attr-defined]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, applied


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg, applied = build_config(
            args.config, args.set, args.scenario, args.duration, args.seed
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    trace = run_scenario(cfg)
    for i, item in enumerate(applied):
        trace.metadata[f"override.{i}"] = item
    outdir = Path(args.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        trace_path = outdir / f"{cfg.scenario}.trace.csv"
        write_trace(trace, trace_path)
        summary = summarize(trace)
        text = format_summary(summary)
        (outdir / f"{cfg.scenario}.summary.txt").write_text(text + "\n", encoding="utf-8")
    except (IoFailure, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"trace written to {trace_path}")
    print(text)
    if summary.get("blowup"):
        print(
            f"run truncated by numerical blowup at t={summary.get('blowup_time'):.4f} s; "
            "partial trace retained",
            file=sys.stderr,
        )
        return EXIT_BLOWUP
    return EXIT_OK


def cmd_tune_tau(args: argparse.Namespace) -> int:
    try:
        lo, hi = recommend_tau(args.omega_min, args.omega_max)
    except InvalidBounds as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    A = args.amplitude
    print(f"recommended delay interval: [{lo:.6g}, {hi:.6g}] s")
    if args.omega_min == args.omega_max:
        print(f"point estimate (excitation maximizer): tau = {lo:.6g} s")
    else:
        print(
            "excitation maximizer for a known frequency w is tau = pi/w; "
            f"midband example: {math.pi / math.sqrt(args.omega_min * args.omega_max):.6g} s"
        )
    for tau, omega, name in ((lo, args.omega_max, "omega_max"), (hi, args.omega_min, "omega_min")):
        level = excitation_level(A, omega, tau)
        print(f"excitation at tau={tau:.6g} s ({name}={omega:g} rad/s, A={A:g} m): {level:.6g} m^2 s")
    return EXIT_OK


def _parse_tf(num: Optional[str], den: Optional[str]) -> RationalTF:
    if num is None and den is None:
        return make_gtilde()
    if num is None or den is None:
        raise ConfigError("provide both --num and --den, or neither")
    try:
        return RationalTF(
            [float(x) for x in num.split(",")], [float(x) for x in den.split(",")]
        )
    except ValueError as exc:
        raise ConfigError(f"bad transfer function coefficients: {exc}") from None


def cmd_gain_bound(args: argparse.Namespace) -> int:
    try:
        gt = _parse_tf(args.num, args.den)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    omega = args.omega
    if omega is None:
        mode = dominant_mode(closed_loop_ss(PlantParams()))
        omega = mode.omega
        print(f"using dominant closed-loop frequency omega = {omega:.4f} rad/s "
              f"(sigma = {mode.sigma:+.4f})")
    try:
        fr = eval_tf(gt, omega)
    except PoleOnAxis as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    k_max = 1.0 / fr.magnitude
    print(f"|Gt(j {omega:.4f})| = {fr.magnitude:.6g}")
    print(f"K_max = {k_max:.4f}")
    ok = 1.0 < args.K < k_max
    print(f"configured K = {args.K:g}: {'pass' if ok else 'FAIL'} (requires 1 < K < {k_max:.4f})")
    return EXIT_OK


def cmd_sweep_k(args: argparse.Namespace) -> int:
    if args.step <= 0 or args.k_max <= args.k_min:
        print("config error: need k_min < k_max and step > 0", file=sys.stderr)
        return EXIT_CONFIG
    grid = np.arange(args.k_min, args.k_max + args.step / 2, args.step)
    table = sweep_impulse_gain(grid)
    best_k, best_r = min(table, key=lambda kv: kv[1])
    lines = ["k,amplitude_ratio"] + [f"{k!r},{r!r}" for k, r in table]
    if args.out is not None:
        outdir = Path(args.out)
        try:
            outdir.mkdir(parents=True, exist_ok=True)
            (outdir / "sweep_k.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"table written to {outdir / 'sweep_k.csv'}")
    else:
        print("\n".join(lines))
    print(f"argmin: k = {best_k:.4g} (ratio {best_r:.6g})")
    print(
        f"reference optimum sqrt(3)/(2 pi) = {DEFAULT_IMPULSE_GAIN:.5f} "
        f"(ratio {ideal_cancellation_ratio(DEFAULT_IMPULSE_GAIN):.6g})"
    )
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="powerdamp",
        description="Power-based oscillation compensation scenarios and tuning tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and write trace + summary")
    p_run.add_argument("--scenario", choices=SCENARIOS, default=None)
    p_run.add_argument("--config", default=None, help="key = value configuration file")
    p_run.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a configuration key (repeatable)",
    )
    p_run.add_argument("--duration", type=float, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_tau = sub.add_parser("tune-tau", help="recommended estimator delay interval")
    p_tau.add_argument("--omega-min", type=float, required=True)
    p_tau.add_argument("--omega-max", type=float, required=True)
    p_tau.add_argument("--amplitude", type=float, default=1.0)
    p_tau.set_defaults(func=cmd_tune_tau)

    p_gb = sub.add_parser("gain-bound", help="shaping-gain bound at a frequency")
    p_gb.add_argument("--omega", type=float, default=None,
                      help="rad/s (default: dominant closed-loop frequency)")
    p_gb.add_argument("--K", type=float, default=2.4)
    p_gb.add_argument("--num", default=None, help="comma-separated numerator coefficients")
    p_gb.add_argument("--den", default=None, help="comma-separated denominator coefficients")
    p_gb.set_defaults(func=cmd_gain_bound)

    p_k = sub.add_parser("sweep-k", help="impulse-gain sweep on the ideal plant")
    p_k.add_argument("--k-min", type=float, default=0.1)
    p_k.add_argument("--k-max", type=float, default=0.5)
    p_k.add_argument("--step", type=float, default=0.01)
    p_k.add_argument("--out", default=None, help="write the table to this directory")
    p_k.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
