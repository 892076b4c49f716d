"""Command-line front end: ``jsts <subcommand> [--config PATH] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import datetime
import os
import re
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import __version__
from . import harness as H
from .config import MODES, ConfigError, DetectorConfig, SystemConfig, parse_config
from .detector import DetectorState, step
from .sim import FrameStream, write_frame
from .solver import (
    FaProblem,
    dc_solve,
    p1_objective,
    p2_objective,
    reconstruct_covariance,
    subgradient_f2,
    woodbury_inverse,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunManifest:
    config_path: Optional[str]
    subcommand: str
    out_dir: str
    seed: int
    timestamp: str

    def write(self, cfg: SystemConfig, det: DetectorConfig) -> str:
        path = os.path.join(self.out_dir, f"manifest_{self.subcommand}_seed{self.seed}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            for line in H.header_lines(cfg, det, self.seed, self.subcommand):
                fh.write(line + "\n")
            fh.write(f"config_path={self.config_path or ''}\n")
            fh.write(f"subcommand={self.subcommand}\n")
            fh.write(f"out_dir={self.out_dir}\n")
            fh.write(f"seed={self.seed}\n")
            fh.write(f"timestamp={self.timestamp}\n")
        return path


def parse_schedule(text: str, n_frames: int) -> set:
    """``attack_frames=10..20,30..32`` -> set of attacked frame indices (inclusive ranges)."""
    text = text.strip()
    if not text:
        return set()
    key, _, spec = text.partition("=")
    if key.strip() != "attack_frames" or not spec.strip():
        raise ConfigError(f"bad schedule {text!r}; expected attack_frames=A..B[,C..D]")
    out = set()
    for part in spec.split(","):
        m = re.fullmatch(r"\s*(\d+)(?:\.\.(\d+))?\s*", part)
        if not m:
            raise ConfigError(f"bad schedule range {part!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        if lo > hi or hi >= n_frames:
            raise ConfigError(f"schedule range {part.strip()!r} outside frames 0..{n_frames - 1}")
        out.update(range(lo, hi + 1))
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value list {text!r}: {exc}") from None


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args, cfg, det, out):
    attacked = parse_schedule(args.schedule, args.frames)
    stream = FrameStream(cfg, args.trial, cfg.seed)
    rows = []
    for i in range(args.frames):
        normal, jammed = stream.next_pair()
        frame = jammed if (i in attacked and jammed is not None) else normal
        name = f"frame_seed{cfg.seed}_{i:04d}.bin"
        write_frame(os.path.join(out, name), frame)
        rows.append({"frame_index": i, "file": name, "attacked": int(frame.truth_attacked),
                     "energy": frame.energy()})
    H.write_csv(os.path.join(out, f"frames_seed{cfg.seed}.csv"), rows,
                H.header_lines(cfg, det, cfg.seed, "simulate"))
    print(f"wrote {len(rows)} frames to {out}")


def cmd_calibrate(args, cfg, det, out):
    delta, cs, ec_th = H.calibrate(cfg, det, args.frames, args.quantile)
    v = np.sort(np.asarray(cs))
    rows = [{"c": float(c), "cdf": (i + 1) / v.size} for i, c in enumerate(v)]
    H.write_csv(os.path.join(out, f"calibration_seed{cfg.seed}.csv"), rows,
                H.header_lines(cfg, det, cfg.seed, "calibrate"))
    print(f"delta={delta!r}")
    print(f"fraction_c_ge_0.95={float(np.mean(v >= 0.95))!r}")
    print(f"ec_threshold={ec_th!r}")


def cmd_detect(args, cfg, det, out):
    n = args.frames or cfg.L
    attacked = parse_schedule(args.schedule, n)
    delta = det.delta
    if args.calibrate:
        delta, _, _ = H.calibrate(cfg, det)
    run_det = DetectorConfig(**{**det.__dict__, "delta": delta})
    stream = FrameStream(cfg, args.trial, cfg.seed)
    state = DetectorState()
    for i in range(n):
        normal, jammed = stream.next_pair()
        frame = jammed if (i in attacked and jammed is not None) else normal
        step(frame, state, run_det, cfg.noise_var)
    path = os.path.join(out, f"detect_seed{cfg.seed}.jsonl")
    H.write_jsonl(path, state.decision_log, H.header_lines(cfg, run_det, cfg.seed, "detect"))
    alarms = sum(r["decision"] == "attacked" for r in state.decision_log)
    print(f"delta={delta!r} frames={n} alarms={alarms}")


def cmd_roc(args, cfg, det, out):
    grid = _floats(args.grid) if args.grid else H.DEFAULT_GRID
    points, outcomes = H.run_roc(cfg, det, args.trials, grid, jobs=args.jobs)
    hdr = H.header_lines(cfg, det, cfg.seed, "roc")
    H.write_csv(os.path.join(out, f"roc_seed{cfg.seed}.csv"), H.roc_rows(points), hdr)
    ec_th = sorted({o.energy_normal for o in outcomes})
    ec_pts = H.ec_roc_from_outcomes(outcomes, ec_th)
    H.write_csv(os.path.join(out, f"roc_ec_seed{cfg.seed}.csv"), H.roc_rows(ec_pts),
                H.header_lines(cfg, det, cfg.seed, "roc-ec"))
    trials = [{k: v for k, v in o.__dict__.items() if k != "elapsed_ms"} for o in outcomes]
    H.write_jsonl(os.path.join(out, f"roc_trials_seed{cfg.seed}.jsonl"), trials, hdr)
    try:
        p = H.point_at_false_alarm(points, 0.1)
        print(f"P_F<=0.1: delta={p.threshold!r} P_F={p.P_F!r} P_D={p.P_D!r}")
    except ValueError as exc:
        print(str(exc))


def cmd_sweep(args, cfg, det, out):
    values = _floats(args.values)
    if not values:
        raise ConfigError("--values must list at least one value")
    rows = H.sweep(cfg, det, args.param, values, args.trials, args.calibration, jobs=args.jobs)
    H.write_csv(os.path.join(out, f"sweep_{args.param}_seed{cfg.seed}.csv"), rows,
                H.header_lines(cfg, det, cfg.seed, f"sweep-{args.param}"))
    for r in rows:
        print(f"{args.param}={r['value']!r} delta={r['delta']!r} P_F={r['P_F']!r} P_D={r['P_D']!r}")


def cmd_convergence(args, cfg, det, out):
    runs = H.convergence_study(cfg, det, args.instances, attacked=args.attacked)
    rows = []
    for run in runs:
        steps = [None] + run["step_norms"]
        for it, (obj, sn) in enumerate(zip(run["trace"], steps)):
            rows.append({"instance": run["instance"], "iteration": it, "objective": obj, "step_norm": sn})
    H.write_csv(os.path.join(out, f"convergence_seed{cfg.seed}.csv"), rows,
                H.header_lines(cfg, det, cfg.seed, "convergence"))
    iters = [r["iterations"] for r in runs]
    ok = all(H.descent_ok(r["trace"]) for r in runs)
    print(f"median_iterations={float(np.median(iters))!r} descent_ok={ok}")
    if not ok:
        return EXIT_RUNTIME


def selftest_checks(seed: int = 0, n: int = 20) -> list[tuple[str, bool, str]]:
    """Invariant suite on random instances: (name, passed, detail)."""
    rng = np.random.default_rng(seed)
    worst = {"descent": 0.0, "prop1": 0.0, "woodbury": 0.0, "subgradient": 0.0}
    for _ in range(n):
        d = int(rng.integers(3, 12))
        A = rng.standard_normal((d, d))
        R = A @ A.T + 0.1 * np.eye(d)
        r = int(rng.integers(1, d))
        sol = dc_solve(FaProblem(R, r, 0.01, 1e-8, 2000))
        t = np.asarray(sol.objective_trace)
        worst["descent"] = max(worst["descent"], float(np.max(np.diff(t), initial=0.0)))
        g = rng.uniform(0.2, 3.0, d)
        V, P, Sigma = reconstruct_covariance(g, R, r)
        worst["prop1"] = max(worst["prop1"], abs(p1_objective(Sigma, R) - p2_objective(g, R, r)))
        worst["woodbury"] = max(worst["woodbury"], float(np.max(np.abs(woodbury_inverse(V, P) - np.linalg.inv(Sigma)))))
        lam = np.linalg.eigvalsh(np.sqrt(g)[:, None] * R * np.sqrt(g)[None, :])
        if np.min(np.abs(lam - 1.0)) > 1e-3 and np.min(np.diff(lam)) > 1e-3:
            h = 1e-6
            fd = np.array([(_f2(g + h * e, R, r) - _f2(g - h * e, R, r)) / (2 * h) for e in np.eye(d)])
            an = subgradient_f2(g, R, r)
            rel = float(np.max(np.abs(fd - an)) / max(np.max(np.abs(an)), 1e-12))
            worst["subgradient"] = max(worst["subgradient"], rel)
    return [
        ("descent", worst["descent"] <= 1e-9, f"max increase {worst['descent']:.3e}"),
        ("prop1-identity", worst["prop1"] <= 1e-8, f"max gap {worst['prop1']:.3e}"),
        ("woodbury-identity", worst["woodbury"] <= 1e-8, f"max gap {worst['woodbury']:.3e}"),
        ("subgradient-fd", worst["subgradient"] < 1e-4, f"max rel err {worst['subgradient']:.3e}"),
    ]


def _f2(g, R, r):
    # spectral part written out directly so the check does not reuse solver internals
    sq = np.sqrt(g)
    lam = np.sort(np.linalg.eigvalsh(sq[:, None] * R * sq[None, :]))[::-1][:r]
    top = np.maximum(1.0, lam)
    return float(np.sum(top - 1.0 - np.log(top)))


def cmd_selftest(args, cfg, det, out):
    failed = 0
    for name, ok, detail in selftest_checks(cfg.seed):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return EXIT_RUNTIME if failed else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "roc": cmd_roc,
    "sweep": cmd_sweep,
    "convergence": cmd_convergence,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (missing keys take defaults)")
    common.add_argument("--out", default="results", help="output directory (default: results)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for Monte Carlo trials")
    common.add_argument("--mode", choices=MODES, help="moment-matrix construction")

    p = argparse.ArgumentParser(prog="jsts", description="Jamming detection toolkit for grant-free uplinks")
    p.add_argument("--version", action="version", version=f"jsts {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="dump frames in the binary frame format")
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--schedule", default="", help="e.g. attack_frames=3..5")

    s = sub.add_parser("calibrate", parents=[common], help="estimate delta from attack-free frames")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--quantile", type=float)

    s = sub.add_parser("detect", parents=[common], help="sequential detection over one frame stream")
    s.add_argument("--frames", type=int, help="stream length (default: L from the config)")
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--schedule", default="attack_frames=10..20")
    s.add_argument("--calibrate", action="store_true", help="calibrate delta first instead of using the config value")

    s = sub.add_parser("roc", parents=[common], help="ROC of the sparsity detector and the energy baseline")
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--grid", help="comma-separated thresholds (default 0.50..1.00 step 0.01)")

    s = sub.add_parser("sweep", parents=[common], help="recalibrate and evaluate over one parameter")
    s.add_argument("--param", required=True, choices=H.SWEEP_PARAMS)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--calibration", type=int, default=200)

    s = sub.add_parser("convergence", parents=[common], help="solver objective traces")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--attacked", action="store_true")

    sub.add_parser("selftest", parents=[common], help="run the solver invariant suite")
    return p


def load(args):
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"{args.config}: no such config file")
        cfg, det = parse_config(args.config)
    else:
        cfg, det = SystemConfig(), DetectorConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"seed={args.seed} violates seed >= 0")
        cfg = cfg.with_(seed=args.seed)
    if args.mode:
        det = DetectorConfig(**{**det.__dict__, "mode": args.mode})
    if args.jobs < 1:
        raise ConfigError(f"jobs={args.jobs} violates jobs >= 1")
    return cfg, det


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, det = load(args)
        os.makedirs(args.out, exist_ok=True)
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        RunManifest(args.config, args.command, args.out, cfg.seed, stamp).write(cfg, det)
        code = COMMANDS[args.command](args, cfg, det, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
