"""Monte Carlo experiments: calibration, ROC, parameter sweeps, baselines.

Every evaluation trial draws a fresh geometry and spreading matrix, then two
consecutive frames: a reference frame and a test frame.  The test frame
exists in a normal and a jammed version that share all device, channel and
noise samples, so P_D - P_F differences come from the jamming alone.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import DetectorConfig, SystemConfig, config_hash
from .detector import (
    ATTACKED,
    NORMAL,
    calibrate_from_metrics,
    change_metric,
    extract_feature,
    passthrough_metrics,
)
from .sim import FrameStream

CALIBRATION_OFFSET = 1_000_000
DEFAULT_GRID = tuple(round(0.5 + 0.01 * i, 2) for i in range(51))
SWEEP_PARAMS = ("mu", "rho", "J", "D_max", "P_uaj_dbm", "Nc")


@dataclass
class TrialOutcome:
    trial_id: int
    tau_ref: int
    tau_normal: int
    tau_attacked: Optional[int]
    c_normal: float
    c_attacked: Optional[float]
    energy_normal: float
    energy_attacked: Optional[float]
    iterations: int
    elapsed_ms: float


@dataclass
class ExperimentRecord:
    trial_id: int
    params: dict
    frame_index: int
    truth: bool
    decision: str
    c: float
    tau: int
    elapsed_ms: float


@dataclass
class RocPoint:
    threshold: float
    P_F: float
    P_D: Optional[float]
    n_trials: int


def wilson(k: int, n: int, z: float = 1.959964) -> tuple:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (float("nan"), float("nan"))
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


def run_trial(cfg: SystemConfig, det: DetectorConfig, trial: int, seed: Optional[int] = None,
              n_attacked: Optional[int] = None) -> TrialOutcome:
    t0 = time.perf_counter()
    stream = FrameStream(cfg, trial, seed)
    ref, _ = stream.next_pair()
    normal, attacked = stream.next_pair(n_attacked)
    nv = cfg.noise_var
    _, tau_ref = extract_feature(ref, det, nv)
    sol_n, tau_n = extract_feature(normal, det, nv)
    iters = sol_n.iterations
    tau_a = c_a = e_a = None
    if attacked is not None:
        sol_a, tau_a = extract_feature(attacked, det, nv)
        iters += sol_a.iterations
        c_a = change_metric(tau_a, tau_ref)
        e_a = attacked.energy()
    return TrialOutcome(
        trial_id=trial,
        tau_ref=tau_ref,
        tau_normal=tau_n,
        tau_attacked=tau_a,
        c_normal=change_metric(tau_n, tau_ref),
        c_attacked=c_a,
        energy_normal=normal.energy(),
        energy_attacked=e_a,
        iterations=iters,
        elapsed_ms=1e3 * (time.perf_counter() - t0),
    )


def _trial_job(args):
    return run_trial(*args)


def run_trials(cfg: SystemConfig, det: DetectorConfig, n_trials: int, seed: Optional[int] = None,
               offset: int = 0, n_attacked: Optional[int] = None, jobs: int = 1) -> list[TrialOutcome]:
    seed = cfg.seed if seed is None else seed
    args = [(cfg, det, offset + i, seed, n_attacked) for i in range(n_trials)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_trial_job, args, chunksize=max(1, n_trials // (4 * jobs))))
    return [_trial_job(a) for a in args]


def calibration_streams(cfg: SystemConfig, n_frames: int = 200, frames_per_stream: int = 10,
                        seed: Optional[int] = None):
    """Attack-free frame streams, disjoint from evaluation trials."""
    cfg0 = cfg.with_(J=0)
    n_streams = max(1, math.ceil(n_frames / frames_per_stream))
    out = []
    for s in range(n_streams):
        st = FrameStream(cfg0, CALIBRATION_OFFSET + s, cfg.seed if seed is None else seed)
        count = min(frames_per_stream, n_frames - s * frames_per_stream)
        out.append([st.next_normal() for _ in range(count)])
    return out


def calibration_data(cfg: SystemConfig, det: DetectorConfig, n_frames: int = 200,
                     frames_per_stream: int = 10, seed: Optional[int] = None):
    """(c values, frame energies) over attack-free calibration streams."""
    cs: list[float] = []
    energies: list[float] = []
    for stream in calibration_streams(cfg, n_frames, frames_per_stream, seed):
        taus = [extract_feature(f, det, cfg.noise_var)[1] for f in stream]
        cs += passthrough_metrics(taus)
        energies += [f.energy() for f in stream]
    return cs, energies


def calibrate(cfg: SystemConfig, det: DetectorConfig, n_frames: int = 200, q: Optional[float] = None,
              seed: Optional[int] = None):
    """Return (delta, c values, EC energy threshold)."""
    q = det.calibration_quantile if q is None else q
    cs, energies = calibration_data(cfg, det, n_frames, seed=seed)
    return calibrate_from_metrics(cs, q), cs, ec_calibrate(energies, q)


# ---------------------------------------------------------------- baselines

def ec_detect(frame, threshold_energy: float) -> str:
    """Energy detector: alarm when total received energy exceeds the threshold."""
    if not threshold_energy > 0:
        raise ValueError("energy threshold must be positive")
    Y = getattr(frame, "Y", frame)
    return ATTACKED if float(np.sum(np.abs(Y) ** 2)) > threshold_energy else NORMAL


def ec_calibrate(normal_energies, q: float = 0.05) -> float:
    """(1 - q)-quantile of attack-free frame energies."""
    v = np.sort(np.asarray(normal_energies, dtype=float))
    k = min(max(int(math.ceil((1 - q) * v.size)), 1), v.size)
    return float(v[k - 1])


# ---------------------------------------------------------------- ROC

def roc_from_outcomes(outcomes: Sequence[TrialOutcome], grid=DEFAULT_GRID) -> list[RocPoint]:
    """Alarm when c <= delta, for each delta in the grid."""
    cn = np.array([o.c_normal for o in outcomes])
    ca = np.array([o.c_attacked for o in outcomes if o.c_attacked is not None])
    pts = []
    for th in sorted(grid):
        pf = float(np.mean(cn <= th))
        pd = float(np.mean(ca <= th)) if ca.size else None
        pts.append(RocPoint(float(th), pf, pd, len(outcomes)))
    return pts


def ec_roc_from_outcomes(outcomes: Sequence[TrialOutcome], thresholds) -> list[RocPoint]:
    en = np.array([o.energy_normal for o in outcomes])
    ea = np.array([o.energy_attacked for o in outcomes if o.energy_attacked is not None])
    return [
        RocPoint(float(th), float(np.mean(en > th)), float(np.mean(ea > th)) if ea.size else None, len(outcomes))
        for th in sorted(thresholds)
    ]


def run_roc(cfg: SystemConfig, det: DetectorConfig, n_trials: int, threshold_grid=DEFAULT_GRID,
            seed: Optional[int] = None, jobs: int = 1):
    """ROC points of the sparsity detector; returns (points, trial outcomes)."""
    if n_trials < 100:
        raise ValueError("run_roc needs at least 100 trials")
    outcomes = run_trials(cfg, det, n_trials, seed, jobs=jobs)
    return roc_from_outcomes(outcomes, threshold_grid), outcomes


def point_at_false_alarm(points: Sequence[RocPoint], max_pf: float) -> RocPoint:
    """Largest-threshold point whose P_F does not exceed ``max_pf``."""
    ok = [p for p in points if p.P_F <= max_pf]
    if not ok:
        raise ValueError(f"no threshold reaches P_F <= {max_pf}")
    return max(ok, key=lambda p: p.threshold)


def records_from_outcomes(outcomes: Sequence[TrialOutcome], delta: float, params: dict) -> list[ExperimentRecord]:
    recs = []
    for o in outcomes:
        recs.append(ExperimentRecord(o.trial_id, params, 1, False,
                                     ATTACKED if o.c_normal <= delta else NORMAL,
                                     o.c_normal, o.tau_normal, o.elapsed_ms))
        if o.c_attacked is not None:
            recs.append(ExperimentRecord(o.trial_id, params, 1, True,
                                         ATTACKED if o.c_attacked <= delta else NORMAL,
                                         o.c_attacked, o.tau_attacked, o.elapsed_ms))
    return recs


# ---------------------------------------------------------------- sweeps

def apply_param(cfg: SystemConfig, param: str, value) -> SystemConfig:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if param in ("J", "Nc"):
        value = int(value)
    return cfg.with_(**{param: value})


def sweep(cfg: SystemConfig, det: DetectorConfig, param: str, values, n_trials: int = 500,
          n_calibration: int = 200, seed: Optional[int] = None, jobs: int = 1) -> list[dict]:
    """Recalibrate delta and measure P_F / P_D at each parameter value."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for v in values:
        c = apply_param(cfg, param, v)
        delta, _, ec_th = calibrate(c, det, n_calibration, seed=seed)
        outs = run_trials(c, det, n_trials, seed, jobs=jobs)
        v = int(v) if param in ("J", "Nc") else v
        rows.append(_summary_row(param, v, delta, ec_th, outs, det.delta))
    return rows


def _summary_row(param, value, delta, ec_th, outs, fixed_delta) -> dict:
    n = len(outs)
    k_f = sum(o.c_normal <= delta for o in outs)
    k_f_fixed = sum(o.c_normal <= fixed_delta for o in outs)
    att = [o for o in outs if o.c_attacked is not None]
    k_d = sum(o.c_attacked <= delta for o in att)
    ec_f = sum(o.energy_normal > ec_th for o in outs)
    ec_d = sum(o.energy_attacked > ec_th for o in att)
    row = {
        "param": param,
        "value": value,
        "delta": delta,
        "n": n,
        "k_F": k_f,
        "P_F": k_f / n,
        "P_F_lo": wilson(k_f, n)[0],
        "P_F_hi": wilson(k_f, n)[1],
        "P_F_fixed_delta": k_f_fixed / n,
        "k_D": k_d if att else None,
        "P_D": k_d / len(att) if att else None,
        "P_D_lo": wilson(k_d, len(att))[0] if att else None,
        "P_D_hi": wilson(k_d, len(att))[1] if att else None,
        "ec_P_F": ec_f / n,
        "ec_P_D": ec_d / len(att) if att else None,
    }
    return row


def trend_test(successes: Sequence[int], totals: Sequence[int], increasing: bool = True,
               alpha: float = 0.05) -> tuple:
    """One-sided check of a monotone trend between adjacent points.

    Fails when some adjacent pair moves against the expected direction with
    a one-sided two-proportion z-test significant at ``alpha``.  Returns
    (passed, list of (z, p-value) per pair).
    """
    from scipy.stats import norm

    details = []
    ok = True
    for (k1, n1), (k2, n2) in zip(zip(successes, totals), zip(successes[1:], totals[1:])):
        p1, p2 = k1 / n1, k2 / n2
        pooled = (k1 + k2) / (n1 + n2)
        se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
        diff = (p2 - p1) if increasing else (p1 - p2)
        z = diff / se if se > 0 else 0.0
        pval = float(norm.cdf(z))  # small when the move goes the wrong way
        details.append((z, pval))
        ok &= pval >= alpha
    return ok, details


def feature_change_study(cfg: SystemConfig, det: DetectorConfig, Nc_values, n_trials: int = 200,
                         seed: Optional[int] = None, jobs: int = 1) -> list[dict]:
    """Mean change metric of jammed frames versus the number of jammed slots (0 = no jamming)."""
    rows = []
    for nc in Nc_values:
        nc = int(nc)
        if not 0 <= nc <= cfg.Ts:
            raise ValueError(f"Nc={nc} outside [0, Ts={cfg.Ts}]")
        outs = run_trials(cfg, det, n_trials, seed, n_attacked=max(nc, 1), jobs=jobs)
        cs = np.array([o.c_normal if nc == 0 else o.c_attacked for o in outs])
        rows.append({
            "Nc": nc,
            "mean_c": float(cs.mean()),
            "std_c": float(cs.std()),
            "n": len(outs),
        })
    return rows


def convergence_study(cfg: SystemConfig, det: DetectorConfig, n_instances: int = 20,
                      seed: Optional[int] = None, attacked: bool = False) -> list[dict]:
    """Objective traces of the solver on simulated frames."""
    if n_instances < 1:
        raise ValueError("need at least one instance")
    out = []
    for i in range(n_instances):
        normal, jammed = FrameStream(cfg, i, seed).next_pair()
        frame = jammed if (attacked and jammed is not None) else normal
        sol, tau = extract_feature(frame, det, cfg.noise_var)
        out.append({
            "instance": i,
            "iterations": sol.iterations,
            "converged": sol.converged,
            "tau": tau,
            "trace": list(sol.objective_trace),
            "step_norms": list(sol.step_norms),
        })
    return out


def descent_ok(trace, slack: float = 1e-9) -> bool:
    return all(b <= a + slack for a, b in zip(trace, trace[1:]))


# ---------------------------------------------------------------- output

def header_lines(cfg: SystemConfig, det: DetectorConfig, seed: int, kind: str) -> list[str]:
    return [
        f"# jsts {__version__}",
        f"# experiment={kind}",
        f"# config_hash={config_hash(cfg, det)}",
        f"# seed={seed}",
    ]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows: Sequence[dict], header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(line + "\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(v) for k, v in row.items()})


def write_jsonl(path, records, header: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header:
            fh.write(line + "\n")
        for rec in records:
            if not isinstance(rec, dict):
                rec = asdict(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def roc_rows(points: Sequence[RocPoint]) -> list[dict]:
    rows = []
    for p in points:
        kf = round(p.P_F * p.n_trials)
        row = {"threshold": p.threshold, "P_F": p.P_F, "P_F_lo": wilson(kf, p.n_trials)[0],
               "P_F_hi": wilson(kf, p.n_trials)[1], "P_D": p.P_D, "n_trials": p.n_trials}
        if p.P_D is not None:
            kd = round(p.P_D * p.n_trials)
            row["P_D_lo"], row["P_D_hi"] = wilson(kd, p.n_trials)
        else:
            row["P_D_lo"] = row["P_D_hi"] = None
        rows.append(row)
    return rows


def baseline_comparison(outcomes: Sequence[TrialOutcome], target_pf: float = 0.05, tol: float = 0.02,
                        grid=DEFAULT_GRID, alpha: float = 0.05) -> dict:
    """Compare sparsity and energy detectors at a matched false-alarm rate.

    Each detector takes the operating point whose empirical P_F is closest to
    ``target_pf``; the comparison passes unless EC beats JSTS with a one-sided
    two-proportion test significant at ``alpha``.
    """
    n = len(outcomes)
    jsts = min(roc_from_outcomes(outcomes, grid), key=lambda p: (abs(p.P_F - target_pf), -p.threshold))
    energies = sorted({o.energy_normal for o in outcomes})
    ec = min(ec_roc_from_outcomes(outcomes, energies), key=lambda p: (abs(p.P_F - target_pf), p.threshold))
    n_att = sum(o.c_attacked is not None for o in outcomes)
    k_j, k_e = round(jsts.P_D * n_att), round(ec.P_D * n_att)
    _, ((z, p),) = trend_test([k_e, k_j], [n_att, n_att], increasing=True, alpha=alpha)
    return {
        "n": n,
        "jsts_threshold": jsts.threshold,
        "jsts_P_F": jsts.P_F,
        "jsts_P_D": jsts.P_D,
        "ec_threshold": ec.threshold,
        "ec_P_F": ec.P_F,
        "ec_P_D": ec.P_D,
        "matched": abs(jsts.P_F - target_pf) <= tol and abs(ec.P_F - target_pf) <= tol,
        "z": z,
        "p_value": p,
        "passed": p >= alpha and abs(jsts.P_F - target_pf) <= tol and abs(ec.P_F - target_pf) <= tol,
    }
