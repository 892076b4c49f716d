"""Sparsity feature extraction and sequential change-frame detection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .config import DetectorConfig
from .sim import FrameObservation
from .solver import FaProblem, FaSolution, dc_solve, moment_matrix

NORMAL, ATTACKED, BOOTSTRAP = "normal", "attacked", "bootstrap"
MIN_CALIBRATION_FRAMES = 20


def real_expand(frame) -> np.ndarray:
    """Ts x 2N real matrix whose row t is [Re o_t, Im o_t]."""
    Y = frame.Y if isinstance(frame, FrameObservation) else np.asarray(frame)
    if Y.ndim == 1:
        Y = Y[:, None]
    return np.hstack([Y.real.T, Y.imag.T])


def complex_to_real_operator(S) -> np.ndarray:
    """Block matrix [[Re S, -Im S], [Im S, Re S]] acting on stacked (Re, Im) vectors."""
    S = np.asarray(S)
    return np.block([[S.real, -S.imag], [S.imag, S.real]])


def build_problem(frame, cfg: DetectorConfig, noise_var: Optional[float] = None) -> FaProblem:
    O = real_expand(frame)
    if cfg.mode == "slot-covariance":
        R = moment_matrix(O, "slot-covariance")
        data = O
    else:
        R = moment_matrix(O, "vectorized")
        data = O.reshape(1, -1, order="F")
    eps = floor_value(R, cfg, noise_var)
    return FaProblem(R, min(cfg.r, R.shape[0] - 1), eps, cfg.eps_stop, cfg.max_iter, data=data)


def floor_value(R, cfg: DetectorConfig, noise_var: Optional[float] = None) -> float:
    """Variance floor for a frame.

    ``relative`` scales the mean diagonal of R, ``noise`` scales the noise
    power; an explicit ``eps_floor`` overrides both.
    """
    if cfg.eps_floor is not None:
        return cfg.eps_floor
    if cfg.floor_mode == "noise":
        if noise_var is None:
            raise ValueError("noise floor mode needs the noise power")
        return cfg.eps_floor_scale * noise_var
    mean_diag = float(np.trace(R)) / R.shape[0]
    # An all-zero frame has nothing above any floor; keep eps positive.
    return cfg.eps_floor_scale * mean_diag if mean_diag > 0 else 1.0


def extract_feature(frame, cfg: DetectorConfig, noise_var: Optional[float] = None):
    """Return (solution, tau) for one frame."""
    sol = dc_solve(build_problem(frame, cfg, noise_var))
    return sol, sol.tau


def change_metric(tau_l: int, tau_prev: int) -> float:
    """1 - |tau_l - tau_prev| / max(tau_prev, 1)."""
    return 1.0 - abs(tau_l - tau_prev) / max(tau_prev, 1)


@dataclass
class DetectorState:
    tau_prev: Optional[int] = None
    frame_index: int = 0
    decision_log: list = field(default_factory=list)

    def write_jsonl(self, fh) -> None:
        for rec in self.decision_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def decide(tau: int, state: DetectorState, delta: float):
    """Stage-2 rule on a precomputed feature; returns (decision, c)."""
    if state.tau_prev is None:
        state.tau_prev = tau
        return BOOTSTRAP, None
    c = change_metric(tau, state.tau_prev)
    if c > delta:
        state.tau_prev = tau
        return NORMAL, c
    # alarm: keep the last accepted reference
    return ATTACKED, c


def step(frame, state: DetectorState, cfg: DetectorConfig, noise_var: Optional[float] = None) -> str:
    sol, tau = extract_feature(frame, cfg, noise_var)
    decision, c = decide(tau, state, cfg.delta)
    rec = {
        "frame_index": getattr(frame, "frame_index", state.frame_index),
        "tau": tau,
        "c": c,
        "decision": decision,
        "solver_iterations": sol.iterations,
    }
    truth = getattr(frame, "truth_attacked", None)
    if truth is not None:
        rec["truth"] = bool(truth)
    state.decision_log.append(rec)
    state.frame_index += 1
    return decision


def replay(taus: Iterable[int], delta: float, state: Optional[DetectorState] = None) -> list:
    """Decisions for a feature sequence; identical inputs give identical outputs."""
    state = state or DetectorState()
    return [decide(int(t), state, delta)[0] for t in taus]


def passthrough_metrics(taus: Iterable[int]) -> list[float]:
    """c between consecutive features, reference always advanced (no alarm freeze)."""
    taus = list(taus)
    return [change_metric(b, a) for a, b in zip(taus, taus[1:])]


def lower_quantile(values, q: float) -> float:
    """Empirical lower q-quantile: the ceil(q*n)-th order statistic (1-based, at least the first)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("no values")
    k = max(int(np.ceil(q * v.size)), 1)
    return float(v[k - 1])


def calibrate_threshold(normal_frames, cfg: DetectorConfig, q: Optional[float] = None, noise_var=None) -> float:
    """Lower q-quantile of c over attack-free frames.

    ``normal_frames`` is one stream of consecutive frames, or a list of such
    streams; c is only taken between neighbours of the same stream.
    """
    q = cfg.calibration_quantile if q is None else q
    streams = list(normal_frames)
    if streams and isinstance(streams[0], FrameObservation):
        streams = [streams]
    n = sum(len(s) for s in streams)
    if n < MIN_CALIBRATION_FRAMES:
        raise ValueError(f"calibration needs at least {MIN_CALIBRATION_FRAMES} frames, got {n}")
    cs: list[float] = []
    for stream in streams:
        cs += passthrough_metrics(extract_feature(f, cfg, noise_var)[1] for f in stream)
    return calibrate_from_metrics(cs, q)


def calibrate_from_metrics(cs, q: float) -> float:
    if not 0 < q < 0.5:
        raise ValueError("calibration quantile must lie in (0, 0.5)")
    return min(lower_quantile(cs, q), 1.0)
