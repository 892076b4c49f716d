import math

import numpy as np
import pytest

from jsts import harness as H
from jsts.config import DetectorConfig, SystemConfig
from jsts.detector import ATTACKED, NORMAL
from jsts.sim import FrameStream
from jsts.solver import FaProblem, dc_solve

SMALL = SystemConfig(K=300, N=20, Ts=5, J=4)


def outcome(trial, cn, ca, en=1.0, ea=2.0):
    return H.TrialOutcome(trial, 10, 10, 10, cn, ca, en, ea, 0, 0.0)


def test_wilson_hand_values():
    z2 = 1.959964**2
    lo, hi = H.wilson(0, 10)
    assert lo == 0.0 and hi == pytest.approx(z2 / (10 + z2), rel=1e-9)
    lo, hi = H.wilson(5, 10)
    assert lo == pytest.approx(0.2366, abs=1e-4) and hi == pytest.approx(0.7634, abs=1e-4)
    assert all(math.isnan(x) for x in H.wilson(0, 0))


def test_ec_detect():
    assert H.ec_detect(np.zeros((4, 3)), 1e-9) == NORMAL
    assert H.ec_detect(np.ones((2, 2)), 3.5) == ATTACKED
    with pytest.raises(ValueError):
        H.ec_detect(np.zeros((2, 2)), 0.0)


def test_ec_calibration_consistency():
    cfg = SMALL.with_(J=0)
    train = [FrameStream(cfg, 10_000 + i, 0).next_normal().energy() for i in range(1000)]
    th = H.ec_calibrate(train, 0.05)
    held = [FrameStream(cfg, 20_000 + i, 0).next_normal().energy() for i in range(2000)]
    assert np.mean(np.array(held) > th) == pytest.approx(0.05, abs=0.02)
    assert H.ec_calibrate(list(range(1, 101)), 0.05) == 95


def test_roc_boundaries_and_monotone():
    rng = np.random.default_rng(0)
    outs = [outcome(i, float(rng.uniform(0.9, 1.0)), float(rng.uniform(0.5, 1.0))) for i in range(200)]
    pts = H.roc_from_outcomes(outs, [0.0, 0.5, 0.9, 0.95, 1.0])
    assert [p.threshold for p in pts] == sorted(p.threshold for p in pts)
    assert pts[-1].P_F == 1.0 and pts[-1].P_D == 1.0
    assert pts[0].P_F == 0.0
    pf = [p.P_F for p in pts]
    pd = [p.P_D for p in pts]
    assert pf == sorted(pf) and pd == sorted(pd)
    assert H.point_at_false_alarm(pts, 0.1).threshold == 0.9
    with pytest.raises(ValueError):
        H.run_roc(SMALL, DetectorConfig(), 50)


def test_run_roc_small_monotone():
    pts, outs = H.run_roc(SMALL, DetectorConfig(), 100, seed=3)
    order = sorted(pts, key=lambda p: p.P_F)
    assert all(a.P_D <= b.P_D for a, b in zip(order, order[1:]))
    assert len(outs) == 100 and pts[-1].P_F == 1.0


def test_parallel_matches_serial():
    a = H.run_trials(SMALL, DetectorConfig(), 6, seed=1, jobs=1)
    b = H.run_trials(SMALL, DetectorConfig(), 6, seed=1, jobs=2)
    strip = lambda o: {k: v for k, v in o.__dict__.items() if k != "elapsed_ms"}
    assert [strip(x) for x in a] == [strip(x) for x in b]


def test_sweep_without_jammers():
    rows = H.sweep(SystemConfig(), DetectorConfig(), "J", [0], n_trials=200, n_calibration=200)
    (row,) = rows
    assert row["P_D"] is None and row["k_D"] is None
    assert row["P_F"] == pytest.approx(0.05, abs=0.03)
    with pytest.raises(ValueError):
        H.sweep(SMALL, DetectorConfig(), "K", [10])
    with pytest.raises(ValueError):
        H.sweep(SMALL, DetectorConfig(), "J", [])


def test_trend_test_cases():
    ok, det = H.trend_test([10, 20, 30], [100, 100, 100], increasing=True)
    assert ok and len(det) == 2
    ok, _ = H.trend_test([50, 20], [100, 100], increasing=True)
    assert not ok
    ok, _ = H.trend_test([50, 20], [100, 100], increasing=False)
    assert ok
    ok, _ = H.trend_test([50, 47], [100, 100], increasing=True)  # small dip is within noise
    assert ok


def test_feature_change_study_no_attack_and_range():
    (row,) = H.feature_change_study(SystemConfig(), DetectorConfig(), [0], n_trials=50)
    assert row["mean_c"] == pytest.approx(1.0, abs=0.05)
    with pytest.raises(ValueError):
        H.feature_change_study(SMALL, DetectorConfig(), [SMALL.Ts + 1], n_trials=2)


def test_convergence_identity_and_median():
    assert dc_solve(FaProblem(np.eye(6), 1, eps_floor=0.1)).iterations <= 2
    runs = H.convergence_study(SystemConfig(), DetectorConfig(), 20)
    assert np.median([r["iterations"] for r in runs]) <= 100
    assert all(H.descent_ok(r["trace"]) for r in runs)
    with pytest.raises(ValueError):
        H.convergence_study(SMALL, DetectorConfig(), 0)


def test_baseline_comparison_logic():
    rng = np.random.default_rng(4)
    outs = []
    for i in range(400):
        cn = 1.0 if rng.random() > 0.05 else 0.8
        outs.append(outcome(i, cn, 0.5, en=float(rng.uniform(0, 1)), ea=float(rng.uniform(0, 1.02))))
    res = H.baseline_comparison(outs)
    assert res["jsts_P_D"] == 1.0 and res["ec_P_D"] < 0.2 and res["passed"]


def test_output_files(tmp_path):
    hdr = H.header_lines(SMALL, DetectorConfig(), 7, "unit")
    assert hdr[0].startswith("# jsts ") and "# seed=7" in hdr
    H.write_csv(tmp_path / "a.csv", [{"x": 0.1, "y": None, "z": 3}], hdr)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[:4] == hdr and lines[4:] == ["x,y,z", "0.1,,3"]
    H.write_jsonl(tmp_path / "a.jsonl", [{"b": 1, "a": 2}], hdr)
    assert (tmp_path / "a.jsonl").read_text().splitlines()[-1] == '{"a": 2, "b": 1}'
    rows = H.roc_rows([H.RocPoint(0.9, 0.1, None, 10)])
    assert rows[0]["P_D_lo"] is None


def test_records_from_outcomes():
    recs = H.records_from_outcomes([outcome(0, 1.0, 0.5), outcome(1, 0.5, None, ea=None)], 0.95, {"J": 8})
    assert [(r.truth, r.decision) for r in recs] == [(False, NORMAL), (True, ATTACKED), (False, ATTACKED)]
