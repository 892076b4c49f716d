import numpy as np
import pytest

from jsts.config import SystemConfig
from jsts.sim import (
    ActivityMatrix,
    AttackerProfile,
    FrameStream,
    Topology,
    attack_signal,
    dbm_to_watts,
    device_signal,
    path_loss,
    read_frame,
    sample_activity,
    spreading_matrix,
    stream_rng,
    synthesize_attacked_frame,
    synthesize_normal_frame,
    write_frame,
)


def small(**kw):
    base = dict(K=40, N=8, Ts=5, J=2)
    base.update(kw)
    return SystemConfig(**base)


def test_dbm_conversion():
    assert dbm_to_watts(20) == pytest.approx(0.1)
    assert dbm_to_watts(30) == pytest.approx(1.0)
    assert dbm_to_watts(-101) == pytest.approx(7.943e-14, rel=1e-4)


def test_path_loss():
    assert path_loss(1.0, 4, -45) == pytest.approx(10**-4.5)
    assert path_loss(100.0, 4, -45) == pytest.approx(10**-12.5)
    np.testing.assert_allclose(path_loss(np.array([1.0, 100.0]), 4, -45), [10**-4.5, 10**-12.5])
    for bad in (0.0, -3.0):
        with pytest.raises(ValueError):
            path_loss(bad, 4, -45)


def test_activity_trivial_cases():
    rng = np.random.default_rng(0)
    cfg = small(mu=1e-12)
    assert sample_activity(cfg, rng).A.sum() == 0
    A = sample_activity(small(K=500, rho=0.0, mu=0.3), rng).A
    assert np.all(A == A[:, :1])


def test_markov_activity_statistics():
    cfg = SystemConfig(K=2000, Ts=7, mu=0.05, rho=0.4)
    rng = np.random.default_rng(1)
    frames = 10_000
    active = kept = prev_active = 0
    for _ in range(frames):
        A = sample_activity(cfg, rng).A.astype(bool)
        active += A.sum()
        kept += np.sum(A[:, 1:] & A[:, :-1])
        prev_active += np.sum(A[:, :-1])
    mean_activity = active / (frames * cfg.K * cfg.Ts)
    eta = kept / prev_active
    assert abs(mean_activity - 0.05) <= 0.05 * 0.05
    assert abs(eta - (1 - 0.4 * 0.95)) <= 0.02


def test_fixed_overlap_activity():
    cfg = small(K=400, Ts=6, mu=0.1, eta=0.5, activity_model="fixed-overlap")
    A = sample_activity(cfg, np.random.default_rng(2))
    assert np.all(A.A.sum(axis=0) == 40)
    np.testing.assert_allclose(A.overlap(), 0.5)


def test_device_signal_single_device_exact():
    cfg = small(noise_floor_dbm=-300)
    rng = np.random.default_rng(3)
    S = spreading_matrix(cfg.N, cfg.K, rng).S
    A = np.zeros((cfg.K, cfg.Ts), dtype=np.int8)
    A[7, 2] = 1
    beta = np.full(cfg.K, 1e-6)
    sub = np.random.default_rng(99)
    Y = device_signal(cfg, S, ActivityMatrix(A), beta, sub)
    ref = np.random.default_rng(99)
    h = (ref.standard_normal((cfg.K, cfg.Ts)) + 1j * ref.standard_normal((cfg.K, cfg.Ts))) / np.sqrt(2)
    d = (np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2))[ref.integers(0, 4, (cfg.K, cfg.Ts))]
    expected = np.zeros((cfg.N, cfg.Ts), complex)
    expected[:, 2] = np.sqrt(0.1 * 1e-6) * h[7, 2] * d[7, 2] * S[:, 7]
    np.testing.assert_allclose(Y, expected, atol=1e-15)


def test_no_activity_no_noise_gives_zero_frame():
    cfg = small(noise_floor_dbm=-400)
    rng = np.random.default_rng(4)
    S = spreading_matrix(cfg.N, cfg.K, rng)
    A = ActivityMatrix(np.zeros((cfg.K, cfg.Ts), dtype=np.int8))
    f = synthesize_normal_frame(cfg, S, A, rng)
    assert np.max(np.abs(f.Y)) < 1e-15


def test_second_moment_monte_carlo():
    cfg = small(K=30, N=16, Ts=1, P_dbm=20, noise_floor_dbm=-60)
    rng = np.random.default_rng(5)
    S = spreading_matrix(cfg.N, cfg.K, rng).S
    S = S / np.linalg.norm(S, axis=0)  # unit-norm sequences so ||s_k||^2 = 1
    topo = Topology.draw(cfg, rng)
    A = np.zeros((cfg.K, 1), dtype=np.int8)
    A[:10] = 1
    sigma2 = cfg.noise_var
    analytic = cfg.N * sigma2 + np.sum(0.1 * topo.beta[:10])  # sum_k P beta_k ||s_k||^2
    total = 0.0
    n = 10_000
    for _ in range(n):
        f = synthesize_normal_frame(cfg, S, ActivityMatrix(A), rng, topo)
        total += f.energy()
    assert total / n == pytest.approx(analytic, rel=0.05)


def test_attack_with_zero_theta_equals_normal():
    cfg = small(J=1)
    S = spreading_matrix(cfg.N, cfg.K, np.random.default_rng(6))
    A = sample_activity(cfg, np.random.default_rng(7))
    topo = Topology.draw(cfg, np.random.default_rng(8))
    prof = AttackerProfile(np.zeros((1, cfg.K)), np.ones((1, cfg.Ts)), np.ones((1, cfg.Ts)), np.ones(1))
    normal = synthesize_normal_frame(cfg, S, A, np.random.default_rng(9), topo)
    jammed = synthesize_attacked_frame(cfg, S, A, np.random.default_rng(9), topo, prof)
    np.testing.assert_array_equal(normal.Y, jammed.Y)
    assert jammed.truth_attacked and not normal.truth_attacked


def test_attack_one_hot_exact():
    cfg = small(J=1, noise_floor_dbm=-400)
    rng = np.random.default_rng(10)
    S = spreading_matrix(cfg.N, cfg.K, rng).S
    k = 5
    theta = np.zeros((1, cfg.K))
    theta[0, k] = 1.0
    g = rng.standard_normal((1, cfg.Ts)) + 1j * rng.standard_normal((1, cfg.Ts))
    u = rng.standard_normal((1, cfg.Ts)) + 1j * rng.standard_normal((1, cfg.Ts))
    p_beta = 0.1 * 1e-7
    prof = AttackerProfile(theta, g, u, np.array([np.sqrt(p_beta)]))
    A = ActivityMatrix(np.zeros((cfg.K, cfg.Ts), dtype=np.int8))
    f = synthesize_attacked_frame(cfg, S, A, rng, profile=prof)
    expected = np.sqrt(p_beta) * S[:, [k]] * (g * u)
    np.testing.assert_allclose(f.Y, expected, atol=1e-15)


def test_attack_signal_respects_nc():
    cfg = small(J=2, Nc=2)
    rng = np.random.default_rng(11)
    prof = AttackerProfile(rng.uniform(size=(2, cfg.K)), np.ones((2, cfg.Ts)), np.ones((2, cfg.Ts)), np.ones(2))
    sig = rng.standard_normal((cfg.N, 2))
    X = attack_signal(cfg, sig, prof)
    assert np.all(X[:, 2:] == 0) and np.all(np.abs(X[:, :2]) > 0)
    assert np.all(attack_signal(cfg, sig, prof, n_attacked=4)[:, 4:] == 0)


def test_attacked_synthesis_requires_jammers():
    cfg = small(J=0)
    rng = np.random.default_rng(12)
    S = spreading_matrix(cfg.N, cfg.K, rng)
    with pytest.raises(ValueError):
        synthesize_attacked_frame(cfg, S, sample_activity(cfg, rng), rng)


def test_dimension_mismatch():
    cfg = small()
    rng = np.random.default_rng(13)
    with pytest.raises(ValueError):
        synthesize_normal_frame(cfg, np.zeros((cfg.N + 1, cfg.K)), sample_activity(cfg, rng), rng)


def test_attacked_frames_carry_more_energy():
    cfg = SystemConfig()
    en = ea = 0.0
    for trial in range(1000):
        normal, jammed = FrameStream(cfg, trial, 0).next_pair()
        en += normal.energy()
        ea += jammed.energy()
    assert ea > en


def test_pair_shares_everything_but_the_jamming():
    cfg = small()
    normal, jammed = FrameStream(cfg, 3, 1).next_pair()
    st = FrameStream(cfg, 3, 1)
    diff = jammed.Y - normal.Y
    np.testing.assert_allclose(diff, st._sig @ (st.P_bar[:, None] * _gu(cfg, 3, 1)), atol=1e-20)


def _gu(cfg, trial, seed):
    rng = stream_rng(seed, trial, "attacker")
    rng.uniform(0.0, 1.0, size=(cfg.J, cfg.K))
    g = (rng.standard_normal((cfg.J, cfg.Ts)) + 1j * rng.standard_normal((cfg.J, cfg.Ts))) / np.sqrt(2)
    u = (rng.standard_normal((cfg.J, cfg.Ts)) + 1j * rng.standard_normal((cfg.J, cfg.Ts))) / np.sqrt(2)
    return g * u


def test_stream_determinism_and_independence():
    cfg = small()
    a = FrameStream(cfg, 0, 5).next_pair()[1].Y
    b = FrameStream(cfg, 0, 5).next_pair()[1].Y
    c = FrameStream(cfg, 1, 5).next_pair()[1].Y
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    # changing the jammer power leaves the normal frame untouched
    n1 = FrameStream(cfg, 0, 5).next_pair()[0].Y
    n2 = FrameStream(cfg.with_(P_uaj_dbm=5.0), 0, 5).next_pair()[0].Y
    np.testing.assert_array_equal(n1, n2)


def test_hadamard_spreading():
    S = spreading_matrix(8, 20, np.random.default_rng(0), "hadamard").S
    assert S.shape == (8, 20)
    np.testing.assert_allclose(np.abs(S), 1.0)  # +-1 entries, same per-entry power as gaussian


def test_frame_dump_roundtrip(tmp_path):
    f = FrameStream(small(), 0, 0).next_normal()
    path = tmp_path / "f.bin"
    write_frame(path, f)
    raw = path.read_bytes()
    assert raw[:8] == b"JSTSFRM1"
    assert int.from_bytes(raw[8:12], "little") == f.N
    assert int.from_bytes(raw[12:16], "little") == f.Ts
    assert len(raw) == 16 + 16 * f.N * f.Ts
    assert np.frombuffer(raw[16:24], "<f8")[0] == f.Y[0, 0].real
    assert np.frombuffer(raw[24:32], "<f8")[0] == f.Y[0, 0].imag
    np.testing.assert_array_equal(read_frame(path), f.Y)
    (tmp_path / "bad.bin").write_bytes(b"NOTFRAME" + raw[8:])
    with pytest.raises(ValueError):
        read_frame(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_frame(tmp_path / "short.bin")
