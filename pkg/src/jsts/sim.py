"""Grant-free uplink frame synthesis with and without access jamming.

Frames are N x Ts complex matrices.  Device activity follows independent
two-state Markov chains (or a fixed-overlap resampling model), each active
device spreads a QPSK symbol with its own sequence through Rayleigh fading
and distance path loss, and jammers transmit Gaussian symbols on random
non-negative combinations of the legitimate sequences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import SystemConfig

QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2.0)

FRAME_MAGIC = b"JSTSFRM1"
_STREAMS = {"topology": 0, "activity": 1, "channels": 2, "noise": 3, "attacker": 4}


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def path_loss(D, alpha: float, L_o_db: float):
    """Linear large-scale gain 10^(L_o/10) * D^-alpha."""
    D = np.asarray(D, dtype=float)
    if np.any(~(D > 0)):
        raise ValueError("distance must be strictly positive")
    beta = 10.0 ** (L_o_db / 10.0) * D ** (-alpha)
    return float(beta) if beta.ndim == 0 else beta


def stream_rng(seed: int, trial: int, name: str) -> np.random.Generator:
    """Independent generator for one named component of one trial."""
    return np.random.default_rng(np.random.SeedSequence([seed, trial, _STREAMS[name]]))


def complex_normal(rng: np.random.Generator, size) -> np.ndarray:
    """CN(0, 1) samples."""
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def qpsk(rng: np.random.Generator, size) -> np.ndarray:
    return QPSK[rng.integers(0, 4, size=size)]


@dataclass
class SpreadingMatrix:
    S: np.ndarray
    generator: str = "gaussian"

    @property
    def N(self) -> int:
        return self.S.shape[0]

    @property
    def K(self) -> int:
        return self.S.shape[1]


def spreading_matrix(N: int, K: int, rng: np.random.Generator, generator: str = "gaussian") -> SpreadingMatrix:
    if generator == "gaussian":
        return SpreadingMatrix(rng.standard_normal((N, K)), generator)
    if generator == "hadamard":
        from scipy.linalg import hadamard

        order = 1 << max(0, int(np.ceil(np.log2(max(N, 2)))))
        H = hadamard(order).astype(float)
        rows = rng.choice(order, size=N, replace=False)
        cols = rng.integers(0, order, size=K)
        return SpreadingMatrix(H[np.ix_(rows, cols)], generator)
    raise ValueError(f"unknown spreading generator {generator!r}")


@dataclass
class ActivityMatrix:
    A: np.ndarray  # K x Ts, entries 0/1

    def overlap(self) -> np.ndarray:
        """Per-slot |active(t-1) & active(t)| / |active(t)| for t >= 1 (nan when empty)."""
        A = self.A.astype(bool)
        inter = np.sum(A[:, 1:] & A[:, :-1], axis=0).astype(float)
        size = A[:, 1:].sum(axis=0).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(size > 0, inter / size, np.nan)


def sample_activity(cfg: SystemConfig, rng: np.random.Generator) -> ActivityMatrix:
    K, Ts, mu = cfg.K, cfg.Ts, cfg.mu
    A = np.zeros((K, Ts), dtype=np.int8)
    if cfg.activity_model == "markov":
        p_off = cfg.rho * (1.0 - mu)
        p_on = cfg.rho * mu
        state = rng.random(K) < mu
        A[:, 0] = state
        for t in range(1, Ts):
            u = rng.random(K)
            state = np.where(state, u >= p_off, u < p_on)
            A[:, t] = state
        return ActivityMatrix(A)
    if cfg.activity_model == "fixed-overlap":
        n_active = int(round(mu * K))
        keep = int(round(cfg.eta * n_active))
        active = rng.choice(K, size=n_active, replace=False)
        A[active, 0] = 1
        for t in range(1, Ts):
            kept = rng.choice(active, size=keep, replace=False)
            pool = np.setdiff1d(np.arange(K), active, assume_unique=False)
            fresh = rng.choice(pool, size=n_active - keep, replace=False)
            active = np.concatenate([kept, fresh])
            A[active, t] = 1
        return ActivityMatrix(A)
    raise ValueError(f"unknown activity model {cfg.activity_model!r}")


@dataclass
class Topology:
    """Per-trial geometry: large-scale gains of devices and attackers."""

    beta: np.ndarray  # K
    beta_attacker: np.ndarray  # J

    @classmethod
    def draw(cls, cfg: SystemConfig, rng: np.random.Generator) -> "Topology":
        lo, hi = cfg.D_range
        D = rng.uniform(lo, hi, size=cfg.K)
        alo, ahi = cfg.D_attacker_range
        DA = rng.uniform(alo, ahi, size=cfg.J)
        return cls(
            beta=path_loss(D, cfg.alpha, cfg.L_o_db),
            beta_attacker=path_loss(DA, cfg.alpha, cfg.L_o_db) if cfg.J else np.zeros(0),
        )


@dataclass
class AttackerProfile:
    theta: np.ndarray  # J x K
    g: np.ndarray  # J x Ts
    u: np.ndarray  # J x Ts
    P_bar: np.ndarray  # J

    def signatures(self, S: np.ndarray) -> np.ndarray:
        """N x J matrix of attacker sequences sum_k theta_jk s_k."""
        return S @ self.theta.T

    @classmethod
    def draw(cls, cfg: SystemConfig, topo: Topology, rng: np.random.Generator) -> "AttackerProfile":
        J = cfg.J
        theta = rng.uniform(0.0, 1.0, size=(J, cfg.K))
        g = complex_normal(rng, (J, cfg.Ts))
        u = complex_normal(rng, (J, cfg.Ts))
        P_bar = np.sqrt(dbm_to_watts(cfg.P_uaj_dbm) * topo.beta_attacker)
        return cls(theta, g, u, P_bar)


@dataclass
class FrameObservation:
    Y: np.ndarray  # N x Ts complex
    truth_attacked: bool
    activity: Optional[ActivityMatrix] = None
    frame_index: int = 0

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def Ts(self) -> int:
        return self.Y.shape[1]

    def energy(self) -> float:
        return float(np.sum(np.abs(self.Y) ** 2))


def _check_dims(cfg: SystemConfig, S: np.ndarray, A: ActivityMatrix) -> None:
    if S.shape != (cfg.N, cfg.K):
        raise ValueError(f"spreading matrix must be {cfg.N}x{cfg.K}, got {S.shape}")
    if A.A.shape != (cfg.K, cfg.Ts):
        raise ValueError(f"activity matrix must be {cfg.K}x{cfg.Ts}, got {A.A.shape}")


def _as_array(S) -> np.ndarray:
    return S.S if isinstance(S, SpreadingMatrix) else np.asarray(S)


def device_signal(cfg: SystemConfig, S, A: ActivityMatrix, beta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Noiseless sum over active devices, N x Ts."""
    S = _as_array(S)
    amp = np.sqrt(dbm_to_watts(cfg.P_dbm) * beta)
    h = complex_normal(rng, (cfg.K, cfg.Ts))
    d = qpsk(rng, (cfg.K, cfg.Ts))
    X = A.A * amp[:, None] * h * d
    return S @ X


def noise(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    sigma2 = cfg.noise_var
    return np.sqrt(sigma2) * complex_normal(rng, (cfg.N, cfg.Ts))


def attack_signal(cfg: SystemConfig, signatures: np.ndarray, prof: AttackerProfile, n_attacked: Optional[int] = None) -> np.ndarray:
    """Jamming contribution from N x J attacker sequences, nonzero in the first Nc slots."""
    Nc = cfg.Nc if n_attacked is None else n_attacked
    coeff = prof.P_bar[:, None] * prof.g * prof.u  # J x Ts
    coeff[:, Nc:] = 0.0
    return signatures @ coeff


def synthesize_normal_frame(
    cfg: SystemConfig,
    S,
    A: ActivityMatrix,
    rng: np.random.Generator,
    topo: Optional[Topology] = None,
    frame_index: int = 0,
) -> FrameObservation:
    S_arr = _as_array(S)
    _check_dims(cfg, S_arr, A)
    if topo is None:
        topo = Topology.draw(cfg, rng)
    Y = device_signal(cfg, S_arr, A, topo.beta, rng) + noise(cfg, rng)
    return FrameObservation(Y, False, A, frame_index)


def synthesize_attacked_frame(
    cfg: SystemConfig,
    S,
    A: ActivityMatrix,
    rng: np.random.Generator,
    topo: Optional[Topology] = None,
    profile: Optional[AttackerProfile] = None,
    frame_index: int = 0,
) -> FrameObservation:
    """Normal frame drawn from ``rng`` exactly as the normal path, plus jamming."""
    if cfg.J < 1:
        raise ValueError("attacked synthesis needs J >= 1; use synthesize_normal_frame")
    if topo is None:
        topo = Topology.draw(cfg, rng)
    base = synthesize_normal_frame(cfg, S, A, rng, topo, frame_index)
    if profile is None:
        profile = AttackerProfile.draw(cfg, topo, rng)
    Y = base.Y + attack_signal(cfg, profile.signatures(_as_array(S)), profile)
    return FrameObservation(Y, True, A, frame_index)


class FrameStream:
    """Consecutive frames of one trial sharing geometry, sequences and jammer mix.

    Each component draws from its own named substream so the normal and the
    attacked version of a frame share every device, channel and noise sample.
    """

    def __init__(self, cfg: SystemConfig, trial: int = 0, seed: Optional[int] = None):
        self.cfg = cfg
        self.trial = trial
        self.seed = cfg.seed if seed is None else seed
        topo_rng = stream_rng(self.seed, trial, "topology")
        self.S = spreading_matrix(cfg.N, cfg.K, topo_rng, cfg.spreading)
        self.topo = Topology.draw(cfg, topo_rng)
        self._act = stream_rng(self.seed, trial, "activity")
        self._chan = stream_rng(self.seed, trial, "channels")
        self._noise = stream_rng(self.seed, trial, "noise")
        self._att = stream_rng(self.seed, trial, "attacker")
        self.theta = self._att.uniform(0.0, 1.0, size=(cfg.J, cfg.K)) if cfg.J else np.zeros((0, cfg.K))
        self.P_bar = np.sqrt(dbm_to_watts(cfg.P_uaj_dbm) * self.topo.beta_attacker)
        self._sig = self.S.S @ self.theta.T
        self.index = 0

    def next_pair(self, n_attacked: Optional[int] = None):
        """Return (normal, attacked) versions of the next frame; attacked is None when J=0."""
        cfg = self.cfg
        A = sample_activity(cfg, self._act)
        Y = device_signal(cfg, self.S, A, self.topo.beta, self._chan) + noise(cfg, self._noise)
        idx = self.index
        self.index += 1
        normal = FrameObservation(Y, False, A, idx)
        if cfg.J == 0:
            return normal, None
        g = complex_normal(self._att, (cfg.J, cfg.Ts))
        u = complex_normal(self._att, (cfg.J, cfg.Ts))
        prof = AttackerProfile(self.theta, g, u, self.P_bar)
        Yj = Y + attack_signal(cfg, self._sig, prof, n_attacked)
        return normal, FrameObservation(Yj, True, A, idx)

    def next_normal(self) -> FrameObservation:
        return self.next_pair()[0]


def write_frame(path, frame: FrameObservation) -> None:
    """Little-endian dump: magic, N, Ts (uint32), then interleaved re/im float64 row-major."""
    N, Ts = frame.Y.shape
    buf = np.empty((N, Ts, 2), dtype="<f8")
    buf[..., 0] = frame.Y.real
    buf[..., 1] = frame.Y.imag
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<II", N, Ts))
        fh.write(buf.tobytes())


def read_frame(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:8] != FRAME_MAGIC:
            raise ValueError(f"{path}: not a frame dump")
        N, Ts = struct.unpack("<II", head[8:])
        raw = np.frombuffer(fh.read(), dtype="<f8")
    if raw.size != 2 * N * Ts:
        raise ValueError(f"{path}: truncated payload")
    raw = raw.reshape(N, Ts, 2)
    return raw[..., 0] + 1j * raw[..., 1]
