"""Scenario and detector configuration, plus the flat ``key=value`` file format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from typing import Optional


class ConfigError(ValueError):
    """Malformed config text or a value outside its allowed range."""


@dataclass
class SystemConfig:
    K: int = 2000
    N: int = 50
    Ts: int = 7
    L: int = 100
    mu: float = 0.05
    rho: float = 0.4
    eta: float = 0.3
    activity_model: str = "markov"
    spreading: str = "gaussian"
    P_dbm: float = 20.0
    P_uaj_dbm: float = 20.0
    J: int = 8
    D_range: tuple = (40.0, 800.0)
    D_attacker_range: tuple = (60.0, 800.0)
    alpha: float = 4.0
    L_o_db: float = -45.0
    noise_floor_dbm: float = -101.0
    Nc: Optional[int] = None  # None -> every slot of an attacked frame
    seed: int = 0

    def __post_init__(self):
        self.D_range = tuple(float(x) for x in self.D_range)
        self.D_attacker_range = tuple(float(x) for x in self.D_attacker_range)
        if self.Nc is None:
            self.Nc = self.Ts
        self.validate()

    @property
    def noise_var(self) -> float:
        from .sim import dbm_to_watts

        return dbm_to_watts(self.noise_floor_dbm)

    @property
    def D_max(self) -> float:
        return self.D_attacker_range[1]

    def validate(self) -> None:
        if not 0 < self.mu < 1:
            raise ConfigError(f"mu={self.mu} violates 0 < mu < 1")
        if not 0 <= self.rho <= 1:
            raise ConfigError(f"rho={self.rho} violates 0 <= rho <= 1")
        if not 0 <= self.eta <= 1:
            raise ConfigError(f"eta={self.eta} violates 0 <= eta <= 1")
        for name in ("K", "N", "Ts", "L"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}={getattr(self, name)} violates {name} >= 1")
        if self.J < 0:
            raise ConfigError(f"J={self.J} violates J >= 0")
        if not 1 <= self.Nc <= self.Ts:
            raise ConfigError(f"Nc={self.Nc} violates 1 <= Nc <= Ts={self.Ts}")
        for name in ("D_range", "D_attacker_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name}=({lo}, {hi}) violates 0 < lower <= upper")
        if self.activity_model not in ("markov", "fixed-overlap"):
            raise ConfigError(f"activity_model={self.activity_model!r} not in markov, fixed-overlap")
        if self.spreading not in ("gaussian", "hadamard"):
            raise ConfigError(f"spreading={self.spreading!r} not in gaussian, hadamard")

    def with_(self, **changes) -> "SystemConfig":
        if "Ts" in changes and "Nc" not in changes and self.Nc == self.Ts:
            changes["Nc"] = changes["Ts"]
        if "D_max" in changes:
            changes["D_attacker_range"] = (self.D_attacker_range[0], changes.pop("D_max"))
        return replace(self, **changes)


MODES = ("slot-covariance", "vectorized")
FLOOR_MODES = ("relative", "noise")


@dataclass
class DetectorConfig:
    mode: str = "slot-covariance"
    r: int = 1
    floor_mode: str = "relative"  # relative: scale * mean(diag R); noise: scale * noise power
    eps_floor_scale: float = 0.08
    eps_floor: Optional[float] = None  # fixed floor, overrides floor_mode
    eps_stop: float = 1e-3
    max_iter: int = 500
    delta: float = 0.95
    calibration_quantile: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode={self.mode!r} not in {', '.join(MODES)}")
        if not 0 < self.delta <= 1:
            raise ConfigError(f"delta={self.delta} violates 0 < delta <= 1")
        if not 0 < self.calibration_quantile < 0.5:
            raise ConfigError(
                f"calibration_quantile={self.calibration_quantile} violates 0 < q < 0.5"
            )
        if self.floor_mode not in FLOOR_MODES:
            raise ConfigError(f"floor_mode={self.floor_mode!r} not in {', '.join(FLOOR_MODES)}")
        if self.r < 1:
            raise ConfigError(f"r={self.r} violates r >= 1")
        if self.eps_floor is not None and not self.eps_floor > 0:
            raise ConfigError(f"eps_floor={self.eps_floor} violates eps_floor > 0")
        if not self.eps_floor_scale > 0:
            raise ConfigError(f"eps_floor_scale={self.eps_floor_scale} violates > 0")
        if not self.eps_stop > 0:
            raise ConfigError(f"eps_stop={self.eps_stop} violates eps_stop > 0")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter={self.max_iter} violates max_iter >= 1")


_SYSTEM_KEYS = [f.name for f in fields(SystemConfig)]
_DETECTOR_KEYS = [f.name for f in fields(DetectorConfig)]


def _parse_value(owner, name: str, text: str):
    default = next(f for f in fields(owner) if f.name == name).default
    text = text.strip()
    if name in ("D_range", "D_attacker_range"):
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != 2:
            raise ValueError("expected 'lower,upper'")
        return tuple(float(p) for p in parts)
    if name in ("Nc", "eps_floor"):
        if text.lower() in ("", "none", "auto"):
            return None
        return int(text) if name == "Nc" else float(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text: str, source: str = "<config>"):
    """Parse ``key=value`` lines into (SystemConfig, DetectorConfig).

    Blank lines and ``#`` comments are ignored; unknown keys are rejected and
    missing keys keep their defaults.
    """
    sys_kw: dict = {}
    det_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "D_max":
            # shorthand for the upper end of the attacker distance range
            lo = sys_kw.get("D_attacker_range", SystemConfig().D_attacker_range)[0]
            try:
                sys_kw["D_attacker_range"] = (lo, float(value))
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for D_max: {exc}") from None
            continue
        if key in _SYSTEM_KEYS:
            owner, target = SystemConfig, sys_kw
        elif key in _DETECTOR_KEYS:
            owner, target = DetectorConfig, det_kw
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            target[key] = _parse_value(owner, key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return SystemConfig(**sys_kw), DetectorConfig(**det_kw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: SystemConfig, det: Optional[DetectorConfig] = None) -> str:
    """Canonical text: every key, fixed order, one per line."""
    det = det or DetectorConfig()
    lines = [f"{f.name}={_fmt(getattr(cfg, f.name))}" for f in fields(cfg)]
    lines += [f"{f.name}={_fmt(getattr(det, f.name))}" for f in fields(det)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: SystemConfig, det: Optional[DetectorConfig] = None) -> str:
    return hashlib.sha256(serialize_config(cfg, det).encode()).hexdigest()[:16]
