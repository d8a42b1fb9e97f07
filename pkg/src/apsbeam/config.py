"""Run configuration: dataclasses plus an INI reader/writer.

Defaults are the reference simulation settings. The file format is plain
``configparser`` INI with the sections ``scenario``, ``channel``, ``radio``,
``agents`` and ``run``; unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from . import neuralcore as nc
from .channel import ChannelParams
from .scenario import ScenarioConfig


BASELINE_MODES = ("none", "batch", "counterfactual")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RadioConfig:
    p_max_hab: float = 40.0
    p_max_haps: float = 100.0
    haps_power_mode: str = "per_beam"

    def __post_init__(self):
        if self.p_max_hab <= 0 or self.p_max_haps <= 0:
            raise ValueError("power budgets must be positive")
        if self.haps_power_mode not in ("per_beam", "total"):
            raise ValueError(f"haps_power_mode must be per_beam or total, got {self.haps_power_mode!r}")

    @property
    def haps_per_beam(self) -> bool:
        return self.haps_power_mode == "per_beam"


@dataclass(frozen=True)
class Hyperparams:
    gamma_hab: float = 0.4
    gamma_haps: float = 0.4
    eta: int = 2
    eta_ckpt: int = 10
    batch_size: int = 32
    buffer_capacity: int = 100_000
    episodes: int = 200
    lr: float = 1e-3
    baseline: str = "batch"
    entropy_norm: str = "per_dim"
    kernel: int = 3
    hidden_units: int = 512
    conv_channels: int = 16
    init_log_std: float = -2.0
    eval_episodes: int = 500
    mean_action: bool = False

    def __post_init__(self):
        if self.gamma_hab < 0 or self.gamma_haps < 0:
            raise ValueError("entropy coefficients must be non-negative")
        if self.eta < 1 or self.eta_ckpt < 1:
            raise ValueError("update and checkpoint periods must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if self.episodes < 1 or self.eval_episodes < 1:
            raise ValueError("episode counts must be >= 1")
        if self.baseline not in BASELINE_MODES:
            raise ValueError(f"baseline must be one of {BASELINE_MODES}, got {self.baseline!r}")
        if self.entropy_norm not in ("per_dim", "sum"):
            raise ValueError(f"entropy_norm must be per_dim or sum, got {self.entropy_norm!r}")
        if not nc.LOG_STD_MIN <= self.init_log_std <= nc.LOG_STD_MAX:
            raise ValueError(f"init_log_std must lie in [{nc.LOG_STD_MIN}, {nc.LOG_STD_MAX}]")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    radio: RadioConfig = field(default_factory=RadioConfig)
    agents: Hyperparams = field(default_factory=Hyperparams)
    mode: str = "train"
    seed: int = 0
    output_dir: str = "runs"
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("train", "eval", "sweep", "selftest"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def with_values(self, section: str, **kw) -> "RunConfig":
        return replace(self, **{section: replace(getattr(self, section), **kw)})

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode("utf-8")).hexdigest()


# (section, file key, dataclass attribute, type)
_SCHEMA = [
    ("scenario", "B", "B", int),
    ("scenario", "K", "K", int),
    ("scenario", "q_m", "q", float),
    ("scenario", "l_m", "l", float),
    ("scenario", "hab_alt_m", "hab_altitude", float),
    ("scenario", "haps_alt_m", "haps_altitude", float),
    ("scenario", "v_mps", "v", float),
    ("scenario", "T_c_s", "T_c", float),
    ("scenario", "T", "T", int),
    ("scenario", "n_hab_antennas", "n_hab_antennas", int),
    ("scenario", "n_haps_antennas", "n_haps_antennas", int),
    ("channel", "f_c_hz", "f_c", float),
    ("channel", "c_mps", "c", float),
    ("channel", "rician_X", "X", float),
    ("channel", "rho", "rho", "rho"),
    ("channel", "shadow_var_db_hab", "shadow_var_db_hab", float),
    ("channel", "shadow_var_db_haps", "shadow_var_db_haps", float),
    ("channel", "xi", "xi", float),
    ("channel", "noise_w", "noise_w", float),
    ("channel", "freeze_shadowing", "freeze_shadowing", bool),
    ("radio", "p_max_hab_w", "p_max_hab", float),
    ("radio", "p_max_haps_w", "p_max_haps", float),
    ("radio", "haps_power_mode", "haps_power_mode", str),
    ("agents", "gamma_hab", "gamma_hab", float),
    ("agents", "gamma_haps", "gamma_haps", float),
    ("agents", "eta", "eta", int),
    ("agents", "eta_ckpt", "eta_ckpt", int),
    ("agents", "batch_size", "batch_size", int),
    ("agents", "buffer_capacity", "buffer_capacity", int),
    ("agents", "episodes", "episodes", int),
    ("agents", "lr", "lr", float),
    ("agents", "baseline", "baseline", str),
    ("agents", "entropy_norm", "entropy_norm", str),
    ("agents", "kernel", "kernel", int),
    ("agents", "hidden_units", "hidden_units", int),
    ("agents", "conv_channels", "conv_channels", int),
    ("agents", "init_log_std", "init_log_std", float),
    ("agents", "eval_episodes", "eval_episodes", int),
    ("agents", "mean_action", "mean_action", bool),
    ("run", "mode", "mode", str),
    ("run", "seed", "seed", int),
    ("run", "output_dir", "output_dir", str),
    ("run", "checkpoint", "checkpoint", "optstr"),
]
_EXTRA_KEYS = {("channel", "noise_dbm")}


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def _parse_value(raw: str, kind, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "rho":
            return None if raw.lower() == "auto" else float(raw)
        if kind == "optstr":
            return None if raw.lower() in ("", "none") else raw
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {(s, k) for s, k, _, _ in _SCHEMA} | _EXTRA_KEYS
    for section in cp.sections():
        if section not in ("scenario", "channel", "radio", "agents", "run"):
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if (section, key) not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    values = {"scenario": {}, "channel": {}, "radio": {}, "agents": {}, "run": {}}
    for section, key, attr, kind in _SCHEMA:
        if cp.has_option(section, key):
            values[section][attr] = _parse_value(cp.get(section, key), kind, f"[{section}] {key}")
    if cp.has_option("channel", "noise_dbm"):
        if "noise_w" in values["channel"]:
            raise ConfigError("give either noise_w or noise_dbm, not both")
        dbm = _parse_value(cp.get("channel", "noise_dbm"), float, "[channel] noise_dbm")
        values["channel"]["noise_w"] = dbm_to_watts(dbm)
    try:
        return RunConfig(
            scenario=ScenarioConfig(**values["scenario"]),
            channel=ChannelParams(**values["channel"]),
            radio=RadioConfig(**values["radio"]),
            agents=Hyperparams(**values["agents"]),
            **values["run"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, key, attr, _ in _SCHEMA:
        if not cp.has_section(section):
            cp.add_section(section)
        obj = cfg if section == "run" else getattr(cfg, section)
        value = getattr(obj, attr)
        if attr == "rho" and value is None:
            cp.set(section, key, "auto")
        else:
            cp.set(section, key, _format_value(value))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
