"""Scenario configuration and the sectioned ``key = value`` config files."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid scenario/sweep configuration."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one simulation run.

    Times are seconds, speeds m/s, rates Kbps. ``attack_window`` is
    ``None`` for a purely normal run.
    """

    n_vehicles: int = 10
    n_bots: int = 2
    speed_range: tuple[float, float] = (0.0, 10.0)
    duration: float = 3600.0
    sample_interval: float = 0.5
    attack_window: tuple[float, float] | None = (900.0, 2700.0)
    bot_groups: int = 3
    seed: int = 0
    # seeds the time-varying draws (start positions, decoy sessions,
    # impairments); None reuses ``seed``
    traffic_seed: int | None = None
    n_monitored_links: int = 25
    impairment_coefficient: float = 0.004
    # topology shape
    n_rsus: int = 4
    n_switches: int = 3
    n_victims: int = 2
    n_decoys: int = 3
    cell_length: float = 250.0
    background_rate: tuple[float, float] = (600.0, 1700.0)
    attack_rate: tuple[float, float] = (40.0, 300.0)
    # legitimate short sessions to the (public) decoy servers
    decoy_session_rate: float = 12.0  # sessions per vehicle per hour
    decoy_session_mean: float = 30.0  # mean session length, s

    def __post_init__(self) -> None:
        self.validate()

    @property
    def stream_seed(self) -> int:
        return self.seed if self.traffic_seed is None else self.traffic_seed

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.sample_interval))

    def validate(self) -> None:
        if self.n_vehicles < 0 or self.n_bots < 0:
            raise ConfigError("n_vehicles and n_bots must be non-negative")
        if self.n_bots > self.n_vehicles:
            raise ConfigError(
                f"n_bots ({self.n_bots}) exceeds n_vehicles ({self.n_vehicles})"
            )
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"speed_range must satisfy 0 <= lo <= hi, got {self.speed_range}")
        if self.duration <= 0 or self.sample_interval <= 0:
            raise ConfigError("duration and sample_interval must be positive")
        ratio = self.duration / self.sample_interval
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(
                f"sample_interval {self.sample_interval} does not divide duration {self.duration}"
            )
        if self.attack_window is not None:
            a0, a1 = self.attack_window
            if not 0 <= a0 < a1 <= self.duration:
                raise ConfigError(
                    f"attack_window {self.attack_window} must lie within [0, {self.duration}]"
                )
        if self.bot_groups < 0:
            raise ConfigError("bot_groups must be non-negative")
        if self.n_monitored_links < 1:
            raise ConfigError("n_monitored_links must be >= 1")
        if self.impairment_coefficient < 0:
            raise ConfigError("impairment_coefficient must be non-negative")
        if self.n_rsus < 1 or self.n_switches < 2:
            raise ConfigError("need at least 1 RSU and 2 switches")
        if self.n_victims < 1 or self.n_decoys < 1:
            raise ConfigError("need at least one victim and one decoy server")
        if self.cell_length <= 0:
            raise ConfigError("cell_length must be positive")
        if self.decoy_session_rate < 0 or self.decoy_session_mean <= 0:
            raise ConfigError("decoy_session_rate must be >= 0 and decoy_session_mean > 0")
        for name in ("background_rate", "attack_rate"):
            r0, r1 = getattr(self, name)
            if not 0 < r0 <= r1:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")

    def replace(self, **changes: Any) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_TUPLE_FIELDS = {"speed_range", "background_rate", "attack_rate", "attack_window"}
_OPTIONAL_INT_FIELDS = {"traffic_seed"}
_INT_FIELDS = {
    "n_vehicles", "n_bots", "bot_groups", "seed", "n_monitored_links",
    "n_rsus", "n_switches", "n_victims", "n_decoys",
}


def parse_value(key: str, raw: str, fields: dict[str, dataclasses.Field] | None = None) -> Any:
    """Coerce a textual config value for ScenarioConfig field ``key``."""
    fields = fields if fields is not None else {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    if key not in fields:
        raise ConfigError(f"unknown scenario field {key!r}")
    raw = raw.strip()
    try:
        if key in _TUPLE_FIELDS:
            if raw.lower() in ("none", "", "off"):
                if key != "attack_window":
                    raise ConfigError(f"{key} cannot be empty")
                return None
            parts = [float(p) for p in raw.replace(",", " ").split()]
            if len(parts) != 2:
                raise ConfigError(f"{key} expects two numbers, got {raw!r}")
            return (parts[0], parts[1])
        if key in _OPTIONAL_INT_FIELDS:
            return None if raw.lower() in ("none", "") else int(raw)
        if key in _INT_FIELDS:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def scenario_from_mapping(mapping: dict[str, str], base: ScenarioConfig | None = None) -> ScenarioConfig:
    base = base or ScenarioConfig()
    changes = {k: parse_value(k, v) for k, v in mapping.items()}
    try:
        return base.replace(**changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config_file(path: str | Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parser


def load_scenario(path: str | Path | None, overrides: dict[str, str] | None = None) -> ScenarioConfig:
    """Read the ``[scenario]`` section of a config file and apply overrides."""
    mapping: dict[str, str] = {}
    if path is not None:
        parser = read_config_file(path)
        if parser.has_section("scenario"):
            mapping.update(parser["scenario"])
    mapping.update(overrides or {})
    try:
        return scenario_from_mapping(mapping)
    except ConfigError as exc:
        where = f"{path}: " if path is not None else ""
        raise ConfigError(f"{where}[scenario] {exc}") from None


def dump_sections(sections: dict[str, dict[str, Any]]) -> str:
    """Render nested dicts as a sectioned ``key = value`` text block."""
    lines: list[str] = []
    for name, values in sections.items():
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for k, v in values.items():
            lines.append(f"{k} = {format_value(v)}")
    return "\n".join(lines) + "\n"


def scenario_section(config: ScenarioConfig) -> dict[str, Any]:
    return {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}

