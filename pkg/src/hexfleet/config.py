"""Run configuration: flat key = value text files with a closed key set.

Unknown keys are errors, not warnings — silent typos corrupt experiments.
`gamma` is parsed and carried but never consumed by any model equation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # spatial encoding
    geohash_precision: int = 8
    micro_diameter_km: float = 2.0
    meso_diameter_km: float = 5.0
    macro_diameter_km: float = 10.0
    # model sizes
    d_g: int = 128
    d_model: int = 64
    decoder_layers: int = 2
    dropout: float = 0.5
    # reward
    alpha: float = 0.65
    gamma: float = 0.99  # discount factor from the return definition; unused downstream
    # optimizer
    adam_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # actions and sequences
    r_max_km: float = 5.0
    leng: int = 1024
    n_segments: int = 1000
    train_frac: float = 0.6
    val_frac: float = 0.3
    # training schedule
    pretrain_epochs: int = 60
    pretrain_window: int = 12
    policy_epochs: int = 20
    # synthetic city
    bbox_lat_min: float = 40.0
    bbox_lat_max: float = 40.09
    bbox_lon_min: float = -74.0
    bbox_lon_max: float = -73.88
    n_vehicles: int = 20
    sim_minutes: float = 120.0
    eval_minutes: float = 30.0
    order_rate_per_min: float = 2.0
    n_hotspots: int = 2
    hotspot_sigma_km: float = 1.2
    familiarity_at_hotspots: bool = False
    cruise_kmh: float = 40.0
    free_flow_kmh: float = 60.0
    dt_s: float = 30.0
    speed_limit_kmh: float = 60.0
    # V2V observability
    hop_delay_min_ms: float = 50.0
    hop_delay_max_ms: float = 200.0
    hop_budget_ms: float = 1000.0
    # model variants
    gcn_self_loops: bool = True
    geo_loss_mode: str = "symmetric"
    angle_weight: float = 1.0
    context_mode: str = "sequence"

    def validate(self) -> "RunConfig":
        checks = [
            (1 <= self.geohash_precision <= 16, "geohash_precision in [1, 16]"),
            (0 < self.micro_diameter_km <= 2.0, "micro_diameter_km in (0, 2]"),
            (2.0 < self.meso_diameter_km < 10.0, "meso_diameter_km in (2, 10)"),
            (self.macro_diameter_km >= 10.0, "macro_diameter_km >= 10"),
            (self.d_g >= 1, "d_g >= 1"),
            (self.d_model >= 2, "d_model >= 2"),
            (self.decoder_layers >= 1, "decoder_layers >= 1"),
            (0 <= self.dropout < 1, "dropout in [0, 1)"),
            (0 <= self.alpha <= 1, "alpha in [0, 1]"),
            (0 <= self.gamma <= 1, "gamma in [0, 1]"),
            (self.adam_lr > 0, "adam_lr > 0"),
            (0 < self.adam_beta1 < 1, "adam_beta1 in (0, 1)"),
            (0 < self.adam_beta2 < 1, "adam_beta2 in (0, 1)"),
            (self.adam_eps > 0, "adam_eps > 0"),
            (self.r_max_km > 0, "r_max_km > 0"),
            (2 <= self.leng <= 1024, "leng in [2, 1024]"),
            (1 <= self.n_segments <= 100000, "n_segments in [1, 100000]"),
            (0 < self.train_frac < 1 and 0 < self.val_frac < 1, "split fractions in (0, 1)"),
            (self.train_frac + self.val_frac < 1, "train_frac + val_frac < 1"),
            (self.pretrain_epochs >= 1, "pretrain_epochs >= 1"),
            (2 <= self.pretrain_window <= self.leng, "pretrain_window in [2, leng]"),
            (self.policy_epochs >= 1, "policy_epochs >= 1"),
            (self.bbox_lat_min < self.bbox_lat_max, "bbox latitudes ordered"),
            (self.bbox_lon_min < self.bbox_lon_max, "bbox longitudes ordered"),
            (self.n_vehicles >= 1, "n_vehicles >= 1"),
            (self.sim_minutes > 0 and self.eval_minutes > 0, "horizons positive"),
            (self.order_rate_per_min >= 0, "order_rate_per_min >= 0"),
            (self.n_hotspots >= 0, "n_hotspots >= 0"),
            (self.hotspot_sigma_km > 0, "hotspot_sigma_km > 0"),
            (self.cruise_kmh > 0 and self.free_flow_kmh > 0, "speeds positive"),
            (self.dt_s > 0, "dt_s > 0"),
            (self.speed_limit_kmh > 0, "speed_limit_kmh > 0"),
            (0 < self.hop_delay_min_ms <= self.hop_delay_max_ms, "hop delay range ordered"),
            (self.hop_budget_ms > 0, "hop_budget_ms > 0"),
            (self.geo_loss_mode in ("symmetric", "literal"), "geo_loss_mode symmetric|literal"),
            (self.angle_weight >= 0, "angle_weight >= 0"),
            (self.context_mode in ("sequence", "step"), "context_mode sequence|step"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"config constraint violated: {msg}")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}") from None
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw)
    for key, val in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, val) if isinstance(val, str) and _FIELD_TYPES[key] != "str" else val
    return RunConfig(**values).validate()


def load_config(path, **overrides) -> RunConfig:
    return parse_config(Path(path).read_text(), **overrides)


def config_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:16]
