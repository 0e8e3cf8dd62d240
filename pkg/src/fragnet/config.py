"""Pipeline configuration: one versioned YAML file, strict keys, round-trip.

Precedence is flags > file > defaults. Unknown keys anywhere in the document
are rejected before any stage runs, and parse(serialize(cfg)) == cfg holds
exactly.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import ValidationError
from .rolling import RollingConfig

CONFIG_SCHEMA = "fragnet-config/1"

ESTIMATORS = ("shrinkage", "pearson")
SPECTRA = ("CORRELATION", "ADJACENCY")
POOLING = ("within_date", "pooled")
STRATEGY_NAMES = ("TARGETED_RCS", "STRENGTH", "RANDOM")


@dataclass
class DataConfig:
    api_base: str = "https://api.llama.fi"
    cache_dir: str = "cache"
    snapshot: str | None = None
    start: str | None = None
    end: str | None = None
    exclusions: tuple = ("CEX", "Chain")
    offline: bool = False
    min_interval: float = 0.25

    def __post_init__(self):
        self.exclusions = tuple(str(c) for c in self.exclusions)
        if self.min_interval < 0:
            raise ValidationError("data.min_interval must be nonnegative")


@dataclass
class CleaningConfig:
    tau_abs: float = 5_000_000.0
    tau_rel: float = 2.0
    tau_mad: float = 12.0
    reversal_horizon: int = 3
    reversal_band: float = 0.25
    return_eps: float = 1e-11
    winsor_level: float = 0.005
    pooled_winsor: bool = False

    def __post_init__(self):
        if min(self.tau_abs, self.tau_rel, self.tau_mad) <= 0:
            raise ValidationError("cleaning thresholds must be positive")
        if self.reversal_horizon < 1:
            raise ValidationError("cleaning.reversal_horizon must be >= 1")
        if self.reversal_band <= 0:
            raise ValidationError("cleaning.reversal_band must be positive")
        if self.return_eps <= 0:
            raise ValidationError("cleaning.return_eps must be positive")
        if not 0.0 <= self.winsor_level < 0.5:
            raise ValidationError("cleaning.winsor_level must lie in [0, 0.5)")


@dataclass
class NetworkConfig:
    estimator: str = "shrinkage"
    rho: float = 0.3
    rho_grid: tuple = (0.25, 0.30, 0.35)
    spectrum_source: str = "CORRELATION"
    glasso_penalty: float = 0.05
    glasso_penalty_grid: tuple = (0.01, 0.05, 0.1)
    glasso_tol: float = 1e-4
    glasso_max_sweeps: int = 200

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValidationError(f"network.estimator must be one of {ESTIMATORS}")
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError("network.rho must lie in [0, 1)")
        self.rho_grid = tuple(float(r) for r in self.rho_grid)
        self.glasso_penalty_grid = tuple(float(g) for g in self.glasso_penalty_grid)
        if not self.rho_grid:
            raise ValidationError("network.rho_grid cannot be empty")
        if self.spectrum_source not in SPECTRA:
            raise ValidationError(f"network.spectrum_source must be one of {SPECTRA}")
        if self.glasso_penalty <= 0 or self.glasso_tol <= 0 or self.glasso_max_sweeps < 1:
            raise ValidationError("glasso settings must be positive")


@dataclass
class RcsConfig:
    eps: float = 1e-8
    freeze_n: bool = False
    high_quantile: float = 0.75

    def __post_init__(self):
        if self.eps <= 0:
            raise ValidationError("rcs.eps must be positive")
        if not 0.0 <= self.high_quantile < 1.0:
            raise ValidationError("rcs.high_quantile must lie in [0, 1)")


@dataclass
class AttackConfig:
    k_grid: tuple = (1, 3, 5, 10)
    mc_draws: int = 200
    regime_quantile: float = 0.20
    random_pooling: str = "within_date"
    strategies: tuple = STRATEGY_NAMES

    def __post_init__(self):
        self.k_grid = tuple(int(k) for k in self.k_grid)
        self.strategies = tuple(str(s) for s in self.strategies)
        if not self.k_grid or min(self.k_grid) < 1:
            raise ValidationError("attack.k_grid must hold positive sizes")
        if self.mc_draws < 2:
            raise ValidationError("attack.mc_draws must be >= 2")
        if not 0.0 < self.regime_quantile < 0.5:
            raise ValidationError("attack.regime_quantile must lie in (0, 0.5)")
        if self.random_pooling not in POOLING:
            raise ValidationError(f"attack.random_pooling must be one of {POOLING}")
        unknown = set(self.strategies) - set(STRATEGY_NAMES)
        if unknown:
            raise ValidationError(f"unknown attack strategies {sorted(unknown)}")


@dataclass
class RegressionConfig:
    controls_path: str | None = None
    horizons: tuple = (7, 14, 30)
    nw_lags: int | None = None
    vol_window: int = 30
    annualize: bool = True
    periods_per_year: int = 365

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        if any(h < 2 for h in self.horizons):
            raise ValidationError("regression horizons must be >= 2")
        if self.vol_window < 2:
            raise ValidationError("regression.vol_window must be >= 2")
        if self.nw_lags is not None and self.nw_lags < 0:
            raise ValidationError("regression.nw_lags must be nonnegative")


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)
    rolling: RollingConfig = field(default_factory=RollingConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    rcs: RcsConfig = field(default_factory=RcsConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    seed: int = 0
    output_dir: str = "out"
    jobs: int = 1

    def __post_init__(self):
        if not self.output_dir:
            raise ValidationError("output_dir cannot be empty")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")


_SECTIONS = {
    "data": DataConfig,
    "cleaning": CleaningConfig,
    "rolling": RollingConfig,
    "network": NetworkConfig,
    "rcs": RcsConfig,
    "attack": AttackConfig,
    "regression": RegressionConfig,
}


def _build(cls, mapping: dict, path: str):
    if not isinstance(mapping, dict):
        raise ValidationError(f"config section {path or 'root'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        where = path or "top level"
        raise ValidationError(f"unknown config key {unknown[0]!r} at {where}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in mapping:
            continue
        value = mapping[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ValidationError("config document must be a mapping")
    doc = dict(doc)
    schema = doc.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ValidationError(
            f"config schema mismatch: found {schema!r}, expected {CONFIG_SCHEMA!r}"
        )
    sections = {}
    for key, cls in _SECTIONS.items():
        if key in doc:
            sections[key] = _build(cls, doc.pop(key), key)
    top = _build(PipelineConfig, doc, "")
    for key, value in sections.items():
        setattr(top, key, value)
    return top


def config_to_dict(cfg: PipelineConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    doc = {"schema": CONFIG_SCHEMA}
    doc.update(plain(cfg))
    return doc


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if overrides:
        doc = apply_overrides(doc, overrides)
    return config_from_dict(doc)


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Merge dotted-key overrides ('network.rho' -> value) into the document."""
    out = dict(doc)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            child = dict(node.get(part, {}) or {})
            node[part] = child
            node = child
        node[parts[-1]] = value
    return out


def parse_override(expr: str):
    """'key.path=value' with YAML scalar semantics for the value."""
    if "=" not in expr:
        raise ValidationError(f"override {expr!r} must look like key.path=value")
    key, raw = expr.split("=", 1)
    key = key.strip()
    if not key:
        raise ValidationError(f"override {expr!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse override value {raw!r}: {exc}") from exc
    return key, value
