"""Deterministic synthetic panels: planted factor structure, cores, anomalies.

Return construction per category i and day t:

    r_it = l_t * f_t + c_t * g_t * 1{i in core} + sqrt(1 - l_t^2 - ...) * e_it

with unit-variance pieces, so any two peripheral categories correlate at
l_t^2 and two core members at the requested intra-core level. Everything is
scaled to a realistic daily magnitude and exponentiated into positive USD
levels. One seed pins the whole panel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import yaml

from .errors import ValidationError
from .panel import CategoryPanel

SYNTH_SCHEMA = "fragnet-synth/1"
DAILY_SCALE = 0.02  # target daily return std, roughly crypto TVL sized

SPIKE = "spike"
SHIFT = "shift"


@dataclass
class AnomalyPlan:
    category: str
    day: int          # row index into the generated date range
    kind: str         # spike (one day, reverts) or shift (persists)
    magnitude: float  # multiplicative factor applied to the level

    def __post_init__(self):
        if self.kind not in (SPIKE, SHIFT):
            raise ValidationError(f"unknown anomaly kind {self.kind!r}")
        if self.magnitude <= 0:
            raise ValidationError("anomaly magnitude must be positive")


@dataclass
class SynthSpec:
    n_categories: int
    n_days: int
    seed: int
    loading_path: float | list | np.ndarray = 0.0
    core_size: int = 0
    core_corr: float = 0.0     # total intra-core correlation, includes the global part
    noise_scale: float = DAILY_SCALE
    start: str = "2021-01-01"
    names: tuple[str, ...] = ()
    anomalies: list[AnomalyPlan] = field(default_factory=list)

    def __post_init__(self):
        if self.n_categories < 2:
            raise ValidationError("need at least 2 categories")
        if self.n_days < 3:
            raise ValidationError("need at least 3 days")
        if self.core_size > self.n_categories:
            raise ValidationError("core cannot exceed the category count")
        if not 0.0 <= self.core_corr < 1.0:
            raise ValidationError("core correlation must lie in [0, 1)")
        if self.names and len(self.names) != self.n_categories:
            raise ValidationError("names length must match n_categories")

    def resolved_names(self) -> tuple[str, ...]:
        if self.names:
            return tuple(self.names)
        width = len(str(self.n_categories - 1))
        return tuple(f"cat{str(i).zfill(width)}" for i in range(self.n_categories))

    def resolved_loadings(self) -> np.ndarray:
        """Per-return-row loadings, length n_days - 1."""
        n_ret = self.n_days - 1
        path = self.loading_path
        if np.isscalar(path):
            arr = np.full(n_ret, float(path))
        else:
            arr = np.asarray(path, dtype=np.float64)
            if arr.shape == (self.n_days,):
                arr = arr[1:]
            elif arr.shape != (n_ret,):
                raise ValidationError(
                    f"loading path length must be {self.n_days} or {n_ret}, got {arr.shape}"
                )
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValidationError("loadings must lie in [0, 1]")
        if self.core_size > 0 and np.any(arr ** 2 > self.core_corr):
            raise ValidationError(
                "core correlation must be at least the squared global loading everywhere"
            )
        return arr


def linear_loading_path(n_days: int, lo: float, hi: float) -> np.ndarray:
    return np.linspace(lo, hi, n_days - 1)


def two_regime_path(n_days: int, low: float, high: float, split: float = 0.5) -> np.ndarray:
    n_ret = n_days - 1
    cut = int(round(split * n_ret))
    return np.concatenate([np.full(cut, low), np.full(n_ret - cut, high)])


def generate_panel(spec: SynthSpec) -> CategoryPanel:
    """Build the TVL panel from the spec; same seed, same panel, always."""
    rng = np.random.default_rng(spec.seed)
    n_ret = spec.n_days - 1
    n = spec.n_categories
    load = spec.resolved_loadings()

    f = rng.standard_normal(n_ret)
    g = rng.standard_normal(n_ret)
    eps = rng.standard_normal((n_ret, n))

    core_var = np.zeros(n_ret)
    if spec.core_size > 0:
        core_var = spec.core_corr - load ** 2
    idio_core = np.sqrt(np.clip(1.0 - load ** 2 - core_var, 0.0, None))
    idio_peri = np.sqrt(np.clip(1.0 - load ** 2, 0.0, None))

    r = np.empty((n_ret, n))
    common = load * f
    core_part = np.sqrt(core_var) * g
    for i in range(n):
        if i < spec.core_size:
            r[:, i] = common + core_part + idio_core * eps[:, i]
        else:
            r[:, i] = common + idio_peri * eps[:, i]
    r *= spec.noise_scale

    base = 10.0 ** rng.uniform(7.0, 9.0, size=n)  # log-uniform 1e7..1e9 USD
    levels = np.empty((spec.n_days, n))
    levels[0] = base
    levels[1:] = base * np.exp(np.cumsum(r, axis=0))

    names = spec.resolved_names()
    dates = pd.date_range(spec.start, periods=spec.n_days, freq="D")
    frame = pd.DataFrame(levels, index=dates, columns=list(names))

    for plan in spec.anomalies:
        if plan.category not in frame.columns:
            raise ValidationError(f"anomaly plan names unknown category {plan.category!r}")
        if not 0 <= plan.day < spec.n_days:
            raise ValidationError(f"anomaly day {plan.day} outside 0..{spec.n_days - 1}")
        col = frame.columns.get_loc(plan.category)
        if plan.kind == SPIKE:
            frame.iloc[plan.day, col] *= plan.magnitude
        else:
            frame.iloc[plan.day :, col] *= plan.magnitude

    return CategoryPanel(frame=frame)


def expected_fragility_direction(spec: SynthSpec) -> int | None:
    """+1 if the planted loading path rises, -1 if it falls, None if flat.

    Acceptance harnesses use this as the predicted ordering of window-level
    fragility. A non-monotone path has no single predicted direction.
    """
    load = spec.resolved_loadings()
    diffs = np.diff(load)
    if np.all(diffs == 0.0):
        return None
    if np.all(diffs >= 0.0):
        return 1
    if np.all(diffs <= 0.0):
        return -1
    raise ValidationError("loading path is not monotone; no predicted ordering")


def generate_market_controls(
    dates: pd.DatetimeIndex, seed: int
) -> pd.DataFrame:
    """Synthetic daily (eth_price, btc_price, gas_fee) levels for fixtures."""
    rng = np.random.default_rng(seed)
    n = len(dates)
    eth = 2000.0 * np.exp(np.cumsum(rng.normal(0.0002, 0.04, size=n)))
    btc = 30000.0 * np.exp(np.cumsum(rng.normal(0.0002, 0.03, size=n)))
    gas = np.empty(n)
    gas[0] = 0.05
    shocks = rng.normal(0.0, 0.01, size=n)
    for t in range(1, n):
        gas[t] = max(0.9 * gas[t - 1] + 0.005 + shocks[t], 1e-4)
    return pd.DataFrame(
        {"eth_price": eth, "btc_price": btc, "gas_fee": gas},
        index=pd.DatetimeIndex(dates),
    )


# ---------------------------------------------------------------------------
# spec file round trip
# ---------------------------------------------------------------------------

def save_spec(spec: SynthSpec, path) -> None:
    payload = {
        "schema": SYNTH_SCHEMA,
        "n_categories": spec.n_categories,
        "n_days": spec.n_days,
        "seed": spec.seed,
        "loading_path": (
            float(spec.loading_path)
            if np.isscalar(spec.loading_path)
            else [float(v) for v in np.asarray(spec.loading_path)]
        ),
        "core_size": spec.core_size,
        "core_corr": spec.core_corr,
        "noise_scale": spec.noise_scale,
        "start": spec.start,
        "names": list(spec.names),
        "anomalies": [
            {"category": a.category, "day": a.day, "kind": a.kind, "magnitude": a.magnitude}
            for a in spec.anomalies
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)


def load_spec(path) -> SynthSpec:
    with open(path, "r", encoding="utf-8") as fh:
        payload = yaml.safe_load(fh)
    if not isinstance(payload, dict) or payload.get("schema") != SYNTH_SCHEMA:
        raise ValidationError(f"{path}: not a {SYNTH_SCHEMA} spec file")
    return SynthSpec(
        n_categories=int(payload["n_categories"]),
        n_days=int(payload["n_days"]),
        seed=int(payload["seed"]),
        loading_path=payload.get("loading_path", 0.0),
        core_size=int(payload.get("core_size", 0)),
        core_corr=float(payload.get("core_corr", 0.0)),
        noise_scale=float(payload.get("noise_scale", DAILY_SCALE)),
        start=str(payload.get("start", "2021-01-01")),
        names=tuple(payload.get("names", ())),
        anomalies=[AnomalyPlan(**a) for a in payload.get("anomalies", ())],
    )
