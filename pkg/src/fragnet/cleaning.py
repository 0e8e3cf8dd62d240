"""Anomaly detection and repair, gap filling, log returns, winsorization.

Detection applies three rules to the day-over-day change of each category's
observed values: an absolute dollar threshold, a relative-change threshold,
and a robust MAD rule on the change distribution. Flagged jumps that revert
to near the pre-jump level within a short horizon are treated as technical
glitches and repaired by local interpolation; sustained level shifts are
kept as real liquidity movements.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import DataError, ValidationError
from .panel import CategoryPanel, ReturnMatrix

log = logging.getLogger(__name__)

TAU_ABS = 5_000_000.0
TAU_REL = 2.0
TAU_MAD = 12.0
REVERSAL_HORIZON = 3   # observed days a spike has to revert within
REVERSAL_BAND = 0.25   # relative distance to pre-jump level that counts as reverted
RETURN_EPS = 1e-11
WINSOR_LEVEL = 0.005

TECHNICAL = "TECHNICAL"
PERSISTENT = "PERSISTENT"


@dataclass
class AnomalyFlag:
    category: str
    date: pd.Timestamp
    rule_hits: tuple[str, ...]
    classification: str
    original_value: float
    repaired_value: float | None = None

    def __post_init__(self):
        if not self.rule_hits:
            raise ValidationError("anomaly flag with no rule hits")
        unknown = set(self.rule_hits) - {"ABS", "REL", "MAD"}
        if unknown:
            raise ValidationError(f"unknown anomaly rules: {sorted(unknown)}")
        if self.classification not in (TECHNICAL, PERSISTENT):
            raise ValidationError(f"unknown classification {self.classification!r}")


def _observed(series: pd.Series) -> tuple[np.ndarray, np.ndarray]:
    """Positions (row index) and values of the non-missing cells."""
    mask = series.notna().to_numpy()
    return np.nonzero(mask)[0], series.to_numpy()[mask]


def detect_anomalies(
    panel: CategoryPanel,
    tau_abs: float = TAU_ABS,
    tau_rel: float = TAU_REL,
    tau_mad: float = TAU_MAD,
    reversal_horizon: int = REVERSAL_HORIZON,
    reversal_band: float = REVERSAL_BAND,
) -> list[AnomalyFlag]:
    """Flag anomalous observed days per category.

    A day t is flagged when |dV_t| > tau_abs, or |V_t/V_{t-1} - 1| > tau_rel,
    or |dV_t - median(dV)| / MAD(dV) > tau_mad, with dV the change between
    consecutive observed values. MAD is the raw median absolute deviation,
    no consistency scaling; MAD == 0 disables that rule for the category.
    """
    flags: list[AnomalyFlag] = []
    for cat in panel.categories:
        pos, vals = _observed(panel.frame[cat])
        if vals.size < 3:
            log.warning("category %s: fewer than 3 observed points, detection skipped", cat)
            continue
        deltas = np.diff(vals)
        med = float(np.median(deltas))
        mad = float(np.median(np.abs(deltas - med)))

        flagged_idx: list[int] = []  # index into vals (>=1)
        hits_at: dict[int, list[str]] = {}
        for k in range(1, vals.size):
            d = vals[k] - vals[k - 1]
            hits = []
            if abs(d) > tau_abs:
                hits.append("ABS")
            prev = vals[k - 1]
            if prev != 0.0 and abs(vals[k] / prev - 1.0) > tau_rel:
                hits.append("REL")
            if mad > 0.0 and abs(d - med) / mad > tau_mad:
                hits.append("MAD")
            if hits:
                flagged_idx.append(k)
                hits_at[k] = hits

        flagged_set = set(flagged_idx)
        for k in flagged_idx:
            # pre-jump level: last observed value before the flagged run
            j = k - 1
            while j in flagged_set:
                j -= 1
            level = vals[j]
            reverted = False
            for step in range(1, reversal_horizon + 1):
                if k + step >= vals.size:
                    break
                if abs(vals[k + step] - level) <= reversal_band * abs(level):
                    reverted = True
                    break
            flags.append(
                AnomalyFlag(
                    category=cat,
                    date=panel.dates[pos[k]],
                    rule_hits=tuple(hits_at[k]),
                    classification=TECHNICAL if reverted else PERSISTENT,
                    original_value=float(vals[k]),
                )
            )
    return flags


def repair_series(
    panel: CategoryPanel, flags: list[AnomalyFlag]
) -> tuple[CategoryPanel, list[AnomalyFlag]]:
    """Replace TECHNICAL cells by interpolation between clean neighbors.

    Interpolation runs in observed-position space between the nearest
    non-TECHNICAL observed anchors; a flag with no anchor on one side takes
    the nearest anchor's value. PERSISTENT cells are left alone. A category
    whose every observed cell is TECHNICAL is dropped. Returns the repaired
    panel and the flags enriched with repaired values.
    """
    tech: dict[str, dict[pd.Timestamp, int]] = {}
    for i, f in enumerate(flags):
        if f.classification == TECHNICAL:
            tech.setdefault(f.category, {})[f.date] = i

    frame = panel.frame.copy()
    out_flags = list(flags)
    dropped: list[str] = []

    for cat, by_date in tech.items():
        pos, vals = _observed(frame[cat])
        date_of = {panel.dates[p]: idx for idx, p in enumerate(pos)}
        bad = sorted(date_of[d] for d in by_date if d in date_of)
        bad_set = set(bad)
        anchors = [idx for idx in range(vals.size) if idx not in bad_set]
        if not anchors:
            dropped.append(cat)
            continue
        anchor_vals = np.interp(bad, anchors, vals[anchors])  # clamps at the ends
        col = frame[cat].to_numpy()
        for idx, new_val in zip(bad, anchor_vals):
            col[pos[idx]] = new_val
            fi = by_date[panel.dates[pos[idx]]]
            out_flags[fi] = replace(out_flags[fi], repaired_value=float(new_val))
        frame[cat] = col

    if dropped:
        log.warning("dropping categories with every observation flagged: %s", dropped)
        frame = frame.drop(columns=dropped)
        if frame.shape[1] == 0:
            raise DataError("repair dropped every category")

    return CategoryPanel(frame=frame, excluded=panel.excluded), out_flags


def fill_gaps(panel: CategoryPanel) -> CategoryPanel:
    """Fill missing cells by linear interpolation, clamped at the edges.

    Interior gaps interpolate between the neighboring observations; leading
    and trailing gaps take the nearest observed value.
    """
    frame = panel.frame.copy()
    n = len(frame.index)
    all_pos = np.arange(n)
    for cat in frame.columns:
        pos, vals = _observed(frame[cat])
        if pos.size == 0:
            raise DataError(f"category {cat!r} has no observations to fill from")
        if pos.size < n:
            frame[cat] = np.interp(all_pos, pos, vals)
    return CategoryPanel(frame=frame, excluded=panel.excluded)


def compute_log_returns(panel: CategoryPanel, eps: float = RETURN_EPS) -> pd.DataFrame:
    """r_t = log(V_t + eps) - log(V_{t-1} + eps); one fewer row than the panel."""
    if bool(panel.frame.isna().any().any()):
        raise ValidationError("log returns need a gap-filled panel, found missing cells")
    vals = panel.frame.to_numpy()
    logs = np.log(vals + eps)
    rets = logs[1:] - logs[:-1]
    return pd.DataFrame(rets, index=panel.dates[1:], columns=panel.frame.columns)


def winsorize_and_balance(
    raw_returns: pd.DataFrame,
    level: float = WINSOR_LEVEL,
    pooled: bool = False,
) -> ReturnMatrix:
    """Clip each category to its [level, 1-level] quantile band, drop constants.

    Quantiles are linear-interpolated empirical quantiles. ``pooled=True``
    computes one band from all categories stacked and applies it everywhere.
    """
    if not 0.0 <= level < 0.5:
        raise ValidationError(f"winsorization level must be in [0, 0.5), got {level}")
    frame = raw_returns.copy()

    bounds: dict[str, tuple[float, float]] = {}
    if pooled:
        flat = frame.to_numpy().ravel()
        lo, hi = np.quantile(flat, [level, 1.0 - level])
        for cat in frame.columns:
            bounds[cat] = (float(lo), float(hi))
            frame[cat] = frame[cat].clip(lo, hi)
    else:
        for cat in frame.columns:
            lo, hi = np.quantile(frame[cat].to_numpy(), [level, 1.0 - level])
            bounds[cat] = (float(lo), float(hi))
            frame[cat] = frame[cat].clip(lo, hi)

    stds = frame.std(axis=0, ddof=0)
    dropped = tuple(c for c in frame.columns if stds[c] == 0.0)
    if dropped:
        log.info("dropping zero-variance categories: %s", list(dropped))
        frame = frame.drop(columns=list(dropped))
        for c in dropped:
            bounds.pop(c, None)
    if frame.shape[1] == 0:
        raise DataError("winsorization left no categories with positive variance")

    return ReturnMatrix(frame=frame, winsor_bounds=bounds, dropped_categories=dropped)


def flags_to_frame(flags: list[AnomalyFlag]) -> pd.DataFrame:
    rows = [
        {
            "category": f.category,
            "date": f.date.strftime("%Y-%m-%d"),
            "rules": "|".join(f.rule_hits),
            "classification": f.classification,
            "original": f.original_value,
            "repaired": f.repaired_value if f.repaired_value is not None else "",
        }
        for f in flags
    ]
    return pd.DataFrame(rows, columns=["category", "date", "rules", "classification", "original", "repaired"])


@dataclass
class CleaningResult:
    returns: ReturnMatrix
    flags: list[AnomalyFlag]
    repaired_panel: CategoryPanel


def clean_panel(
    panel: CategoryPanel,
    tau_abs: float = TAU_ABS,
    tau_rel: float = TAU_REL,
    tau_mad: float = TAU_MAD,
    reversal_horizon: int = REVERSAL_HORIZON,
    reversal_band: float = REVERSAL_BAND,
    eps: float = RETURN_EPS,
    winsor_level: float = WINSOR_LEVEL,
    pooled_winsor: bool = False,
) -> CleaningResult:
    """Full cleaning pass: detect, repair, fill, difference, winsorize."""
    flags = detect_anomalies(panel, tau_abs, tau_rel, tau_mad, reversal_horizon, reversal_band)
    repaired, flags = repair_series(panel, flags)
    filled = fill_gaps(repaired)
    raw = compute_log_returns(filled, eps=eps)
    returns = winsorize_and_balance(raw, level=winsor_level, pooled=pooled_winsor)
    return CleaningResult(returns=returns, flags=flags, repaired_panel=repaired)
