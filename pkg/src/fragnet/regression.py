"""Realized volatility, forward volatility, and OLS with Newey-West inference.

The contemporaneous specs relate the index to realized risk proxies at the
window-end dates; the predictive specs relate it to forward volatility of
aggregate TVL growth with the lagged dependent variable and market controls
on the right-hand side.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError, ValidationError

log = logging.getLogger(__name__)

ANNUALIZE_DAYS = 365  # crypto trades every day; 252 available via argument
VOL_WINDOW = 30
HORIZONS = (7, 14, 30)

# two-sided normal critical values at 10 / 5 / 1 percent
_STARS = ((2.5758293035489004, "***"), (1.959963984540054, "**"), (1.6448536269514722, "*"))

CONTROL_COLUMNS = ("eth_vol_30d", "btc_return", "gas_fee", "tvl_vol_30d")


def realized_vol(
    series: pd.Series,
    window: int = VOL_WINDOW,
    annualize: bool = True,
    periods_per_year: int = ANNUALIZE_DAYS,
) -> pd.Series:
    """Trailing rolling sample standard deviation, optionally annualized.

    Leading dates with fewer than ``window`` observations stay missing.
    """
    if window < 2:
        raise ValidationError(f"volatility window must be >= 2, got {window}")
    vol = series.rolling(window, min_periods=window).std(ddof=1)
    if annualize:
        vol = vol * math.sqrt(periods_per_year)
    return vol


def forward_vol(series: pd.Series, horizon: int) -> pd.Series:
    """Sample std over the next ``horizon`` observations (t, t+h], stamped at t.

    The trailing ``horizon`` dates have no complete forward window and stay
    missing.
    """
    if horizon < 2:
        raise ValidationError(f"forward horizon must be >= 2, got {horizon}")
    # trailing window ending at t+h, then restamped to t: covers t+1..t+h
    return series.rolling(horizon, min_periods=horizon).std(ddof=1).shift(-horizon)


def default_nw_lags(n_obs: int) -> int:
    return int(math.floor(4.0 * (n_obs / 100.0) ** (2.0 / 9.0)))


@dataclass
class RegressionResult:
    name: str
    columns: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    tstat: np.ndarray
    pvalue: np.ndarray
    stars: tuple[str, ...]
    n_obs: int
    r_squared: float
    nw_lags: int

    def coef_for(self, column: str) -> float:
        return float(self.coef[self.columns.index(column)])

    def se_for(self, column: str) -> float:
        return float(self.se[self.columns.index(column)])

    def stars_for(self, column: str) -> str:
        return self.stars[self.columns.index(column)]

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "spec": self.name,
                "term": list(self.columns),
                "coef": self.coef,
                "se": self.se,
                "tstat": self.tstat,
                "pvalue": self.pvalue,
                "stars": list(self.stars),
                "n_obs": self.n_obs,
                "r_squared": self.r_squared,
                "nw_lags": self.nw_lags,
            }
        )


def _normal_sf2(t: np.ndarray) -> np.ndarray:
    # two-sided p under the standard normal
    return np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in t])


def _find_collinear(X: np.ndarray, columns: tuple[str, ...]) -> list[str]:
    """Columns that add no rank when appended left to right."""
    bad = []
    rank = 0
    for j in range(X.shape[1]):
        r = np.linalg.matrix_rank(X[:, : j + 1])
        if r == rank:
            bad.append(columns[j])
        rank = r
    return bad


def ols_hac(
    y: np.ndarray | pd.Series,
    X: pd.DataFrame,
    nw_lags: int | None = None,
    name: str = "",
) -> RegressionResult:
    """OLS with Bartlett-kernel HAC covariance, no small-sample correction.

    ``nw_lags=0`` degenerates to the White heteroskedasticity-robust
    covariance. Stars use two-sided normal critical values at 10/5/1 percent.
    """
    columns = tuple(str(c) for c in X.columns)
    Xv = X.to_numpy(dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64).ravel()
    n, p = Xv.shape
    if yv.shape[0] != n:
        raise ValidationError(f"y has {yv.shape[0]} rows, X has {n}")
    if n <= p:
        raise ValidationError(f"{n} observations cannot identify {p} coefficients")
    if not (np.isfinite(Xv).all() and np.isfinite(yv).all()):
        raise DataError("regression input contains non-finite values")
    if np.linalg.matrix_rank(Xv) < p:
        raise DataError(f"design matrix is rank deficient; collinear columns: {_find_collinear(Xv, columns)}")
    if nw_lags is None:
        nw_lags = default_nw_lags(n)
    if nw_lags < 0:
        raise ValidationError(f"lag count must be nonnegative, got {nw_lags}")

    XtX = Xv.T @ Xv
    beta = np.linalg.solve(XtX, Xv.T @ yv)
    resid = yv - Xv @ beta

    xu = Xv * resid[:, None]
    S = xu.T @ xu
    for lag in range(1, nw_lags + 1):
        w = 1.0 - lag / (nw_lags + 1.0)
        gamma = xu[lag:].T @ xu[:-lag]
        S += w * (gamma + gamma.T)
    XtX_inv = np.linalg.inv(XtX)
    cov = XtX_inv @ S @ XtX_inv
    cov = 0.5 * (cov + cov.T)
    # floor tiny negative eigenvalues so the covariance stays PSD
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[0] < 0.0:
        cov = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T

    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, beta / se, np.inf * np.sign(beta))
    pvalue = _normal_sf2(tstat)
    stars = tuple(next((s for cut, s in _STARS if abs(t) >= cut), "") for t in tstat)

    sst = float(np.sum((yv - yv.mean()) ** 2))
    ssr = float(resid @ resid)
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")

    return RegressionResult(
        name=name,
        columns=columns,
        coef=beta,
        se=se,
        tstat=tstat,
        pvalue=pvalue,
        stars=stars,
        n_obs=n,
        r_squared=r2,
        nw_lags=int(nw_lags),
    )


# ---------------------------------------------------------------------------
# assembled specs
# ---------------------------------------------------------------------------

def build_controls(
    market: pd.DataFrame,
    aggregate_tvl: pd.Series,
    vol_window: int = VOL_WINDOW,
    annualize: bool = True,
    periods_per_year: int = ANNUALIZE_DAYS,
) -> pd.DataFrame:
    """Daily control panel from raw market levels and aggregate TVL.

    ``market`` needs columns (eth_price, btc_price, gas_fee) on a daily date
    index. Returns eth_vol_30d, btc_return, gas_fee, tvl_vol_30d and the
    daily tvl_growth series the forward-volatility targets are built from.
    """
    missing = [c for c in ("eth_price", "btc_price", "gas_fee") if c not in market.columns]
    if missing:
        raise ValidationError(f"market controls file missing columns: {missing}")
    idx = pd.DatetimeIndex(pd.to_datetime(market.index)).normalize()
    market = market.set_axis(idx).sort_index()

    eth_ret = np.log(market["eth_price"].astype(float)).diff()
    btc_ret = np.log(market["btc_price"].astype(float)).diff()
    tvl = aggregate_tvl.sort_index().astype(float)
    growth = np.log(tvl).diff()

    out = pd.DataFrame(
        {
            "eth_vol_30d": realized_vol(eth_ret, vol_window, annualize, periods_per_year),
            "btc_return": btc_ret,
            "gas_fee": market["gas_fee"].astype(float),
        }
    )
    out = out.join(
        pd.DataFrame(
            {
                "tvl_vol_30d": realized_vol(growth, vol_window, annualize, periods_per_year),
                "tvl_growth": growth,
            }
        ),
        how="outer",
    )
    return out


def _sample_at(frame: pd.DataFrame, dates: pd.DatetimeIndex, what: str) -> pd.DataFrame:
    hit = dates.isin(frame.index)
    if not hit.all():
        log.warning("%s: %d of %d window-end dates missing, dropped", what, (~hit).sum(), len(dates))
    return frame.loc[dates[hit]]


def run_risk_regressions(
    cfi: pd.Series,
    controls: pd.DataFrame,
    horizons: tuple[int, ...] = HORIZONS,
    nw_lags: int | None = None,
) -> list[RegressionResult]:
    """Contemporaneous and predictive specs evaluated at window-end dates.

    cfi: standardized index indexed by window-end date. controls: the daily
    frame from build_controls. Rows with any missing regressor are dropped
    and logged. Contemporaneous lag length defaults to floor(4(n/100)^(2/9));
    predictive specs pin 2h.
    """
    missing = [c for c in CONTROL_COLUMNS if c not in controls.columns]
    if missing:
        raise ValidationError(f"controls frame missing columns: {missing}")
    dates = pd.DatetimeIndex(cfi.index)
    panel = _sample_at(controls, dates, "controls").copy()
    panel["cfi"] = cfi.reindex(panel.index)
    results = []

    # (1) does the index proxy short-horizon price risk?
    spec1 = panel[["eth_vol_30d", "cfi", "tvl_vol_30d", "btc_return", "gas_fee"]].dropna()
    if len(spec1) > 6:
        X = spec1[["cfi", "tvl_vol_30d", "btc_return", "gas_fee"]].copy()
        X.insert(0, "const", 1.0)
        results.append(ols_hac(spec1["eth_vol_30d"], X, nw_lags=nw_lags, name="eth_vol"))
    else:
        log.warning("eth_vol spec has too few complete rows, skipped")

    # (2) association with system-wide liquidity instability
    spec2 = panel[["tvl_vol_30d", "cfi", "eth_vol_30d", "gas_fee"]].dropna()
    if len(spec2) > 5:
        X = spec2[["cfi", "eth_vol_30d", "gas_fee"]].copy()
        X.insert(0, "const", 1.0)
        results.append(ols_hac(spec2["tvl_vol_30d"], X, nw_lags=nw_lags, name="tvl_vol"))
    else:
        log.warning("tvl_vol spec has too few complete rows, skipped")

    # predictive: forward vol on the index, lagged forward vol, controls
    if "tvl_growth" not in controls.columns:
        raise ValidationError("controls frame missing column 'tvl_growth' for forward volatility")
    for h in horizons:
        fwd = forward_vol(controls["tvl_growth"].dropna(), h)
        sampled = fwd.reindex(panel.index)
        frame = pd.DataFrame(
            {
                "fwd_vol": sampled,
                "cfi": panel["cfi"],
                "fwd_vol_lag": sampled.shift(1),
                "eth_vol_30d": panel["eth_vol_30d"],
                "btc_return": panel["btc_return"],
                "gas_fee": panel["gas_fee"],
            }
        ).dropna()
        if len(frame) <= 7:
            log.warning("forward-vol spec h=%d has too few complete rows, skipped", h)
            continue
        X = frame[["cfi", "fwd_vol_lag", "eth_vol_30d", "btc_return", "gas_fee"]].copy()
        X.insert(0, "const", 1.0)
        results.append(ols_hac(frame["fwd_vol"], X, nw_lags=2 * h, name=f"fwd_vol_h{h}"))

    return results


def results_frame(results: list[RegressionResult]) -> pd.DataFrame:
    if not results:
        return pd.DataFrame(
            columns=["spec", "term", "coef", "se", "tstat", "pvalue", "stars", "n_obs", "r_squared", "nw_lags"]
        )
    return pd.concat([r.summary_frame() for r in results], ignore_index=True)
