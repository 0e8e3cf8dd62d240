"""Composite fragility index: standardize the four metrics, take PC1, freeze.

The index is the first principal component of the standardized metric panel,
oriented so the average-strength loading is positive, then standardized to
zero mean and unit variance over the fitting sample. The frozen mapping
(means, stds, loading, output stats) is what counterfactual scoring reuses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DataError, SnapshotError, ValidationError
from .network import METRIC_NAMES, SPECTRUM_CORRELATION, STRONG_EDGE_RHO, FragilityMetrics

MODEL_SCHEMA = "fragnet-cfi-model/1"
MIN_FIT_WINDOWS = 8
EIGENGAP_TOL = 1e-12


@dataclass
class CfiModel:
    metric_means: np.ndarray      # (4,)
    metric_stds: np.ndarray       # (4,)
    loading: np.ndarray           # (4,) unit norm, orientation applied
    orientation: int              # +1 or -1, the flip applied to the raw eigenvector
    pc1_variance_share: float
    output_mean: float
    output_std: float
    n_windows: int
    rho: float = STRONG_EDGE_RHO
    spectrum_source: str = SPECTRUM_CORRELATION

    def __post_init__(self):
        self.metric_means = np.asarray(self.metric_means, dtype=np.float64)
        self.metric_stds = np.asarray(self.metric_stds, dtype=np.float64)
        self.loading = np.asarray(self.loading, dtype=np.float64)
        for arr, what in (
            (self.metric_means, "means"),
            (self.metric_stds, "stds"),
            (self.loading, "loading"),
        ):
            if arr.shape != (4,):
                raise ValidationError(f"model {what} must have shape (4,), got {arr.shape}")
        if np.any(self.metric_stds <= 0):
            raise ValidationError("model stds must be strictly positive")
        if abs(float(np.linalg.norm(self.loading)) - 1.0) > 1e-10:
            raise ValidationError("loading vector must have unit norm")
        if self.output_std <= 0:
            raise ValidationError("output std must be strictly positive")


def _metric_matrix(metric_series) -> np.ndarray:
    if isinstance(metric_series, np.ndarray):
        X = np.asarray(metric_series, dtype=np.float64)
    else:
        X = np.array([m.as_array() for m in metric_series], dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 4:
        raise ValidationError(f"metric matrix must be (n, 4), got {X.shape}")
    return X


def fit_cfi_model(
    metric_series,
    rho: float = STRONG_EDGE_RHO,
    spectrum_source: str = SPECTRUM_CORRELATION,
) -> CfiModel:
    """Fit the frozen index mapping from a window-by-metric panel.

    Standardization uses full-sample population moments; the 4x4
    eigendecomposition needs a clear top eigenvalue (gap >= 1e-12), and the
    sign is fixed on the average-strength loading, falling back to the
    spectral-radius loading when that one is exactly zero.
    """
    X = _metric_matrix(metric_series)
    m = X.shape[0]
    if m < MIN_FIT_WINDOWS:
        raise ValidationError(f"need at least {MIN_FIT_WINDOWS} windows to fit, got {m}")

    means = X.mean(axis=0)
    stds = X.std(axis=0, ddof=0)
    for k, s in enumerate(stds):
        if s == 0.0:
            raise DataError(f"metric {METRIC_NAMES[k]!r} has zero variance over the sample")

    Z = (X - means) / stds
    cov = Z.T @ Z / m
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[-1] - eigvals[-2] < EIGENGAP_TOL:
        raise DataError(
            f"top two components are degenerate (eigengap {eigvals[-1] - eigvals[-2]:.3e}); "
            "the first component is not identified"
        )
    w1 = eigvecs[:, -1]
    orientation = 1
    if w1[0] < 0.0 or (w1[0] == 0.0 and w1[1] < 0.0):
        w1 = -w1
        orientation = -1

    share = float(eigvals[-1] / eigvals.sum())
    scores = Z @ w1
    out_mean = float(scores.mean())
    out_std = float(scores.std(ddof=0))
    if out_std == 0.0:
        raise DataError("index scores are constant over the fitting sample")

    return CfiModel(
        metric_means=means,
        metric_stds=stds,
        loading=w1,
        orientation=orientation,
        pc1_variance_share=share,
        output_mean=out_mean,
        output_std=out_std,
        n_windows=m,
        rho=rho,
        spectrum_source=spectrum_source,
    )


def apply_cfi_model(model: CfiModel, metrics) -> tuple[float, float]:
    """Map one metric vector through the frozen model -> (raw, standardized)."""
    x = metrics.as_array() if isinstance(metrics, FragilityMetrics) else np.asarray(metrics)
    raw = float(model.loading @ ((x - model.metric_means) / model.metric_stds))
    return raw, (raw - model.output_mean) / model.output_std


def apply_cfi_model_stack(model: CfiModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized apply over an (m, 4) metric matrix."""
    X = _metric_matrix(X)
    raw = ((X - model.metric_means) / model.metric_stds) @ model.loading
    return raw, (raw - model.output_mean) / model.output_std


def build_cfi_series(metric_series: list[FragilityMetrics], model: CfiModel) -> pd.DataFrame:
    """Per-window series: standardized and raw index next to the raw metrics."""
    X = _metric_matrix(metric_series)
    raw, std = apply_cfi_model_stack(model, X)
    frame = pd.DataFrame(
        {
            "window_end": [m.window_end for m in metric_series],
            "cfi": std,
            "cfi_raw": raw,
            **{name: X[:, k] for k, name in enumerate(METRIC_NAMES)},
        }
    )
    return frame


def expanding_cfi(
    metric_series: list[FragilityMetrics],
    min_windows: int = MIN_FIT_WINDOWS,
    rho: float = STRONG_EDGE_RHO,
    spectrum_source: str = SPECTRUM_CORRELATION,
) -> pd.DataFrame:
    """Real-time diagnostic: refit on history up to each window, score it.

    Slower and not the published construction; useful for checking how much
    the frozen full-sample mapping differs from an expanding one.
    """
    X = _metric_matrix(metric_series)
    rows = []
    for k in range(min_windows, X.shape[0] + 1):
        model = fit_cfi_model(X[:k], rho=rho, spectrum_source=spectrum_source)
        raw, std = apply_cfi_model(model, X[k - 1])
        rows.append(
            {
                "window_end": metric_series[k - 1].window_end,
                "cfi_expanding": std,
                "cfi_raw_expanding": raw,
                "n_fit_windows": k,
            }
        )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# model file
# ---------------------------------------------------------------------------

def save_model(model: CfiModel, path) -> None:
    payload = asdict(model)
    payload["schema"] = MODEL_SCHEMA
    for key in ("metric_means", "metric_stds", "loading"):
        payload[key] = [float(v) for v in payload[key]]
    payload["metric_names"] = list(METRIC_NAMES)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> CfiModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"cannot read model file {path}: {exc}") from exc
    schema = payload.pop("schema", None)
    if schema != MODEL_SCHEMA:
        raise SnapshotError(
            f"{path}: schema version mismatch: found {schema!r}, expected {MODEL_SCHEMA!r}"
        )
    payload.pop("metric_names", None)
    try:
        return CfiModel(**payload)
    except TypeError as exc:
        raise SnapshotError(f"{path}: malformed model file: {exc}") from exc


class FragilityIndex(BaseEstimator, TransformerMixin):
    """Estimator-style wrapper around the frozen-index fit/apply pair.

    ``fit`` takes the (n_windows, 4) raw metric matrix; ``transform`` maps
    metric rows to standardized index values under the frozen model.
    """

    def __init__(self, rho: float = STRONG_EDGE_RHO,
                 spectrum_source: str = SPECTRUM_CORRELATION):
        self.rho = rho
        self.spectrum_source = spectrum_source

    def fit(self, X, y=None):
        self.model_ = fit_cfi_model(X, rho=self.rho, spectrum_source=self.spectrum_source)
        self.loadings_ = self.model_.loading
        self.variance_share_ = self.model_.pc1_variance_share
        self.n_features_in_ = 4
        return self

    def transform(self, X):
        _, std = apply_cfi_model_stack(self.model_, X)
        return std
