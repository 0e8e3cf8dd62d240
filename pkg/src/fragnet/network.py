"""Correlation networks and the four per-window fragility metrics.

The network is complete and weighted: w_ij = |C_ij| with a zero diagonal.
Metrics per window: average node strength, spectral radius of the weighted
adjacency, density of edges with |C_ij| above a threshold, and normalized
eigenvalue entropy of the correlation spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .covariance import CorrelationMatrix
from .errors import DataError, ValidationError
from .validation import sym_eigvalsh

METRIC_NAMES = ("avg_strength", "lambda_max", "strong_edge_density", "eigen_entropy")
STRONG_EDGE_RHO = 0.3
SPECTRUM_CORRELATION = "CORRELATION"
SPECTRUM_ADJACENCY = "ADJACENCY"

_BOUND_TOL = 1e-9


@dataclass
class NetworkSnapshot:
    adjacency: np.ndarray
    correlation: CorrelationMatrix
    node_names: tuple[str, ...]
    window_end: pd.Timestamp | None = None

    def __post_init__(self):
        A = self.adjacency
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValidationError("adjacency must be square")
        if np.any(np.diag(A) != 0.0):
            raise ValidationError("adjacency diagonal must be exactly zero")
        if np.any(A < 0.0) or np.any(A > 1.0):
            raise ValidationError("adjacency weights must lie in [0, 1]")
        if not np.array_equal(A, A.T):
            raise ValidationError("adjacency must be symmetric")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def node_strength(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


@dataclass
class FragilityMetrics:
    avg_strength: float
    lambda_max: float
    strong_edge_density: float
    eigen_entropy: float
    window_end: pd.Timestamp | None = None
    n_nodes: int = 0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.avg_strength, self.lambda_max, self.strong_edge_density, self.eigen_entropy]
        )


def build_adjacency(C: CorrelationMatrix, window_end=None) -> NetworkSnapshot:
    """w_ij = |C_ij| off the diagonal, w_ii = 0."""
    A = np.abs(C.matrix)
    np.fill_diagonal(A, 0.0)
    return NetworkSnapshot(
        adjacency=A,
        correlation=C,
        node_names=tuple(C.names) if C.names else tuple(f"v{i}" for i in range(C.n)),
        window_end=window_end if window_end is not None else C.window_end,
    )


def _entropy_from_eigs(eigs: np.ndarray, log_n: float | None = None) -> np.ndarray:
    """Normalized spectral entropy for a stack of eigenvalue rows.

    Negative eigenvalues are clipped at zero before normalizing; the caller
    is responsible for rejecting spectra with no positive mass.
    """
    lam = np.clip(eigs, 0.0, None)
    total = lam.sum(axis=-1, keepdims=True)
    if log_n is None:
        log_n = np.log(eigs.shape[-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        p = lam / total
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1) / log_n


def metrics_from_stack(
    C_stack: np.ndarray,
    rho: float = STRONG_EDGE_RHO,
    spectrum_source: str = SPECTRUM_CORRELATION,
    n_override: int | None = None,
) -> np.ndarray:
    """Metric rows for a stack of correlation matrices, shape (m, 4).

    Columns follow METRIC_NAMES. Vectorized across the stack so that
    counterfactual scoring can batch thousands of reduced matrices.
    ``n_override`` substitutes a fixed node count into the normalizations
    (strength and density denominators, entropy log base) while sums and
    spectra still come from the actual matrices; used by the freeze-N
    counterfactual variant.
    """
    C = np.asarray(C_stack, dtype=np.float64)
    if C.ndim == 2:
        C = C[None, :, :]
    m, n, n2 = C.shape
    if n != n2:
        raise ValidationError("correlation stack must be square in its last two axes")
    if n < 2:
        raise ValidationError("metrics need at least 2 nodes")
    if spectrum_source not in (SPECTRUM_CORRELATION, SPECTRUM_ADJACENCY):
        raise ValidationError(f"unknown spectrum source {spectrum_source!r}")
    n_norm = n if n_override is None else int(n_override)
    if n_norm < 2:
        raise ValidationError("node-count override must be >= 2")

    A = np.abs(C)
    idx = np.arange(n)
    A[:, idx, idx] = 0.0

    avg_strength = A.sum(axis=(1, 2)) / n_norm
    lambda_max = sym_eigvalsh(A)[:, -1]
    strong = (A > rho).sum(axis=(1, 2)) / (n_norm * (n_norm - 1))

    if spectrum_source == SPECTRUM_CORRELATION:
        spec = sym_eigvalsh(C)
    else:
        spec = sym_eigvalsh(A)
        mass = np.clip(spec, 0.0, None).sum(axis=-1)
        if np.any(mass <= 0.0):
            raise DataError(
                "adjacency spectrum has no positive eigenvalue mass; entropy undefined"
            )
    entropy = _entropy_from_eigs(spec, log_n=np.log(n_norm))

    return np.column_stack([avg_strength, lambda_max, strong, entropy])


def compute_metrics(
    net: NetworkSnapshot,
    rho: float = STRONG_EDGE_RHO,
    spectrum_source: str = SPECTRUM_CORRELATION,
) -> FragilityMetrics:
    row = metrics_from_stack(net.correlation.matrix[None, :, :], rho, spectrum_source)[0]
    s_bar, lam_max, density, entropy = (float(v) for v in row)

    # spectral sanity: Perron bounds and the uniform-vector Rayleigh quotient
    rowsums = net.adjacency.sum(axis=1)
    n = net.n
    assert lam_max >= rowsums.max() / n - _BOUND_TOL
    assert lam_max <= rowsums.max() + _BOUND_TOL
    assert lam_max >= rowsums.sum() / n - _BOUND_TOL
    assert -_BOUND_TOL <= density <= 1.0 + _BOUND_TOL
    assert -1e-9 <= entropy <= 1.0 + 1e-9

    return FragilityMetrics(
        avg_strength=s_bar,
        lambda_max=lam_max,
        strong_edge_density=min(max(density, 0.0), 1.0),
        eigen_entropy=min(max(entropy, 0.0), 1.0),
        window_end=net.window_end,
        n_nodes=n,
    )


def threshold_network(net: NetworkSnapshot, rho: float) -> NetworkSnapshot:
    """Zero out edges with |C_ij| <= rho; nodes are kept."""
    if not 0.0 <= rho < 1.0:
        raise ValidationError(f"threshold must lie in [0, 1), got {rho}")
    A = np.where(np.abs(net.correlation.matrix) > rho, net.adjacency, 0.0)
    np.fill_diagonal(A, 0.0)
    return NetworkSnapshot(
        adjacency=A,
        correlation=net.correlation,
        node_names=net.node_names,
        window_end=net.window_end,
    )


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def metrics_frame(series: list[FragilityMetrics]) -> pd.DataFrame:
    rows = [
        {
            "window_end": m.window_end.strftime("%Y-%m-%d") if m.window_end is not None else "",
            "n_nodes": m.n_nodes,
            "avg_strength": m.avg_strength,
            "lambda_max": m.lambda_max,
            "strong_edge_density": m.strong_edge_density,
            "eigen_entropy": m.eigen_entropy,
        }
        for m in series
    ]
    return pd.DataFrame(rows, columns=["window_end", "n_nodes", *METRIC_NAMES])


def edge_list(net: NetworkSnapshot) -> pd.DataFrame:
    """Upper-triangle edge list: source, target, signed correlation, weight."""
    C = net.correlation.matrix
    rows = []
    for i in range(net.n):
        for j in range(i + 1, net.n):
            if net.adjacency[i, j] > 0.0:
                rows.append(
                    {
                        "source": net.node_names[i],
                        "target": net.node_names[j],
                        "signed_correlation": C[i, j],
                        "abs_weight": net.adjacency[i, j],
                    }
                )
    return pd.DataFrame(rows, columns=["source", "target", "signed_correlation", "abs_weight"])


def node_list(net: NetworkSnapshot, tvl: dict[str, float] | None = None) -> pd.DataFrame:
    strength = net.node_strength()
    rows = [
        {
            "name": name,
            "strength": float(strength[i]),
            "tvl": float(tvl.get(name, np.nan)) if tvl else np.nan,
        }
        for i, name in enumerate(net.node_names)
    ]
    return pd.DataFrame(rows, columns=["name", "strength", "tvl"])
