"""Dependence estimators for a window of returns.

Four routes: sample covariance (divisor T), Ledoit-Wolf shrinkage toward a
scaled identity, Pearson correlation, and an L1-penalized sparse precision
estimate (graphical lasso, block coordinate descent) yielding partial
correlations for robustness checks.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numba import njit

from .errors import ConvergenceError, DataError, ValidationError
from .validation import as_float_2d, check_correlation_matrix, check_symmetric, check_window_block

log = logging.getLogger(__name__)

SAMPLE = "SAMPLE"
LEDOIT_WOLF = "LEDOIT_WOLF"
SHRINKAGE = "SHRINKAGE"
PEARSON = "PEARSON"
GLASSO_PARTIAL = "GLASSO_PARTIAL"

GLASSO_PENALTY = 0.05
GLASSO_TOL = 1e-4
GLASSO_MAX_SWEEPS = 200


@dataclass
class CovarianceEstimate:
    matrix: np.ndarray
    estimator: str
    shrinkage_intensity: float | None = None
    target_scale: float | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.matrix = as_float_2d(self.matrix, "covariance matrix")
        check_symmetric(self.matrix, what="covariance matrix")
        if np.any(np.diag(self.matrix) < 0):
            raise ValidationError("covariance matrix has a negative diagonal entry")
        if self.estimator not in (SAMPLE, LEDOIT_WOLF):
            raise ValidationError(f"unknown covariance estimator {self.estimator!r}")
        if self.estimator == LEDOIT_WOLF:
            lam = self.shrinkage_intensity
            if lam is None or not 0.0 <= lam <= 1.0:
                raise ValidationError(f"shrinkage intensity {lam} outside [0, 1]")


@dataclass
class CorrelationMatrix:
    matrix: np.ndarray
    source: str
    window_end: pd.Timestamp | None = None
    names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = as_float_2d(self.matrix, "correlation matrix")
        if self.source not in (SHRINKAGE, PEARSON, GLASSO_PARTIAL):
            raise ValidationError(f"unknown correlation source {self.source!r}")
        check_correlation_matrix(self.matrix, require_psd=(self.source == SHRINKAGE))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


# ---------------------------------------------------------------------------
# covariance and correlation
# ---------------------------------------------------------------------------

def _demean(window: np.ndarray) -> np.ndarray:
    return window - window.mean(axis=0, keepdims=True)


def sample_covariance(window, names: tuple[str, ...] = ()) -> CovarianceEstimate:
    """(1/T) X'X on demeaned X; divisor T to match the shrinkage convention."""
    X = check_window_block(as_float_2d(window, "return window"), min_rows=2)
    Xc = _demean(X)
    T = Xc.shape[0]
    S = Xc.T @ Xc / T
    S = 0.5 * (S + S.T)
    return CovarianceEstimate(matrix=S, estimator=SAMPLE, names=tuple(names))


def ledoit_wolf(window, names: tuple[str, ...] = ()) -> CovarianceEstimate:
    """Shrink the sample covariance toward mu*I with analytically chosen weight.

    mu is the average sample variance. The intensity is the ratio of the
    average squared Frobenius deviation of per-observation outer products
    from S, divided once more by T, to the squared Frobenius distance
    between S and the target, clamped to [0, 1].
    """
    X = check_window_block(as_float_2d(window, "return window"), min_rows=2)
    Xc = _demean(X)
    T, N = Xc.shape
    S = Xc.T @ Xc / T
    S = 0.5 * (S + S.T)
    mu = float(np.trace(S)) / N

    if N == 1:
        log.warning("single-column window: shrinkage intensity forced to 0")
        lam = 0.0
    else:
        d2 = float(np.sum((S - mu * np.eye(N)) ** 2))
        # sum_t ||x_t x_t' - S||_F^2 collapses to sum_t (x_t'x_t)^2 - T ||S||_F^2
        sq_norms = np.sum(Xc * Xc, axis=1)
        b2_bar = (float(np.sum(sq_norms ** 2)) - T * float(np.sum(S ** 2))) / (T * T)
        if d2 == 0.0:
            lam = 1.0 if b2_bar > 0.0 else 0.0  # S already equals the target
        else:
            lam = min(max(b2_bar / d2, 0.0), 1.0)

    sigma = (1.0 - lam) * S + lam * mu * np.eye(N)
    return CovarianceEstimate(
        matrix=sigma,
        estimator=LEDOIT_WOLF,
        shrinkage_intensity=lam,
        target_scale=mu,
        names=tuple(names),
    )


def to_correlation(
    cov: CovarianceEstimate,
    window_end=None,
    source: str | None = None,
) -> CorrelationMatrix:
    """C_ij = Sigma_ij / sqrt(Sigma_ii Sigma_jj), clamped to [-1, 1]."""
    d = np.diag(cov.matrix)
    if np.any(d <= 0):
        idx = int(np.argmax(d <= 0))
        name = cov.names[idx] if cov.names else f"column {idx}"
        raise DataError(f"degenerate variance for {name}: cannot form correlations")
    scale = 1.0 / np.sqrt(d)
    C = cov.matrix * np.outer(scale, scale)
    np.clip(C, -1.0, 1.0, out=C)
    np.fill_diagonal(C, 1.0)
    C = 0.5 * (C + C.T)
    if source is None:
        source = SHRINKAGE if cov.estimator == LEDOIT_WOLF else PEARSON
    meta = {}
    if cov.estimator == LEDOIT_WOLF:
        meta = {"shrinkage_intensity": cov.shrinkage_intensity, "target_scale": cov.target_scale}
    return CorrelationMatrix(
        matrix=C, source=source, window_end=window_end, names=cov.names, meta=meta
    )


def shrinkage_correlation(window, names=(), window_end=None) -> CorrelationMatrix:
    return to_correlation(ledoit_wolf(window, names=names), window_end=window_end)


def pearson_correlation(window, names=(), window_end=None) -> CorrelationMatrix:
    return to_correlation(
        sample_covariance(window, names=names), window_end=window_end, source=PEARSON
    )


# ---------------------------------------------------------------------------
# graphical lasso
# ---------------------------------------------------------------------------

@njit(cache=True)
def _glasso_sweeps(S, W, Theta, alpha, tol, inner_tol, max_sweeps, max_inner):
    """Block coordinate descent over columns; returns (n_sweeps, gap, status).

    status 0 = converged, 1 = sweep budget exhausted, 2 = lost finiteness.
    W and Theta are updated in place. Per column the lasso subproblem
    min 0.5 b'W11 b - s12'b + alpha|b|_1 is solved by coordinate descent on
    the gram system, warm-started from the current precision column.
    """
    p = S.shape[0]
    m = p - 1
    others = np.empty(m, dtype=np.int64)
    W11 = np.empty((m, m))
    s12 = np.empty(m)
    beta = np.empty(m)
    h = np.empty(m)
    gap = np.inf

    for sweep in range(max_sweeps):
        for idx in range(p):
            k = 0
            for j in range(p):
                if j != idx:
                    others[k] = j
                    k += 1
            for a in range(m):
                oa = others[a]
                s12[a] = S[idx, oa]
                beta[a] = -Theta[oa, idx] / Theta[idx, idx]
                for b in range(m):
                    W11[a, b] = W[oa, others[b]]

            # h = W11 @ beta, maintained incrementally
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc += W11[a, b] * beta[b]
                h[a] = acc

            for _ in range(max_inner):
                delta_max = 0.0
                w_max = 0.0
                for a in range(m):
                    old = beta[a]
                    qaa = W11[a, a]
                    if qaa <= 0.0:
                        continue
                    resid = s12[a] - (h[a] - qaa * old)
                    if resid > alpha:
                        new = (resid - alpha) / qaa
                    elif resid < -alpha:
                        new = (resid + alpha) / qaa
                    else:
                        new = 0.0
                    if new != old:
                        diff = new - old
                        for b in range(m):
                            h[b] += W11[b, a] * diff
                        beta[a] = new
                        if abs(diff) > delta_max:
                            delta_max = abs(diff)
                    if abs(beta[a]) > w_max:
                        w_max = abs(beta[a])
                if delta_max <= inner_tol * max(w_max, 1.0):
                    break

            # write back: w12 = W11 beta; theta22 = 1/(w22 - w12'beta)
            dot = 0.0
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc += W11[a, b] * beta[b]
                h[a] = acc
                dot += acc * beta[a]
            denom = W[idx, idx] - dot
            if denom <= 0.0 or not np.isfinite(denom):
                return sweep + 1, gap, 2
            t22 = 1.0 / denom
            Theta[idx, idx] = t22
            for a in range(m):
                oa = others[a]
                W[idx, oa] = h[a]
                W[oa, idx] = h[a]
                Theta[oa, idx] = -t22 * beta[a]
                Theta[idx, oa] = -t22 * beta[a]

        # duality gap: sum(S*Theta) - p + alpha * offdiag l1 norm of Theta
        acc = 0.0
        l1 = 0.0
        finite = True
        for a in range(p):
            for b in range(p):
                v = Theta[a, b]
                if not np.isfinite(v):
                    finite = False
                acc += S[a, b] * v
                if a != b:
                    l1 += abs(v)
        if not finite:
            return sweep + 1, gap, 2
        gap = acc - p + alpha * l1
        if abs(gap) < tol:
            return sweep + 1, gap, 0

    return max_sweeps, gap, 1


def graphical_lasso(
    S: np.ndarray,
    alpha: float,
    tol: float = GLASSO_TOL,
    max_sweeps: int = GLASSO_MAX_SWEEPS,
    inner_tol: float = 1e-7,
    max_inner: int = 1000,
) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Solve the L1-penalized precision problem for covariance S.

    Returns (covariance, precision, n_sweeps, dual_gap). alpha == 0 falls
    back to the plain inverse. Diagonal entries are unpenalized.
    """
    S = as_float_2d(S, "input covariance")
    check_symmetric(S, what="input covariance")
    p = S.shape[0]
    if alpha < 0:
        raise ValidationError(f"glasso penalty must be nonnegative, got {alpha}")
    if alpha == 0.0:
        Theta = np.linalg.pinv(S, hermitian=True)
        return S.copy(), Theta, 0, 0.0

    W = S.copy()
    W *= 0.95  # damp off-diagonals of the starting point
    np.fill_diagonal(W, np.diag(S))
    Theta = np.linalg.pinv(W, hermitian=True)

    n_sweeps, gap, status = _glasso_sweeps(
        S, W, Theta, float(alpha), float(tol), float(inner_tol), int(max_sweeps), int(max_inner)
    )
    if status == 2:
        raise ConvergenceError(
            "graphical lasso lost positive definiteness (ill-conditioned input)",
            dual_gap=float(gap) if np.isfinite(gap) else None,
            n_iter=n_sweeps,
        )
    if status == 1:
        raise ConvergenceError(
            f"graphical lasso did not converge in {max_sweeps} sweeps",
            dual_gap=float(gap),
            n_iter=n_sweeps,
        )
    return W, Theta, n_sweeps, float(gap)


def glasso_partial_correlation(
    window,
    penalty: float = GLASSO_PENALTY,
    names: tuple[str, ...] = (),
    window_end=None,
    tol: float = GLASSO_TOL,
    max_sweeps: int = GLASSO_MAX_SWEEPS,
) -> CorrelationMatrix:
    """Partial correlations P_ij = -Theta_ij / sqrt(Theta_ii Theta_jj).

    The window is standardized internally, so the glasso input is the sample
    correlation matrix and the penalty is scale-free.
    """
    if penalty <= 0:
        raise ValidationError(f"glasso penalty must be positive, got {penalty}")
    R = pearson_correlation(window, names=names).matrix
    _, Theta, n_sweeps, gap = graphical_lasso(R, penalty, tol=tol, max_sweeps=max_sweeps)

    d = np.diag(Theta)
    if np.any(d <= 0):
        raise ConvergenceError("precision matrix has a nonpositive diagonal entry")
    scale = 1.0 / np.sqrt(d)
    P = -Theta * np.outer(scale, scale)
    np.clip(P, -1.0, 1.0, out=P)
    np.fill_diagonal(P, 1.0)
    P = 0.5 * (P + P.T)
    return CorrelationMatrix(
        matrix=P,
        source=GLASSO_PARTIAL,
        window_end=window_end,
        names=tuple(names),
        meta={"penalty": penalty, "n_sweeps": n_sweeps, "dual_gap": gap},
    )


# ---------------------------------------------------------------------------
# matrix dump format (square CSV, full precision, named header row/column)
# ---------------------------------------------------------------------------

def save_matrix_csv(matrix: np.ndarray, names: tuple[str, ...], path) -> None:
    names = tuple(names) if names else tuple(f"v{i}" for i in range(matrix.shape[0]))
    frame = pd.DataFrame(matrix, index=list(names), columns=list(names))
    buf = io.StringIO()
    frame.to_csv(buf, float_format="%.17g", index_label="name", lineterminator="\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def load_matrix_csv(path) -> tuple[np.ndarray, tuple[str, ...]]:
    frame = pd.read_csv(path, index_col=0)
    if list(frame.index) != list(frame.columns):
        raise DataError(f"{path}: matrix row and column names disagree")
    return frame.to_numpy(dtype=np.float64), tuple(str(c) for c in frame.columns)


# ---------------------------------------------------------------------------
# estimator-style wrappers
# ---------------------------------------------------------------------------

from sklearn.base import BaseEstimator  # noqa: E402


class LedoitWolfShrinkage(BaseEstimator):
    """Shrinkage covariance with identity target, estimator-style interface.

    After ``fit``: ``covariance_``, ``correlation_``, ``shrinkage_``,
    ``target_scale_``.
    """

    def fit(self, X, y=None):
        est = ledoit_wolf(X)
        self.covariance_ = est.matrix
        self.shrinkage_ = est.shrinkage_intensity
        self.target_scale_ = est.target_scale
        self.correlation_ = to_correlation(est).matrix
        self.n_features_in_ = est.matrix.shape[0]
        return self


class GraphicalLassoPartial(BaseEstimator):
    """Sparse partial correlations via the graphical lasso.

    Parameters mirror the functional route; after ``fit``: ``precision_``,
    ``covariance_``, ``partial_correlation_``, ``n_iter_``, ``dual_gap_``.
    """

    def __init__(self, penalty: float = GLASSO_PENALTY, tol: float = GLASSO_TOL,
                 max_sweeps: int = GLASSO_MAX_SWEEPS):
        self.penalty = penalty
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, y=None):
        R = pearson_correlation(X).matrix
        W, Theta, n_sweeps, gap = graphical_lasso(
            R, self.penalty, tol=self.tol, max_sweeps=self.max_sweeps
        )
        self.covariance_ = W
        self.precision_ = Theta
        d = np.diag(Theta)
        scale = 1.0 / np.sqrt(d)
        P = -Theta * np.outer(scale, scale)
        np.clip(P, -1.0, 1.0, out=P)
        np.fill_diagonal(P, 1.0)
        self.partial_correlation_ = 0.5 * (P + P.T)
        self.n_iter_ = n_sweeps
        self.dual_gap_ = gap
        self.n_features_in_ = R.shape[0]
        return self
