"""Leave-one-out risk contributions under the frozen index mapping.

For each window, every node is removed in turn, the four metrics are
recomputed on the reduced network, and the frozen model maps them to a
counterfactual index value. The node's contribution is the drop:
rcs_i = cfi_full - cfi_without_i. Positive means removal lowers fragility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .covariance import CorrelationMatrix
from .errors import ValidationError
from .fragility import CfiModel, apply_cfi_model, apply_cfi_model_stack
from .network import NetworkSnapshot, build_adjacency, metrics_from_stack
from .panel import CategoryPanel

RCS_EPS = 1e-8
TOP_RANK = 10


@dataclass
class RcsNode:
    category: str
    cfi_without: float
    rcs: float
    rcs_rel: float


@dataclass
class RcsWindow:
    window_end: pd.Timestamp | None
    cfi_full: float        # raw units of the frozen mapping
    cfi_full_std: float    # output-standardized companion
    nodes: list[RcsNode]

    def rcs_by_category(self) -> dict[str, float]:
        return {n.category: n.rcs for n in self.nodes}


def remove_node(net: NetworkSnapshot, category: str) -> NetworkSnapshot:
    """Delete one node's row and column from both A and C."""
    if category not in net.node_names:
        raise ValidationError(f"unknown category {category!r}")
    i = net.node_names.index(category)
    keep = [j for j in range(net.n) if j != i]
    sub = net.correlation.matrix[np.ix_(keep, keep)]
    C = CorrelationMatrix(
        matrix=sub,
        source=net.correlation.source,
        window_end=net.correlation.window_end,
        names=tuple(net.node_names[j] for j in keep),
        meta=dict(net.correlation.meta),
    )
    return build_adjacency(C, window_end=net.window_end)


def reduced_correlation_stack(C: np.ndarray) -> np.ndarray:
    """All N leave-one-out submatrices of C, shape (N, N-1, N-1).

    Row i is C with node i's row and column deleted; one fancy-indexing
    gather instead of N explicit rebuilds.
    """
    n = C.shape[0]
    if n < 3:
        raise ValidationError("need at least 3 nodes to form 2-node counterfactuals")
    keep = np.array([[j for j in range(n) if j != i] for i in range(n)])
    return C[keep[:, :, None], keep[:, None, :]]


def cfi_counterfactual(
    model: CfiModel,
    net_minus_i: NetworkSnapshot,
    rho: float | None = None,
    spectrum_source: str | None = None,
    n_override: int | None = None,
) -> float:
    """Raw index value of an already-reduced network under the frozen model."""
    row = metrics_from_stack(
        net_minus_i.correlation.matrix[None, :, :],
        rho=model.rho if rho is None else rho,
        spectrum_source=model.spectrum_source if spectrum_source is None else spectrum_source,
        n_override=n_override,
    )[0]
    raw, _ = apply_cfi_model(model, row)
    return raw


def counterfactual_scores(
    model: CfiModel,
    C: np.ndarray,
    freeze_n: bool = False,
) -> np.ndarray:
    """Raw counterfactual index per removed node, shape (N,).

    ``freeze_n=True`` keeps the original node count in the metric
    normalizations; the default renormalizes with N-1.
    """
    n = C.shape[0]
    stack = reduced_correlation_stack(C)
    X = metrics_from_stack(
        stack,
        rho=model.rho,
        spectrum_source=model.spectrum_source,
        n_override=n if freeze_n else None,
    )
    raw, _ = apply_cfi_model_stack(model, X)
    return raw


def rcs_window(
    model: CfiModel,
    net: NetworkSnapshot,
    eps: float = RCS_EPS,
    freeze_n: bool = False,
) -> RcsWindow:
    """Leave-one-out contributions of every node in one window's network."""
    full_row = metrics_from_stack(
        net.correlation.matrix[None, :, :], rho=model.rho, spectrum_source=model.spectrum_source
    )[0]
    cfi_full, cfi_full_std = apply_cfi_model(model, full_row)

    without = counterfactual_scores(model, net.correlation.matrix, freeze_n=freeze_n)
    denom = abs(cfi_full) + eps
    nodes = [
        RcsNode(
            category=name,
            cfi_without=float(without[i]),
            rcs=float(cfi_full - without[i]),
            rcs_rel=float((cfi_full - without[i]) / denom),
        )
        for i, name in enumerate(net.node_names)
    ]
    return RcsWindow(
        window_end=net.window_end, cfi_full=cfi_full, cfi_full_std=cfi_full_std, nodes=nodes
    )


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def _rank_desc(values: pd.Series) -> pd.Series:
    """Dense 1..N ranks, largest first, ties broken by category name."""
    order = sorted(values.index, key=lambda c: (-values[c], c))
    return pd.Series({c: r + 1 for r, c in enumerate(order)}, dtype=int)


def rcs_frame(windows: list[RcsWindow]) -> pd.DataFrame:
    """Long per-window table matching the on-disk per-window layout."""
    rows = []
    for w in windows:
        stamp = w.window_end.strftime("%Y-%m-%d") if w.window_end is not None else ""
        for n in w.nodes:
            rows.append(
                {
                    "window_end": stamp,
                    "category": n.category,
                    "cfi_full": w.cfi_full,
                    "cfi_without": n.cfi_without,
                    "rcs": n.rcs,
                    "rcs_rel": n.rcs_rel,
                }
            )
    return pd.DataFrame(
        rows, columns=["window_end", "category", "cfi_full", "cfi_without", "rcs", "rcs_rel"]
    )


def aggregate_rcs(
    windows: list[RcsWindow],
    tvl_panel: CategoryPanel | None = None,
    high_quantile: float = 0.75,
    top_rank: int = TOP_RANK,
) -> pd.DataFrame:
    """Time-averaged contributions, high-fragility averages, and rank table.

    The high-fragility set keeps windows whose standardized index value sits
    at or above its ``high_quantile`` empirical quantile. Categories absent
    from some windows (dropped mid-sample) are averaged where present and
    flagged via ``n_windows_present``.
    """
    if not windows:
        raise ValidationError("need at least one window to aggregate")
    if not 0.0 <= high_quantile < 1.0:
        raise ValidationError(f"high quantile must lie in [0, 1), got {high_quantile}")

    wide = pd.DataFrame(
        [w.rcs_by_category() for w in windows],
        index=[w.window_end for w in windows],
    )
    cfi_std = np.array([w.cfi_full_std for w in windows])
    q = np.quantile(cfi_std, high_quantile)
    high_mask = cfi_std >= q
    if not high_mask.any():
        raise ValidationError("high-fragility window set is empty")

    mean_rcs = wide.mean(axis=0)
    mean_rcs_high = wide.loc[high_mask].mean(axis=0)
    present = wide.notna().sum(axis=0)

    k = min(top_rank, wide.shape[1])
    top_hits = pd.Series(0, index=wide.columns, dtype=float)
    for _, row in wide.iterrows():
        ranked = sorted(row.dropna().index, key=lambda c: (-row[c], c))[:k]
        top_hits[ranked] += 1.0
    top_freq = top_hits / len(windows)

    out = pd.DataFrame(
        {
            "category": wide.columns,
            "mean_rcs": mean_rcs.values,
            "mean_rcs_high": mean_rcs_high.values,
            "rank_rcs": _rank_desc(mean_rcs).reindex(wide.columns).values,
            "rank_rcs_high": _rank_desc(mean_rcs_high).reindex(wide.columns).values,
            "top10_frequency": top_freq.values,
            "n_windows_present": present.values,
        }
    )

    if tvl_panel is not None:
        mean_tvl = tvl_panel.frame.mean(axis=0)
        common = [c for c in wide.columns if c in mean_tvl.index]
        ranks = _rank_desc(mean_tvl[common])
        out["rank_tvl"] = [int(ranks[c]) if c in ranks.index else -1 for c in wide.columns]
    else:
        out["rank_tvl"] = -1

    cols = [
        "category",
        "rank_rcs",
        "rank_tvl",
        "rank_rcs_high",
        "mean_rcs",
        "mean_rcs_high",
        "top10_frequency",
        "n_windows_present",
    ]
    return out[cols].sort_values("rank_rcs").reset_index(drop=True)
