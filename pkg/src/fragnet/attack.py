"""De-risking experiments: remove k nodes per strategy, measure the index drop.

Strategies: top-k by the window's own leave-one-out contributions, top-k by
node strength, and uniform random k-subsets (Monte Carlo). Removal is
simultaneous: one counterfactual network per run, metrics recomputed at the
reduced node count, frozen model applied.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ValidationError
from .fragility import CfiModel, apply_cfi_model, apply_cfi_model_stack
from .network import NetworkSnapshot, metrics_from_stack
from .contribution import RcsWindow, rcs_window

log = logging.getLogger(__name__)

TARGETED_RCS = "TARGETED_RCS"
STRENGTH = "STRENGTH"
RANDOM = "RANDOM"
STRATEGIES = (TARGETED_RCS, STRENGTH, RANDOM)

K_GRID = (1, 3, 5, 10)
MC_DRAWS = 200
BAND = (2.5, 97.5)

REGIME_ALL = "ALL"
REGIME_HIGH = "HIGH"
REGIME_LOW = "LOW"


@dataclass
class AttackRun:
    window_end: pd.Timestamp | None
    k: int
    strategy: str
    removed: tuple[str, ...]
    cfi_full: float
    cfi_after: float
    delta: float
    mc_seed: int | None = None
    draw_index: int | None = None


def derive_seed(master_seed: int, window_end, strategy: str, k: int, draw: int) -> int:
    """Stable per-task seed: sha256 over the task coordinates.

    Execution order and platform hash randomization cannot change it.
    """
    stamp = window_end.isoformat() if window_end is not None else "none"
    key = f"{master_seed}|{stamp}|{strategy}|{k}|{draw}"
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")


def _full_cfi(model: CfiModel, net: NetworkSnapshot) -> float:
    row = metrics_from_stack(
        net.correlation.matrix[None, :, :], rho=model.rho, spectrum_source=model.spectrum_source
    )[0]
    raw, _ = apply_cfi_model(model, row)
    return raw


def _score_removal_sets(
    model: CfiModel,
    C: np.ndarray,
    removal_sets: np.ndarray,
    freeze_n: bool = False,
) -> np.ndarray:
    """Raw index after deleting each row of ``removal_sets`` (m, k) at once."""
    n = C.shape[0]
    m, k = removal_sets.shape
    keep = np.empty((m, n - k), dtype=np.int64)
    for r in range(m):
        mask = np.ones(n, dtype=bool)
        mask[removal_sets[r]] = False
        keep[r] = np.nonzero(mask)[0]
    stack = C[keep[:, :, None], keep[:, None, :]]
    X = metrics_from_stack(
        stack,
        rho=model.rho,
        spectrum_source=model.spectrum_source,
        n_override=n if freeze_n else None,
    )
    raw, _ = apply_cfi_model_stack(model, X)
    return raw


def remove_k_and_score(
    model: CfiModel,
    net: NetworkSnapshot,
    categories: list[str] | tuple[str, ...],
    freeze_n: bool = False,
) -> tuple[float, float]:
    """Delete the named nodes simultaneously -> (cfi_after, delta)."""
    cfi_full = _full_cfi(model, net)
    if len(categories) == 0:
        return cfi_full, 0.0
    if len(set(categories)) != len(categories):
        raise ValidationError("removal list contains duplicates")
    n = net.n
    if len(categories) > n - 2:
        raise ValidationError(f"cannot remove {len(categories)} of {n} nodes, need 2 left")
    try:
        idx = np.array([net.node_names.index(c) for c in categories], dtype=np.int64)
    except ValueError:
        unknown = [c for c in categories if c not in net.node_names]
        raise ValidationError(f"unknown categories {unknown}") from None
    cfi_after = float(_score_removal_sets(model, net.correlation.matrix, idx[None, :], freeze_n)[0])
    return cfi_after, cfi_full - cfi_after


def _top_k(scores: np.ndarray, names: tuple[str, ...], k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by name."""
    order = sorted(range(len(names)), key=lambda i: (-scores[i], names[i]))
    return np.array(order[:k], dtype=np.int64)


def run_attack(
    model: CfiModel,
    nets: list[NetworkSnapshot],
    rcs_windows: list[RcsWindow] | None = None,
    k_grid: tuple[int, ...] = K_GRID,
    strategies: tuple[str, ...] = STRATEGIES,
    mc_draws: int = MC_DRAWS,
    seed: int = 0,
    freeze_n: bool = False,
) -> list[AttackRun]:
    """All (window, strategy, k) runs; random draws are per-task seeded.

    Targeted removal ranks nodes by that window's own leave-one-out scores
    (computed here when not supplied); strength ranks by adjacency row sums.
    """
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ValidationError(f"unknown strategies {sorted(unknown)}")
    if RANDOM in strategies and mc_draws < 2:
        raise ValidationError(f"need at least 2 Monte Carlo draws, got {mc_draws}")
    if rcs_windows is not None and len(rcs_windows) != len(nets):
        raise ValidationError("rcs_windows must align one-to-one with nets")

    runs: list[AttackRun] = []
    for w_idx, net in enumerate(nets):
        n = net.n
        bad = [k for k in k_grid if k > n - 2]
        if bad:
            raise ValidationError(f"removal sizes {bad} too large for {n} nodes")
        C = net.correlation.matrix
        names = net.node_names

        rw = None
        if TARGETED_RCS in strategies:
            rw = rcs_windows[w_idx] if rcs_windows is not None else rcs_window(
                model, net, freeze_n=freeze_n
            )
            cfi_full = rw.cfi_full
            rcs_scores = np.array([node.rcs for node in rw.nodes])
        else:
            cfi_full = _full_cfi(model, net)

        strength = net.node_strength()

        for k in k_grid:
            if TARGETED_RCS in strategies:
                idx = _top_k(rcs_scores, names, k)
                after = float(_score_removal_sets(model, C, idx[None, :], freeze_n)[0])
                runs.append(
                    AttackRun(
                        window_end=net.window_end,
                        k=k,
                        strategy=TARGETED_RCS,
                        removed=tuple(sorted(names[i] for i in idx)),
                        cfi_full=cfi_full,
                        cfi_after=after,
                        delta=cfi_full - after,
                    )
                )
            if STRENGTH in strategies:
                idx = _top_k(strength, names, k)
                after = float(_score_removal_sets(model, C, idx[None, :], freeze_n)[0])
                runs.append(
                    AttackRun(
                        window_end=net.window_end,
                        k=k,
                        strategy=STRENGTH,
                        removed=tuple(sorted(names[i] for i in idx)),
                        cfi_full=cfi_full,
                        cfi_after=after,
                        delta=cfi_full - after,
                    )
                )
            if RANDOM in strategies:
                draw_sets = np.empty((mc_draws, k), dtype=np.int64)
                seeds = []
                for d in range(mc_draws):
                    s = derive_seed(seed, net.window_end, RANDOM, k, d)
                    seeds.append(s)
                    rng = np.random.default_rng(s)
                    draw_sets[d] = rng.choice(n, size=k, replace=False)
                afters = _score_removal_sets(model, C, draw_sets, freeze_n)
                for d in range(mc_draws):
                    runs.append(
                        AttackRun(
                            window_end=net.window_end,
                            k=k,
                            strategy=RANDOM,
                            removed=tuple(sorted(names[i] for i in draw_sets[d])),
                            cfi_full=cfi_full,
                            cfi_after=float(afters[d]),
                            delta=float(cfi_full - afters[d]),
                            mc_seed=seeds[d],
                            draw_index=d,
                        )
                    )
    return runs


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def runs_frame(runs: list[AttackRun]) -> pd.DataFrame:
    rows = [
        {
            "window_end": r.window_end.strftime("%Y-%m-%d") if r.window_end is not None else "",
            "k": r.k,
            "strategy": r.strategy,
            "removed": "|".join(r.removed),
            "cfi_full": r.cfi_full,
            "cfi_after": r.cfi_after,
            "delta": r.delta,
            "mc_seed": r.mc_seed if r.mc_seed is not None else "",
            "draw_index": r.draw_index if r.draw_index is not None else "",
        }
        for r in runs
    ]
    return pd.DataFrame(
        rows,
        columns=[
            "window_end", "k", "strategy", "removed",
            "cfi_full", "cfi_after", "delta", "mc_seed", "draw_index",
        ],
    )


def summarize_attack(
    runs: list[AttackRun],
    regime: str = REGIME_ALL,
    window_subset: set | None = None,
    random_pooling: str = "within_date",
) -> pd.DataFrame:
    """Mean drop per (strategy, k); Monte Carlo band for the random baseline.

    ``within_date`` averages random draws inside each window first and takes
    the 2.5/97.5 percentile band across the per-window means; ``pooled``
    treats every draw as one observation. A TARGETED_MINUS_RANDOM row per k
    carries the headline gap.
    """
    if random_pooling not in ("within_date", "pooled"):
        raise ValidationError(f"unknown random pooling mode {random_pooling!r}")
    rows = []
    kept = [r for r in runs if window_subset is None or r.window_end in window_subset]
    if not kept:
        raise ValidationError("no attack runs in the requested window subset")

    by_sk: dict[tuple[str, int], list[AttackRun]] = {}
    for r in kept:
        by_sk.setdefault((r.strategy, r.k), []).append(r)

    means: dict[tuple[str, int], float] = {}
    for (strategy, k), group in sorted(by_sk.items()):
        if strategy == RANDOM:
            per_window: dict = {}
            for r in group:
                per_window.setdefault(r.window_end, []).append(r.delta)
            window_means = np.array([np.mean(v) for _, v in sorted(per_window.items(), key=lambda kv: str(kv[0]))])
            if random_pooling == "within_date":
                mean_delta = float(window_means.mean())
                lo, hi = np.percentile(window_means, BAND)
            else:
                pooled = np.array([r.delta for r in group])
                mean_delta = float(pooled.mean())
                lo, hi = np.percentile(pooled, BAND)
            n_windows = len(per_window)
            band_low, band_high = float(lo), float(hi)
        else:
            deltas = np.array([r.delta for r in group])
            mean_delta = float(deltas.mean())
            band_low = band_high = float("nan")
            n_windows = len(group)
        means[(strategy, k)] = mean_delta
        rows.append(
            {
                "regime": regime,
                "strategy": strategy,
                "k": k,
                "mean_delta": mean_delta,
                "band_low": band_low,
                "band_high": band_high,
                "n_windows": n_windows,
            }
        )

    for (strategy, k), mean_delta in sorted(means.items()):
        if strategy == TARGETED_RCS and (RANDOM, k) in means:
            rows.append(
                {
                    "regime": regime,
                    "strategy": "TARGETED_MINUS_RANDOM",
                    "k": k,
                    "mean_delta": mean_delta - means[(RANDOM, k)],
                    "band_low": float("nan"),
                    "band_high": float("nan"),
                    "n_windows": rows[0]["n_windows"],
                }
            )
    return pd.DataFrame(
        rows, columns=["regime", "strategy", "k", "mean_delta", "band_low", "band_high", "n_windows"]
    )


def regime_split(
    runs: list[AttackRun],
    cfi_std_by_window: dict,
    quantile: float = 0.20,
    random_pooling: str = "within_date",
) -> pd.DataFrame:
    """Summaries for ALL plus the top and bottom CFI tails.

    HIGH keeps windows at or above the (1-quantile) empirical quantile of the
    standardized index, LOW at or below the quantile.
    """
    if not 0.0 < quantile < 0.5:
        raise ValidationError(f"regime quantile must lie in (0, 0.5), got {quantile}")
    windows = sorted(cfi_std_by_window, key=str)
    values = np.array([cfi_std_by_window[w] for w in windows])
    lo_cut, hi_cut = np.quantile(values, [quantile, 1.0 - quantile])
    high = {w for w in windows if cfi_std_by_window[w] >= hi_cut}
    low = {w for w in windows if cfi_std_by_window[w] <= lo_cut}
    for name, subset in (("HIGH", high), ("LOW", low)):
        if len(subset) < 5:
            log.warning("%s regime holds only %d windows", name, len(subset))

    parts = [
        summarize_attack(runs, regime=REGIME_ALL, random_pooling=random_pooling),
        summarize_attack(runs, regime=REGIME_HIGH, window_subset=high, random_pooling=random_pooling),
        summarize_attack(runs, regime=REGIME_LOW, window_subset=low, random_pooling=random_pooling),
    ]
    return pd.concat(parts, ignore_index=True)
