"""Batch pipeline: staged execution, deterministic artifacts, manifest.

Stages run in dependency order (ingest, clean, networks, cfi, rcs, attack,
regress, robustness). Every stage writes into a private partial directory
that is atomically renamed on success and moved to quarantine/ on failure,
so the advertised output layout never holds half-written files. The manifest
records config, input, and output hashes with no timestamps: reruns on
identical inputs are bit-identical.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from . import __version__
from .attack import regime_split, run_attack, runs_frame
from .cleaning import clean_panel, fill_gaps, flags_to_frame
from .config import PipelineConfig
from .contribution import aggregate_rcs, rcs_frame, rcs_window
from .covariance import (
    SHRINKAGE,
    CorrelationMatrix,
    glasso_partial_correlation,
    pearson_correlation,
    save_matrix_csv,
    shrinkage_correlation,
)
from .errors import DataError
from .fragility import build_cfi_series, fit_cfi_model, load_model, save_model
from .ingest import LlamaClient, build_category_panel, fetch_all
from .network import (
    METRIC_NAMES,
    build_adjacency,
    edge_list,
    metrics_from_stack,
    node_list,
)
from .panel import CategoryPanel, ReturnMatrix, load_returns, load_snapshot, save_returns, save_snapshot
from .regression import build_controls, results_frame, run_risk_regressions
from .rolling import rolling_windows

log = logging.getLogger(__name__)

STAGES = ("ingest", "clean", "networks", "cfi", "rcs", "attack", "regress", "robustness")
MANIFEST_SCHEMA = "fragnet-manifest/1"
_FLOAT_FMT = "%.17g"


def _write_csv(frame: pd.DataFrame, path, index: bool = False) -> None:
    buf = io.StringIO()
    frame.to_csv(buf, index=index, float_format=_FLOAT_FMT, lineterminator="\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Runner:
    """Holds per-run state and executes stages against one output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = os.path.abspath(cfg.output_dir)
        os.makedirs(self.out, exist_ok=True)
        self.panel: CategoryPanel | None = None
        self.returns: ReturnMatrix | None = None
        self.aggregate_tvl: pd.Series | None = None
        self.window_ends: list | None = None
        self.corr_stack: np.ndarray | None = None
        self.categories: tuple[str, ...] | None = None
        self.metrics: np.ndarray | None = None
        self.model = None
        self.cfi_series: pd.DataFrame | None = None
        self.rcs_windows = None
        self.completed: list[str] = []

    # -- plumbing -----------------------------------------------------------

    @contextlib.contextmanager
    def _stage(self, name: str):
        tmp = os.path.join(self.out, f".{name}.partial")
        if os.path.exists(tmp):
            shutil.rmtree(tmp)
        os.makedirs(tmp)
        try:
            yield tmp
        except BaseException as exc:
            qdir = os.path.join(self.out, "quarantine")
            os.makedirs(qdir, exist_ok=True)
            dest = os.path.join(qdir, name)
            if os.path.exists(dest):
                shutil.rmtree(dest)
            os.rename(tmp, dest)
            if exc.args and isinstance(exc.args[0], str):
                exc.args = (f"stage {name}: {exc.args[0]}",) + exc.args[1:]
            raise
        final = os.path.join(self.out, name)
        if os.path.exists(final):
            shutil.rmtree(final)
        os.rename(tmp, final)
        self.completed.append(name)

    def _path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def _pmap(self, fn, items):
        if self.cfg.jobs == 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=self.cfg.jobs) as pool:
            return list(pool.map(fn, items))

    # -- stage inputs, memory first then disk ---------------------------------

    def _need_panel(self) -> CategoryPanel:
        if self.panel is None:
            path = self._path("panel", "panel.csv")
            if not os.path.exists(path):
                raise DataError("no panel available: run the ingest stage first")
            self.panel = load_snapshot(path)
        return self.panel

    def _need_returns(self) -> ReturnMatrix:
        if self.returns is None:
            path = self._path("returns", "returns.csv")
            if not os.path.exists(path):
                raise DataError("no return matrix available: run the clean stage first")
            self.returns = load_returns(path)
        return self.returns

    def _need_networks(self):
        if self.corr_stack is None:
            meta_path = self._path("networks", "correlations.meta.json")
            if not os.path.exists(meta_path):
                raise DataError("no networks available: run the networks stage first")
            with open(meta_path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            self.corr_stack = np.load(self._path("networks", "correlations.npy"))
            self.window_ends = [pd.Timestamp(d) for d in meta["window_ends"]]
            self.categories = tuple(meta["categories"])
            self.metrics = (
                pd.read_csv(self._path("networks", "metrics.csv"))[list(METRIC_NAMES)]
                .to_numpy(dtype=np.float64)
            )
        return self.corr_stack

    def _need_model(self):
        if self.model is None:
            path = self._path("cfi", "model.json")
            if not os.path.exists(path):
                raise DataError("no frozen model available: run the cfi stage first")
            self.model = load_model(path)
        return self.model

    def _need_cfi_series(self) -> pd.DataFrame:
        if self.cfi_series is None:
            path = self._path("cfi", "cfi_series.csv")
            if not os.path.exists(path):
                raise DataError("no index series available: run the cfi stage first")
            frame = pd.read_csv(path, parse_dates=["window_end"])
            frame = frame.rename(columns={"cfi_standardized": "cfi"})
            self.cfi_series = frame
        return self.cfi_series

    def _nets(self):
        self._need_networks()
        source = SHRINKAGE if self.cfg.network.estimator == "shrinkage" else "PEARSON"
        nets = []
        for i, end in enumerate(self.window_ends):
            C = CorrelationMatrix(
                matrix=self.corr_stack[i],
                source=source,
                window_end=end,
                names=self.categories,
            )
            nets.append(build_adjacency(C, window_end=end))
        return nets

    # -- stages ---------------------------------------------------------------

    def ingest(self) -> CategoryPanel:
        cfg = self.cfg.data
        with self._stage("panel") as tmp:
            if cfg.snapshot:
                panel = load_snapshot(cfg.snapshot)
                if cfg.start or cfg.end:
                    lo = pd.Timestamp(cfg.start) if cfg.start else panel.dates[0]
                    hi = pd.Timestamp(cfg.end) if cfg.end else panel.dates[-1]
                    panel = CategoryPanel(
                        frame=panel.frame.loc[lo:hi], excluded=panel.excluded
                    )
            else:
                client = LlamaClient(
                    api_base=cfg.api_base,
                    cache_dir=cfg.cache_dir,
                    min_interval=cfg.min_interval,
                    offline=cfg.offline,
                )
                headers = client.protocol_list()
                records, missing = fetch_all(client, headers)
                panel = build_category_panel(
                    records, exclusions=set(cfg.exclusions), start=cfg.start, end=cfg.end
                )
                diag = {"missing_protocols": missing, "notes": client.diagnostics}
                with open(os.path.join(tmp, "diagnostics.json"), "w", encoding="utf-8") as fh:
                    json.dump(diag, fh, indent=2, sort_keys=True)
            save_snapshot(panel, os.path.join(tmp, "panel.csv"))
        self.panel = panel
        return panel

    def clean(self) -> ReturnMatrix:
        panel = self._need_panel()
        c = self.cfg.cleaning
        with self._stage("returns") as tmp:
            result = clean_panel(
                panel,
                tau_abs=c.tau_abs,
                tau_rel=c.tau_rel,
                tau_mad=c.tau_mad,
                reversal_horizon=c.reversal_horizon,
                reversal_band=c.reversal_band,
                eps=c.return_eps,
                winsor_level=c.winsor_level,
                pooled_winsor=c.pooled_winsor,
            )
            save_returns(result.returns, os.path.join(tmp, "returns.csv"))
            _write_csv(flags_to_frame(result.flags), os.path.join(tmp, "anomalies.csv"))
            save_snapshot(result.repaired_panel, os.path.join(tmp, "repaired_panel.csv"))
            filled = fill_gaps(result.repaired_panel)
            total = filled.frame.sum(axis=1)
            agg = pd.DataFrame(
                {"date": total.index.strftime("%Y-%m-%d"), "total_tvl": total.values}
            )
            _write_csv(agg, os.path.join(tmp, "aggregate_tvl.csv"))
        self.returns = result.returns
        self.aggregate_tvl = total
        return result.returns

    def networks(self) -> np.ndarray:
        returns = self._need_returns()
        ncfg = self.cfg.network
        windows = rolling_windows(returns, self.cfg.rolling)
        if not windows:
            raise DataError("no rolling windows: return matrix shorter than the window length")
        names = returns.categories

        def estimate(item):
            end, block = item
            if ncfg.estimator == "shrinkage":
                return shrinkage_correlation(block, names=names, window_end=end)
            return pearson_correlation(block, names=names, window_end=end)

        corrs = self._pmap(estimate, windows)
        stack = np.stack([c.matrix for c in corrs])
        metrics = metrics_from_stack(stack, rho=ncfg.rho, spectrum_source=ncfg.spectrum_source)
        ends = [end for end, _ in windows]

        with self._stage("networks") as tmp:
            np.save(os.path.join(tmp, "correlations.npy"), stack)
            meta = {
                "schema": "fragnet-networks/1",
                "estimator": ncfg.estimator,
                "window_ends": [e.strftime("%Y-%m-%d") for e in ends],
                "categories": list(names),
            }
            with open(os.path.join(tmp, "correlations.meta.json"), "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)

            mframe = pd.DataFrame(metrics, columns=list(METRIC_NAMES))
            mframe.insert(0, "n_nodes", stack.shape[1])
            mframe.insert(0, "window_end", [e.strftime("%Y-%m-%d") for e in ends])
            _write_csv(mframe, os.path.join(tmp, "metrics.csv"))

            if ncfg.estimator == "shrinkage":
                lam = pd.DataFrame(
                    {
                        "window_end": [e.strftime("%Y-%m-%d") for e in ends],
                        "shrinkage_intensity": [c.meta["shrinkage_intensity"] for c in corrs],
                        "target_scale": [c.meta["target_scale"] for c in corrs],
                    }
                )
                _write_csv(lam, os.path.join(tmp, "shrinkage.csv"))

            last = build_adjacency(corrs[-1], window_end=ends[-1])
            tvl = None
            if self.panel is not None:
                tvl = self.panel.frame.mean(axis=0).to_dict()
            save_matrix_csv(last.correlation.matrix, names, os.path.join(tmp, "last_window_correlation.csv"))
            _write_csv(edge_list(last), os.path.join(tmp, "last_window_edges.csv"))
            _write_csv(node_list(last, tvl), os.path.join(tmp, "last_window_nodes.csv"))

        self.window_ends = ends
        self.corr_stack = stack
        self.categories = tuple(names)
        self.metrics = metrics
        return stack

    def cfi(self) -> pd.DataFrame:
        self._need_networks()
        ncfg = self.cfg.network
        model = fit_cfi_model(self.metrics, rho=ncfg.rho, spectrum_source=ncfg.spectrum_source)
        from .network import FragilityMetrics

        series = [
            FragilityMetrics(
                avg_strength=row[0],
                lambda_max=row[1],
                strong_edge_density=row[2],
                eigen_entropy=row[3],
                window_end=self.window_ends[i],
                n_nodes=self.corr_stack.shape[1],
            )
            for i, row in enumerate(self.metrics)
        ]
        frame = build_cfi_series(series, model)
        with self._stage("cfi") as tmp:
            save_model(model, os.path.join(tmp, "model.json"))
            out = frame.copy()
            out["window_end"] = out["window_end"].map(lambda d: d.strftime("%Y-%m-%d"))
            out = out.rename(columns={"cfi": "cfi_standardized"})
            _write_csv(out, os.path.join(tmp, "cfi_series.csv"))
        self.model = model
        self.cfi_series = frame
        return frame

    def rcs(self) -> pd.DataFrame:
        model = self._need_model()
        nets = self._nets()
        rcfg = self.cfg.rcs
        windows = self._pmap(
            lambda net: rcs_window(model, net, eps=rcfg.eps, freeze_n=rcfg.freeze_n), nets
        )
        panel = None
        try:
            repaired = self._path("returns", "repaired_panel.csv")
            if os.path.exists(repaired):
                panel = load_snapshot(repaired)
            else:
                panel = self._need_panel()
        except DataError:
            log.warning("no TVL panel found; rank_tvl column will be -1")
        ranking = aggregate_rcs(windows, panel, high_quantile=rcfg.high_quantile)
        with self._stage("rcs") as tmp:
            _write_csv(rcs_frame(windows), os.path.join(tmp, "rcs_windows.csv"))
            _write_csv(ranking, os.path.join(tmp, "ranking.csv"))
        self.rcs_windows = windows
        return ranking

    def attack(self) -> pd.DataFrame:
        model = self._need_model()
        nets = self._nets()
        acfg = self.cfg.attack
        if self.rcs_windows is None and "TARGETED_RCS" in acfg.strategies:
            rcfg = self.cfg.rcs
            self.rcs_windows = self._pmap(
                lambda net: rcs_window(model, net, eps=rcfg.eps, freeze_n=rcfg.freeze_n), nets
            )
        runs = run_attack(
            model,
            nets,
            rcs_windows=self.rcs_windows,
            k_grid=acfg.k_grid,
            strategies=acfg.strategies,
            mc_draws=acfg.mc_draws,
            seed=self.cfg.seed,
            freeze_n=self.cfg.rcs.freeze_n,
        )
        series = self._need_cfi_series()
        by_window = dict(zip(series["window_end"], series["cfi"]))
        summary = regime_split(
            runs, by_window, quantile=acfg.regime_quantile, random_pooling=acfg.random_pooling
        )
        with self._stage("attack") as tmp:
            _write_csv(runs_frame(runs), os.path.join(tmp, "runs.csv"))
            _write_csv(summary, os.path.join(tmp, "summary.csv"))
        return summary

    def regress(self) -> pd.DataFrame:
        rcfg = self.cfg.regression
        if not rcfg.controls_path:
            log.warning("no controls file configured; regression stage skipped")
            return pd.DataFrame()
        series = self._need_cfi_series()
        if self.aggregate_tvl is None:
            path = self._path("returns", "aggregate_tvl.csv")
            if not os.path.exists(path):
                raise DataError("no aggregate TVL series: run the clean stage first")
            agg = pd.read_csv(path, parse_dates=["date"]).set_index("date")["total_tvl"]
            self.aggregate_tvl = agg
        market = pd.read_csv(rcfg.controls_path, parse_dates=["date"]).set_index("date")
        controls = build_controls(
            market,
            self.aggregate_tvl,
            vol_window=rcfg.vol_window,
            annualize=rcfg.annualize,
            periods_per_year=rcfg.periods_per_year,
        )
        cfi = pd.Series(series["cfi"].to_numpy(), index=pd.DatetimeIndex(series["window_end"]))
        results = run_risk_regressions(
            cfi, controls, horizons=rcfg.horizons, nw_lags=rcfg.nw_lags
        )
        frame = results_frame(results)
        with self._stage("regressions") as tmp:
            _write_csv(frame, os.path.join(tmp, "regressions.csv"))
        return frame

    def robustness(self) -> pd.DataFrame:
        returns = self._need_returns()
        self._need_networks()
        ncfg = self.cfg.network
        windows = rolling_windows(returns, self.cfg.rolling)
        names = returns.categories
        ends = [e.strftime("%Y-%m-%d") for e, _ in windows]

        def zscore(x: np.ndarray) -> np.ndarray:
            return (x - x.mean()) / x.std(ddof=0)

        base_strength = self.metrics[:, 0]

        pearson_stack = np.stack(
            [pearson_correlation(block, names=names).matrix for _, block in windows]
        )
        pearson_strength = metrics_from_stack(pearson_stack, rho=ncfg.rho)[:, 0]

        glasso_strength = {}
        for penalty in ncfg.glasso_penalty_grid:
            def one(item, ρ=penalty):
                _, block = item
                return glasso_partial_correlation(
                    block, penalty=ρ, names=names,
                    tol=ncfg.glasso_tol, max_sweeps=ncfg.glasso_max_sweeps,
                ).matrix
            stack = np.stack(self._pmap(one, windows))
            glasso_strength[penalty] = metrics_from_stack(stack, rho=ncfg.rho)[:, 0]

        default_pen = (
            ncfg.glasso_penalty
            if ncfg.glasso_penalty in glasso_strength
            else ncfg.glasso_penalty_grid[0]
        )
        proxies = pd.DataFrame({"window_end": ends})
        proxies["shrinkage_z"] = zscore(base_strength)
        proxies["pearson_z"] = zscore(pearson_strength)
        proxies["glasso_z"] = zscore(glasso_strength[default_pen])
        for penalty, series in glasso_strength.items():
            proxies[f"glasso_z_pen{penalty:g}"] = zscore(series)

        densities = pd.DataFrame({"window_end": ends})
        for rho in ncfg.rho_grid:
            densities[f"density_rho{rho:g}"] = metrics_from_stack(
                self.corr_stack, rho=rho, spectrum_source=ncfg.spectrum_source
            )[:, 2]

        proxy_cols = ["shrinkage_z", "pearson_z", "glasso_z"]
        corr_rows = []
        for i, a in enumerate(proxy_cols):
            for b in proxy_cols[i + 1 :]:
                corr_rows.append(
                    {
                        "series_a": a,
                        "series_b": b,
                        "correlation": float(np.corrcoef(proxies[a], proxies[b])[0, 1]),
                    }
                )
        dens_cols = [c for c in densities.columns if c != "window_end"]
        for i, a in enumerate(dens_cols):
            for b in dens_cols[i + 1 :]:
                corr_rows.append(
                    {
                        "series_a": a,
                        "series_b": b,
                        "correlation": float(np.corrcoef(densities[a], densities[b])[0, 1]),
                    }
                )

        with self._stage("robustness") as tmp:
            _write_csv(proxies, os.path.join(tmp, "proxies.csv"))
            _write_csv(densities, os.path.join(tmp, "density_grid.csv"))
            _write_csv(pd.DataFrame(corr_rows), os.path.join(tmp, "correlations.csv"))
        return pd.DataFrame(corr_rows)

    # -- orchestration ----------------------------------------------------------

    def run_all(self, stages: tuple[str, ...] = STAGES) -> None:
        for name in stages:
            log.info("running stage %s", name)
            getattr(self, "regress" if name == "regress" else name)()
        self.write_manifest()

    def write_manifest(self) -> str:
        from .config import config_to_dict

        inputs = {}
        if self.cfg.data.snapshot:
            inputs["snapshot"] = _sha256_file(self.cfg.data.snapshot)
        if self.cfg.regression.controls_path and os.path.exists(self.cfg.regression.controls_path):
            inputs["controls"] = _sha256_file(self.cfg.regression.controls_path)

        outputs = {}
        for root, dirs, files in os.walk(self.out):
            dirs[:] = sorted(d for d in dirs if d not in ("manifest", "quarantine") and not d.startswith("."))
            for fname in sorted(files):
                full = os.path.join(root, fname)
                rel = os.path.relpath(full, self.out)
                outputs[rel] = _sha256_file(full)

        cfg_doc = config_to_dict(self.cfg)
        cfg_blob = json.dumps(cfg_doc, sort_keys=True).encode("utf-8")
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "version": __version__,
            "seed": self.cfg.seed,
            "config": cfg_doc,
            "config_sha256": hashlib.sha256(cfg_blob).hexdigest(),
            "inputs": inputs,
            "outputs": outputs,
        }
        mdir = self._path("manifest")
        os.makedirs(mdir, exist_ok=True)
        path = os.path.join(mdir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path
