"""Evaluation machinery.

Masked fit metrics, the elasticity plausibility score used for model
selection, expanding-window folds, week-block bootstrap, the pairwise
log-log OLS benchmark with heteroskedasticity-robust intervals, analytic
elasticity extraction, and the stability diagnostics that put the surface
and the benchmark side by side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import pandas as pd
from scipy import stats

from .model import ModelState, SparseGraph, forward
from .training import collate

RECORD_COLUMNS = ["source", "store", "week", "i", "j", "fold", "seed",
                  "replicate", "estimate", "ci_lo", "ci_hi"]
METRIC_COLUMNS = ["source", "scope", "fold", "seed", "store", "upc", "r2", "mae", "rmse"]

BENCHMARK_CONTROLS = [
    "on_promo", "week_rank", "sin_52", "cos_52", "sin_13", "cos_13",
    "weeks_since_first_seen_store_upc", "lag_1", "lag_4", "miss_lag_1",
    "miss_lag_4", "promo_intensity_store_week", "n_neighbors_sw_cat",
    "neighbor_promo_share_sw_cat", "lag1_neighbor_mean", "share_new_neighbors_13w",
]

Z_95 = 1.96


class MetricError(ValueError):
    """Requested metric is undefined on the given inputs."""


# -- masked metrics ---------------------------------------------------------------


def masked_r2(y, yhat, mask) -> float:
    """1 - masked SSR / masked SST around the masked mean."""
    y, yhat, mask = (np.asarray(a, dtype=float) for a in (y, yhat, mask))
    m = mask > 0
    if not m.any():
        raise MetricError("masked R^2 undefined: no observed entries")
    ybar = y[m].mean()
    sst = float(((y[m] - ybar) ** 2).sum())
    if sst == 0.0:
        raise MetricError("masked R^2 undefined: zero variance among observed entries")
    ssr = float(((y[m] - yhat[m]) ** 2).sum())
    return 1.0 - ssr / sst


def masked_mae_rmse(y, yhat, mask) -> tuple:
    y, yhat, mask = (np.asarray(a, dtype=float) for a in (y, yhat, mask))
    m = mask > 0
    if not m.any():
        raise MetricError("masked errors undefined: no observed entries")
    err = y[m] - yhat[m]
    return float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean()))


# -- elasticity plausibility scoring -------------------------------------------------


def elasticity_score(e_own, e_cross, beta_eda: float = -2.0,
                     own_band=(-5.0, 0.0), cross_band=(-1.0, 1.0),
                     prior_slack: float = 0.3) -> dict:
    """Band-membership score with a median prior penalty.

    The own component is the share of own elasticities inside the plausible
    band, discounted by how far the median sits from the cross-sectional
    prior (a slack of ``prior_slack`` is free; the penalty saturates at 1).
    The cross component is the in-band share, or 1 when no cross estimates
    exist.  Combined 70/30.
    """
    e_own = np.asarray(list(e_own), dtype=float)
    if e_own.size == 0:
        raise MetricError("elasticity score undefined without own-price estimates")
    e_cross = np.asarray(list(e_cross), dtype=float)
    p_own = float(((e_own >= own_band[0]) & (e_own <= own_band[1])).mean())
    med = float(np.median(e_own))
    p_prior = min(max(0.0, abs(med - beta_eda) - prior_slack) / abs(beta_eda), 1.0)
    s_own = p_own * (1.0 - p_prior)
    if e_cross.size == 0:
        s_cross = 1.0
    else:
        s_cross = float(((e_cross >= cross_band[0]) & (e_cross <= cross_band[1])).mean())
    return {"p_own": p_own, "p_prior": p_prior, "s_own": s_own,
            "s_cross": s_cross, "s_elast": 0.7 * s_own + 0.3 * s_cross}


def robust_aggregate(values) -> float:
    """Mean minus a quarter sample standard deviation (singleton sd is 0)."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise MetricError("robust aggregate of an empty collection")
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()) - 0.25 * sd


@dataclass
class TrialSummary:
    trial_id: int
    r2_values: list
    s_elast_values: list

    @property
    def r2_robust(self) -> float:
        return robust_aggregate(self.r2_values)

    @property
    def s_elast_robust(self) -> float:
        return robust_aggregate(self.s_elast_values)

    @property
    def s_select(self) -> float:
        return self.r2_robust + self.s_elast_robust

    def to_dict(self) -> dict:
        return {"trial_id": self.trial_id, "r2_values": list(self.r2_values),
                "s_elast_values": list(self.s_elast_values),
                "r2_robust": self.r2_robust, "s_elast_robust": self.s_elast_robust,
                "s_select": self.s_select}


def select_trial(trials) -> TrialSummary:
    """Highest combined robust score; ties go to the lowest trial id."""
    trials = list(trials)
    if not trials:
        raise MetricError("no trials to select from")
    return max(sorted(trials, key=lambda t: t.trial_id),
               key=lambda t: (t.s_select, -t.trial_id))


# -- folds and bootstrap --------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    index: int
    train_weeks: tuple
    val_weeks: tuple


def make_folds(weeks, n_folds: int) -> list:
    """Expanding-window folds over ``n_folds + 1`` contiguous week blocks.

    Fold f trains on blocks 1..f and validates on block f+1.
    """
    weeks = sorted(set(int(w) for w in weeks))
    if n_folds < 1:
        raise ValueError("need at least one fold")
    if len(weeks) < n_folds + 1:
        raise ValueError(f"{len(weeks)} weeks cannot form {n_folds + 1} blocks")
    blocks = np.array_split(np.asarray(weeks), n_folds + 1)
    folds = []
    for f in range(n_folds):
        train = tuple(int(w) for b in blocks[:f + 1] for w in b)
        val = tuple(int(w) for w in blocks[f + 1])
        folds.append(Fold(index=f + 1, train_weeks=train, val_weeks=val))
    return folds


def block_bootstrap_weeks(weeks, block_len: int, n_reps: int, rng) -> list:
    """Resample non-overlapping week blocks with replacement.

    Returns one week multiset (list, duplicates meaningful) per replicate.
    """
    weeks = sorted(set(int(w) for w in weeks))
    if block_len < 1 or n_reps < 1:
        raise ValueError("block_len and n_reps must be positive")
    blocks = [weeks[s:s + block_len] for s in range(0, len(weeks), block_len)]
    reps = []
    for _ in range(n_reps):
        picks = rng.integers(0, len(blocks), size=len(blocks))
        reps.append([w for b in picks for w in blocks[b]])
    return reps


# -- analytic elasticity extraction ----------------------------------------------------


def extract_elasticities(state: ModelState, instances, *, source: str = "icdn",
                         fold=None, seed=None, replicate=None,
                         graph: SparseGraph | None = None,
                         batch_size: int = 512) -> pd.DataFrame:
    """Evaluate E_ii and selected E_ij on every instance of a split.

    Uses the frozen graph unless one is passed explicitly; cross records only
    appear for graph edges whose両 endpoints are observed that week.
    """
    if graph is None:
        if state.frozen_graph is None:
            raise ValueError("no frozen graph in the checkpoint; freeze one or pass a graph")
        graph = SparseGraph(edges=state.frozen_graph, provenance="frozen")
    upcs = state.universe.upcs
    rows = []
    for start in range(0, len(instances), batch_size):
        batch = collate(instances[start:start + batch_size])
        out = forward(state, batch, mode="eval", graph=graph)
        e_own = out.e_own.data
        e_cross = out.e_cross.data
        for b in range(batch.size):
            store, week = batch.stores[b], batch.weeks[b]
            for i in range(state.universe.n):
                if batch.mask[b, i] <= 0:
                    continue
                rows.append((source, store, week, upcs[i], upcs[i], fold, seed,
                             replicate, float(e_own[b, i]), np.nan, np.nan))
                for slot, j in enumerate(graph.edges[i]):
                    if batch.mask[b, j] > 0:
                        rows.append((source, store, week, upcs[i], upcs[j], fold,
                                     seed, replicate, float(e_cross[b, i, slot]),
                                     np.nan, np.nan))
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def split_metrics(state: ModelState, instances, *, source: str = "icdn",
                  fold=None, seed=None, graph: SparseGraph | None = None) -> pd.DataFrame:
    """Global + per-series masked metrics on a split (one forward pass)."""
    if graph is None:
        if state.frozen_graph is None:
            raise ValueError("no frozen graph available")
        graph = SparseGraph(edges=state.frozen_graph, provenance="frozen")
    batch = collate(instances)
    out = forward(state, batch, mode="eval", graph=graph)
    yhat = out.yhat.data
    rows = []
    r2 = masked_r2(batch.y, yhat, batch.mask)
    mae, rmse = masked_mae_rmse(batch.y, yhat, batch.mask)
    rows.append((source, "fold", fold, seed, None, None, r2, mae, rmse))
    stores = np.asarray(batch.stores)
    for store in sorted(set(batch.stores)):
        sel = stores == store
        for i, upc in enumerate(state.universe.upcs):
            m = batch.mask[sel, i]
            if m.sum() == 0:
                continue
            y = batch.y[sel, i]
            yh = yhat[sel, i]
            mae_s, rmse_s = masked_mae_rmse(y, yh, m)
            try:
                r2_s = masked_r2(y, yh, m)
            except MetricError:
                r2_s = np.nan
            rows.append((source, "series", fold, seed, store, upc, r2_s, mae_s, rmse_s))
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


# -- pairwise log-log benchmark ---------------------------------------------------------


@dataclass
class BenchmarkFit:
    store: str
    i: str
    j: str
    beta_own: float
    beta_cross: float
    se_own: float
    se_cross: float
    ci_own: tuple
    ci_cross: tuple
    n_train: int
    n_val: int
    val_r2: float
    val_mae: float
    val_rmse: float
    dropped_controls: list = dc_field(default_factory=list)


def build_pairwise(fp: pd.DataFrame) -> pd.DataFrame:
    """Ordered-pair design: focal rows joined with each same-week peer price."""
    left_cols = ["store_code", "upc_code", "week_id", "y", "u"] + BENCHMARK_CONTROLS
    left = fp[left_cols]
    right = fp[["store_code", "upc_code", "week_id", "u"]].rename(
        columns={"upc_code": "upc_j", "u": "u_j"})
    merged = left.merge(right, on=["store_code", "week_id"], how="inner")
    return merged[merged["upc_code"] != merged["upc_j"]].reset_index(drop=True)


def _ols_hc1(X: np.ndarray, y: np.ndarray):
    """OLS coefficients with the HC1 sandwich covariance."""
    n, k = X.shape
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ beta
    xtx_inv = np.linalg.inv(X.T @ X)
    meat = (X.T * (e ** 2)) @ X
    V = (n / (n - k)) * xtx_inv @ meat @ xtx_inv
    return beta, V


def benchmark_fit(train_rows: pd.DataFrame, val_rows: pd.DataFrame,
                  min_rows: int = 30):
    """Fit one (store, i, j) pairwise regression with validity gates.

    Returns ``(BenchmarkFit, None)`` on success or ``(None, reason)`` when a
    gate fails: too few clean training rows, no price variation on either
    axis, or a rank-deficient design.  Constant control columns (collinear
    with the intercept) are dropped and recorded rather than fatal.
    """
    regressors = ["u", "u_j"] + BENCHMARK_CONTROLS
    clean = train_rows.dropna(subset=regressors + ["y"])
    if len(clean) < min_rows:
        return None, "too_few_rows"
    if clean["u"].nunique() < 2:
        return None, "no_own_price_variation"
    if clean["u_j"].nunique() < 2:
        return None, "no_cross_price_variation"
    kept = [c for c in BENCHMARK_CONTROLS if clean[c].nunique() > 1]
    dropped = [c for c in BENCHMARK_CONTROLS if c not in kept]
    X = np.column_stack([np.ones(len(clean)),
                         clean["u"].to_numpy(float),
                         clean["u_j"].to_numpy(float),
                         clean[kept].to_numpy(float)])
    if len(clean) <= X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        return None, "rank_deficient"
    y = clean["y"].to_numpy(float)
    beta, V = _ols_hc1(X, y)
    se = np.sqrt(np.diag(V))
    val_clean = val_rows.dropna(subset=regressors + ["y"])
    if len(val_clean) > 0:
        Xv = np.column_stack([np.ones(len(val_clean)),
                              val_clean["u"].to_numpy(float),
                              val_clean["u_j"].to_numpy(float),
                              val_clean[kept].to_numpy(float)])
        yv = val_clean["y"].to_numpy(float)
        pred = Xv @ beta
        err = yv - pred
        val_mae = float(np.abs(err).mean())
        val_rmse = float(np.sqrt((err ** 2).mean()))
        sst = float(((yv - yv.mean()) ** 2).sum())
        val_r2 = 1.0 - float((err ** 2).sum()) / sst if sst > 0 else np.nan
    else:
        val_mae = val_rmse = val_r2 = np.nan
    store = str(train_rows["store_code"].iloc[0])
    fit = BenchmarkFit(
        store=store, i=str(train_rows["upc_code"].iloc[0]), j=str(train_rows["upc_j"].iloc[0]),
        beta_own=float(beta[1]), beta_cross=float(beta[2]),
        se_own=float(se[1]), se_cross=float(se[2]),
        ci_own=(float(beta[1] - Z_95 * se[1]), float(beta[1] + Z_95 * se[1])),
        ci_cross=(float(beta[2] - Z_95 * se[2]), float(beta[2] + Z_95 * se[2])),
        n_train=int(len(clean)), n_val=int(len(val_clean)),
        val_r2=val_r2, val_mae=val_mae, val_rmse=val_rmse,
        dropped_controls=dropped)
    return fit, None


def run_benchmark(fp: pd.DataFrame, train_weeks, val_weeks, *, fold=None,
                  replicate=None, min_rows: int = 30,
                  week_counts: dict | None = None):
    """All (store, i, j) pairwise fits for one train/val split.

    ``week_counts`` repeats training rows per week multiplicity (bootstrap).
    Returns (elasticity records, metric records, skip reasons).
    """
    pairs = build_pairwise(fp)
    train = pairs[pairs["week_id"].isin(set(train_weeks))]
    if week_counts:
        reps = train["week_id"].map(lambda w: week_counts.get(int(w), 0))
        train = train.loc[train.index.repeat(reps)]
    val = pairs[pairs["week_id"].isin(set(val_weeks))]
    rec_rows, met_rows = [], []
    skips: dict = {}
    preds = []
    for (store, i, j), g_train in train.groupby(["store_code", "upc_code", "upc_j"], sort=True):
        g_val = val[(val["store_code"] == store) & (val["upc_code"] == i) & (val["upc_j"] == j)]
        fit, reason = benchmark_fit(g_train, g_val, min_rows=min_rows)
        if fit is None:
            skips[reason] = skips.get(reason, 0) + 1
            continue
        rec_rows.append(("benchmark", store, np.nan, i, i, fold, np.nan, replicate,
                         fit.beta_own, fit.ci_own[0], fit.ci_own[1]))
        rec_rows.append(("benchmark", store, np.nan, i, j, fold, np.nan, replicate,
                         fit.beta_cross, fit.ci_cross[0], fit.ci_cross[1]))
        if fit.n_val > 0:
            met_rows.append(("benchmark", "series", fold, np.nan, store, i,
                             fit.val_r2, fit.val_mae, fit.val_rmse))
            clean = g_val.dropna(subset=["u", "u_j", "y"] + BENCHMARK_CONTROLS)
            preds.append((clean["y"].to_numpy(float), fit, clean))
    records = pd.DataFrame(rec_rows, columns=RECORD_COLUMNS)
    metrics = pd.DataFrame(met_rows, columns=METRIC_COLUMNS)
    if len(metrics):
        series = metrics[metrics["scope"] == "series"]
        # series rows exist per (store, i, j); collapse to (store, i) then pool
        collapsed = (series.groupby(["store", "upc"], as_index=False)
                     [["r2", "mae", "rmse"]].mean())
        pooled = ("benchmark", "fold", fold, np.nan, None, None,
                  float(collapsed["r2"].mean()), float(collapsed["mae"].mean()),
                  float(collapsed["rmse"].mean()))
        collapsed.insert(0, "source", "benchmark")
        collapsed.insert(1, "scope", "series")
        collapsed.insert(2, "fold", fold)
        collapsed.insert(3, "seed", np.nan)
        metrics = pd.concat([pd.DataFrame([pooled], columns=METRIC_COLUMNS), collapsed],
                            ignore_index=True)
    return records, metrics, skips


# -- stability diagnostics ----------------------------------------------------------------


def _collapse(records: pd.DataFrame) -> pd.DataFrame:
    """Mean estimate per (store, i, j, fold, seed, replicate) key."""
    return (records.groupby(["source", "store", "i", "j", "fold", "seed", "replicate"],
                            dropna=False, as_index=False)["estimate"].mean())


def _fold_estimates(collapsed: pd.DataFrame) -> pd.DataFrame:
    """Per-key fold point estimates, seeds averaged."""
    sub = collapsed[collapsed["replicate"].isna() & collapsed["fold"].notna()]
    return (sub.groupby(["source", "store", "i", "j", "fold"], as_index=False)["estimate"].mean())


def _boot_estimates(collapsed: pd.DataFrame) -> pd.DataFrame:
    sub = collapsed[collapsed["replicate"].notna()]
    return (sub.groupby(["source", "store", "i", "j", "replicate"], as_index=False)["estimate"].mean())


def _win_rate(a: np.ndarray, b: np.ndarray) -> float:
    """Share of positions where a beats (is lower than) b; ties half credit."""
    wins = (a < b).sum() + 0.5 * (a == b).sum()
    return float(wins / len(a))


def _side_block(boot, folds, keys, sign_positive: bool) -> dict:
    """Bootstrap/fold stability comparison over matched keys for one side."""
    per_key = []
    for key in keys:
        entry = {"key": key}
        for src in ("icdn", "benchmark"):
            b = boot.get((src, key))
            if b is not None and len(b) >= 2:
                lo, hi = np.percentile(b, [2.5, 97.5])
                entry[f"{src}_ci"] = (float(lo), float(hi))
                entry[f"{src}_width"] = float(hi - lo)
                entry[f"{src}_sd"] = float(np.std(b, ddof=1))
                entry[f"{src}_mean"] = float(np.mean(b))
            f = folds.get((src, key))
            if f is not None and len(f) >= 3:
                entry[f"{src}_fold_sd"] = float(np.std(f, ddof=1))
            if f is not None:
                entry[f"{src}_folds"] = f
        per_key.append(entry)

    def pairs(field_a, field_b=None):
        field_b = field_b or field_a
        out = [(e["icdn_" + field_a], e["benchmark_" + field_b]) for e in per_key
               if "icdn_" + field_a in e and "benchmark_" + field_b in e]
        return np.array([p[0] for p in out]), np.array([p[1] for p in out])

    block: dict = {"matched_keys": len(keys)}
    wi, wb = pairs("width")
    if len(wi):
        block["bootstrap"] = {
            "n_matched": int(len(wi)),
            "narrower_ci_rate_icdn": _win_rate(wi, wb),
            "median_ci_width": {"icdn": float(np.median(wi)), "benchmark": float(np.median(wb))},
        }
        si, sb = pairs("sd")
        block["bootstrap"]["lower_sd_rate_icdn"] = _win_rate(si, sb)
        block["bootstrap"]["median_bootstrap_sd"] = {"icdn": float(np.median(si)),
                                                     "benchmark": float(np.median(sb))}
        mi, mb = pairs("mean")
        block["bootstrap"]["same_sign_rate"] = float((np.sign(mi) == np.sign(mb)).mean())
        block["bootstrap"]["median_estimate"] = {"icdn": float(np.median(mi)),
                                                 "benchmark": float(np.median(mb))}
        rate_key = "positive_rate" if sign_positive else "negative_rate"
        cmp_i = (mi > 0) if sign_positive else (mi < 0)
        cmp_b = (mb > 0) if sign_positive else (mb < 0)
        block["bootstrap"][rate_key] = {"icdn": float(cmp_i.mean()), "benchmark": float(cmp_b.mean())}
    fi, fb = pairs("fold_sd")
    if len(fi):
        block["folds"] = {
            "n_matched": int(len(fi)),
            "more_stable_rate_icdn": _win_rate(fi, fb),
            "median_interfold_sd": {"icdn": float(np.median(fi)), "benchmark": float(np.median(fb))},
        }
    # coverage of fold estimates by each source's own bootstrap interval
    unc: dict = {}
    for src in ("icdn", "benchmark"):
        inside = total = 0
        ratios = []
        for e in per_key:
            ci = e.get(f"{src}_ci")
            fvals = e.get(f"{src}_folds")
            if ci is not None and fvals is not None and len(fvals):
                inside += int(((fvals >= ci[0]) & (fvals <= ci[1])).sum())
                total += len(fvals)
            if f"{src}_sd" in e and f"{src}_fold_sd" in e and e[f"{src}_fold_sd"] > 0:
                ratios.append(e[f"{src}_sd"] / e[f"{src}_fold_sd"])
        if total:
            cov = inside / total
            unc[src] = {"coverage": float(cov), "n_fold_estimates": int(total),
                        "deviation_from_nominal_pp": float((cov - 0.95) * 100.0)}
        if ratios:
            unc.setdefault(src, {})["median_dispersion_ratio"] = float(np.median(ratios))
    if unc:
        block["uncertainty"] = unc
    return block


def stability_diagnostics(icdn_records: pd.DataFrame, bench_records: pd.DataFrame,
                          icdn_metrics: pd.DataFrame | None = None,
                          bench_metrics: pd.DataFrame | None = None) -> dict:
    """Own/cross stability and generalization comparison of the two sources.

    Elasticity records are first collapsed over weeks within each
    (store, i, j, fold/replicate) key; bootstrap intervals are percentile
    2.5-97.5 across replicates; fold stability needs >= 3 fold estimates.
    Paired generalization deltas are descriptive (t and signed-rank).
    """
    records = pd.concat([icdn_records, bench_records], ignore_index=True)
    collapsed = _collapse(records)
    foldest = _fold_estimates(collapsed)
    bootest = _boot_estimates(collapsed)

    folds_map: dict = {}
    for (src, store, i, j), g in foldest.groupby(["source", "store", "i", "j"]):
        folds_map[(src, (store, i, j))] = g["estimate"].to_numpy()
    boot_map: dict = {}
    for (src, store, i, j), g in bootest.groupby(["source", "store", "i", "j"]):
        boot_map[(src, (store, i, j))] = g["estimate"].to_numpy()

    all_keys = set(k for _, k in folds_map) | set(k for _, k in boot_map)

    def matched(keys):
        out = []
        for k in sorted(keys):
            has_i = ("icdn", k) in folds_map or ("icdn", k) in boot_map
            has_b = ("benchmark", k) in folds_map or ("benchmark", k) in boot_map
            if has_i and has_b:
                out.append(k)
        return out

    own_keys = matched([k for k in all_keys if k[1] == k[2]])
    cross_keys = matched([k for k in all_keys if k[1] != k[2]])

    def side(keys, positive):
        boot = {(s, k): boot_map.get((s, k)) for s in ("icdn", "benchmark") for k in keys}
        folds = {(s, k): folds_map.get((s, k)) for s in ("icdn", "benchmark") for k in keys}
        return _side_block({k: v for k, v in boot.items() if v is not None},
                           {k: v for k, v in folds.items() if v is not None},
                           keys, positive)

    report = {"own": side(own_keys, sign_positive=False),
              "cross": side(cross_keys, sign_positive=True)}

    if icdn_metrics is not None and bench_metrics is not None:
        report["generalization"] = _generalization_block(icdn_metrics, bench_metrics)
    return report


def _paired_stats(d: np.ndarray) -> dict:
    out = {"n": int(len(d)), "mean": float(np.mean(d)), "median": float(np.median(d))}
    if len(d) >= 2 and np.std(d) > 0:
        t = stats.ttest_rel(d, np.zeros_like(d))
        out["t_stat"] = float(t.statistic)
        out["t_pvalue"] = float(t.pvalue)
        nonzero = d[d != 0]
        if len(nonzero):
            w = stats.wilcoxon(nonzero)
            out["wilcoxon_pvalue"] = float(w.pvalue)
    return out


def _generalization_block(icdn_metrics: pd.DataFrame, bench_metrics: pd.DataFrame) -> dict:
    """Fold-level and (store, upc, fold)-level paired metric deltas."""
    block: dict = {}
    gi = icdn_metrics[icdn_metrics["scope"] == "fold"]
    gi = gi.groupby("fold", as_index=False)[["r2", "mae", "rmse"]].mean()  # seeds averaged
    gb = bench_metrics[bench_metrics["scope"] == "fold"]
    gb = gb.groupby("fold", as_index=False)[["r2", "mae", "rmse"]].mean()
    m = gi.merge(gb, on="fold", suffixes=("_icdn", "_bench")).dropna()
    if len(m):
        block["folds"] = {
            "n": int(len(m)),
            "delta_r2": _paired_stats((m["r2_icdn"] - m["r2_bench"]).to_numpy()),
            "delta_mae": _paired_stats((m["mae_icdn"] - m["mae_bench"]).to_numpy()),
            "delta_rmse": _paired_stats((m["rmse_icdn"] - m["rmse_bench"]).to_numpy()),
        }
    si = icdn_metrics[icdn_metrics["scope"] == "series"]
    si = si.groupby(["store", "upc", "fold"], as_index=False)[["mae", "rmse"]].mean()
    sb = bench_metrics[bench_metrics["scope"] == "series"]
    sb = sb.groupby(["store", "upc", "fold"], as_index=False)[["mae", "rmse"]].mean()
    t = si.merge(sb, on=["store", "upc", "fold"], suffixes=("_icdn", "_bench")).dropna()
    if len(t):
        dm = (t["mae_icdn"] - t["mae_bench"]).to_numpy()
        dr = (t["rmse_icdn"] - t["rmse_bench"]).to_numpy()
        block["triplets"] = {
            "n": int(len(t)),
            "win_rate_mae_icdn": _win_rate(t["mae_icdn"].to_numpy(), t["mae_bench"].to_numpy()),
            "win_rate_rmse_icdn": _win_rate(t["rmse_icdn"].to_numpy(), t["rmse_bench"].to_numpy()),
            "delta_mae": _paired_stats(dm),
            "delta_rmse": _paired_stats(dr),
        }
    return block
