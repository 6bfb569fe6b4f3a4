"""Weekly retail panel pipeline.

Raw register rows -> per-liter log prices and log demand -> identification
filters -> outlier trimming -> calendar-completed feature panel -> wide
store-week instances ready for the model.  Also hosts the seeded synthetic
panel generator whose ground-truth elasticities back the recovery tests.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
import pandas as pd

from .model import Universe
from .util import rng_stream

LITERS_PER_OZ = 0.0295735
LITERS_PER_GAL = 3.78541

RAW_COLUMNS = (
    "store_code", "upc_code", "week_id", "units_sold", "total_price",
    "units_per_deal", "pack_size_text", "promo_b", "promo_s", "promo_c",
    "exclude_flag", "brand_family", "style_segment", "category_code",
)

_BOOL_TOKENS = {"0": False, "1": True, "true": True, "false": False,
                "TRUE": True, "FALSE": False, "True": True, "False": False}

_PACK_RE = re.compile(r"(?:(\d+)/)?(\d+(?:\.\d+)?)(OZ|ML|L|GAL)")

# canonical numeric token features, in the order they enter the encoder
NUMERIC_FEATURES = [
    "on_promo", "promo_intensity_store_week", "week_rank",
    "sin_52", "cos_52", "sin_26", "cos_26", "sin_13", "cos_13",
    "weeks_since_first_seen_upc", "weeks_since_first_seen_store_upc",
    "lag_1", "lag_2", "lag_4", "roll_4", "roll_13",
    "n_neighbors_sw_cat", "neighbor_promo_share_sw_cat",
    "n_same_brand_neighbors_sw_cat", "same_brand_neighbor_promo_share_sw_cat",
    "lag1_neighbor_mean", "lag1_same_brand_neighbor_mean", "roll4_neighbor_mean",
    "store_category_upc_count_static", "same_brand_upc_count_store_cat_static",
    "n_new_neighbors_13w", "share_new_neighbors_13w",
    "log_liters_per_upc",
]

MISS_FLAGS = [
    "miss_lag_1", "miss_lag_2", "miss_lag_4", "miss_roll_4", "miss_roll_13",
    "miss_lag1_neighbor_mean", "miss_roll4_neighbor_mean",
    "miss_lag1_same_brand_neighbor_mean",
]

# features of an absent (store, week, upc) cell that are still well defined
_CALENDAR_FEATURES = ["week_rank", "sin_52", "cos_52", "sin_26", "cos_26", "sin_13", "cos_13"]
_STATIC_FEATURES = ["store_category_upc_count_static", "same_brand_upc_count_store_cat_static",
                    "log_liters_per_upc"]

FILTER_RULES = ("min_weeks", "coverage", "distinct_prices", "price_changes",
                "log_range", "promo_corr", "promo_switch_share")


class PanelParseError(ValueError):
    """Malformed raw CSV (bad header, bad cell, domain violation)."""


class DuplicateKeyError(ValueError):
    """Two raw rows share the same (store, week, upc)."""


class UnitParseError(ValueError):
    """Pack-size text does not match any known pattern."""


class InsufficientDataError(ValueError):
    """Not enough data to carry out the requested construction."""


@dataclass(frozen=True)
class RawRow:
    store_code: str
    upc_code: str
    week_id: int
    units_sold: float
    total_price: float
    units_per_deal: int
    pack_size_text: str
    promo_b: bool
    promo_s: bool
    promo_c: bool
    exclude_flag: bool
    brand_family: str
    style_segment: str
    category_code: str


@dataclass(frozen=True)
class FilterConfig:
    min_price: float = 0.05
    min_store_weeks: int = 150
    min_weeks: int = 52
    min_coverage: float = 0.75
    min_distinct_prices: int = 3
    min_price_changes: int = 5
    min_log_range: float = 0.15
    max_promo_corr: float = 0.80
    max_promo_switch_share: float = 0.80
    iqr_multiplier: float = 1.5
    min_outlier_rows: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DropReport:
    n_input: int = 0
    zero_units: int = 0
    below_min_price: int = 0
    excluded: int = 0
    n_output: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FilterReport:
    n_stores_in: int = 0
    stores_removed: int = 0
    n_series_in: int = 0
    removed_by_rule: dict = dc_field(default_factory=lambda: {r: 0 for r in FILTER_RULES})
    n_series_out: int = 0
    n_rows_out: int = 0

    def to_dict(self) -> dict:
        return {"n_stores_in": self.n_stores_in, "stores_removed": self.stores_removed,
                "n_series_in": self.n_series_in, "removed_by_rule": dict(self.removed_by_rule),
                "n_series_out": self.n_series_out, "n_rows_out": self.n_rows_out}


@dataclass
class OutlierReport:
    n_input: int = 0
    n_dropped: int = 0
    groups_skipped: int = 0  # UPCs with too few rows to estimate quartiles

    def to_dict(self) -> dict:
        return asdict(self)


# -- parsing ---------------------------------------------------------------------


def parse_pack_size(text: str) -> float:
    """Total liters per retail unit from pack-size text.

    Accepts ``COUNT/QTY UNIT`` or ``QTY UNIT`` with units OZ, ML, L, GAL
    (case and embedded spaces ignored), e.g. ``"6/12OZ"`` -> 6*12 fluid
    ounces.  Raises UnitParseError otherwise.
    """
    cleaned = str(text).strip().upper().replace(" ", "")
    m = _PACK_RE.fullmatch(cleaned)
    if m is None:
        raise UnitParseError(f"unparseable pack size: {text!r}")
    count = int(m.group(1)) if m.group(1) else 1
    qty = float(m.group(2))
    unit = m.group(3)
    liters = count * qty * {"OZ": LITERS_PER_OZ, "ML": 1e-3, "L": 1.0, "GAL": LITERS_PER_GAL}[unit]
    if liters <= 0.0:
        raise UnitParseError(f"nonpositive volume in pack size: {text!r}")
    return liters


def _parse_bool(cell: str, line: int, col: str) -> bool:
    try:
        return _BOOL_TOKENS[cell.strip()]
    except KeyError:
        raise PanelParseError(f"line {line}: column {col!r} has non-boolean value {cell!r}") from None


def load_panel(path: str) -> list:
    """Parse a raw panel CSV into validated rows.

    Enforces the full column set, numeric domains (nonnegative units and
    prices, units_per_deal >= 1) and (store, week, upc) uniqueness.  Errors
    carry the 1-based line number of the offending row.
    """
    rows: list[RawRow] = []
    seen: set = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise PanelParseError("empty file: no header row")
        missing = [c for c in RAW_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise PanelParseError(f"missing required columns: {missing}")
        for rec in reader:
            line = reader.line_num
            if any(rec.get(c) is None for c in RAW_COLUMNS):
                raise PanelParseError(f"line {line}: wrong number of fields")
            try:
                week_id = int(rec["week_id"])
                units_sold = float(rec["units_sold"])
                total_price = float(rec["total_price"])
                units_per_deal = int(rec["units_per_deal"])
            except ValueError as exc:
                raise PanelParseError(f"line {line}: {exc}") from None
            if units_sold < 0:
                raise PanelParseError(f"line {line}: units_sold must be >= 0, got {units_sold}")
            if total_price < 0:
                raise PanelParseError(f"line {line}: total_price must be >= 0, got {total_price}")
            if units_per_deal < 1:
                raise PanelParseError(f"line {line}: units_per_deal must be >= 1, got {units_per_deal}")
            store, upc = rec["store_code"].strip(), rec["upc_code"].strip()
            if not store or not upc:
                raise PanelParseError(f"line {line}: empty store_code or upc_code")
            key = (store, week_id, upc)
            if key in seen:
                raise DuplicateKeyError(f"line {line}: duplicate (store, week, upc) = {key}")
            seen.add(key)
            rows.append(RawRow(
                store_code=store, upc_code=upc, week_id=week_id,
                units_sold=units_sold, total_price=total_price,
                units_per_deal=units_per_deal, pack_size_text=rec["pack_size_text"],
                promo_b=_parse_bool(rec["promo_b"], line, "promo_b"),
                promo_s=_parse_bool(rec["promo_s"], line, "promo_s"),
                promo_c=_parse_bool(rec["promo_c"], line, "promo_c"),
                exclude_flag=_parse_bool(rec["exclude_flag"], line, "exclude_flag"),
                brand_family=rec["brand_family"].strip(),
                style_segment=rec["style_segment"].strip(),
                category_code=rec["category_code"].strip(),
            ))
    return rows


def normalize_units(rows, min_price: float = 0.05):
    """Deal-corrected per-liter quantities and log coordinates.

    Drops zero-unit rows, rows at or below the price floor, and excluded
    rows, in that order of attribution.  Returns ``(panel, DropReport)``.
    """
    report = DropReport(n_input=len(rows))
    out = []
    for r in rows:
        if r.units_sold == 0:
            report.zero_units += 1
            continue
        if r.total_price <= min_price:
            report.below_min_price += 1
            continue
        if r.exclude_flag:
            report.excluded += 1
            continue
        liters = parse_pack_size(r.pack_size_text)
        price_per_unit = r.total_price / r.units_per_deal
        p_liter = price_per_unit / liters
        q_liters = r.units_sold * liters
        out.append({
            "store_code": r.store_code, "upc_code": r.upc_code, "week_id": r.week_id,
            "liters_per_upc": liters, "price_per_liter": p_liter, "liters_sold": q_liters,
            "u": math.log(p_liter), "y": math.log(q_liters),
            "on_promo": bool(r.promo_b or r.promo_s or r.promo_c),
            "brand_family": r.brand_family, "style_segment": r.style_segment,
            "category_code": r.category_code,
        })
    report.n_output = len(out)
    columns = ["store_code", "upc_code", "week_id", "liters_per_upc", "price_per_liter",
               "liters_sold", "u", "y", "on_promo", "brand_family", "style_segment",
               "category_code"]
    panel = pd.DataFrame(out, columns=columns)
    return panel, report


# -- identification filters --------------------------------------------------------


def _series_failure(g: pd.DataFrame, cfg: FilterConfig) -> str | None:
    """First rule the (store, upc) series violates, or None if it passes."""
    g = g.sort_values("week_id")
    weeks = g["week_id"].to_numpy()
    n = len(weeks)
    if n < cfg.min_weeks:
        return "min_weeks"
    span = weeks[-1] - weeks[0] + 1
    if n / span < cfg.min_coverage:
        return "coverage"
    prices = g["price_per_liter"].to_numpy()
    if len(np.unique(prices)) < cfg.min_distinct_prices:
        return "distinct_prices"
    changed = prices[1:] != prices[:-1]
    if changed.sum() < cfg.min_price_changes:
        return "price_changes"
    u = g["u"].to_numpy()
    if u.max() - u.min() < cfg.min_log_range:
        return "log_range"
    promo = g["on_promo"].to_numpy().astype(float)
    if np.std(u) > 0 and np.std(promo) > 0:
        corr = float(np.corrcoef(u, promo)[0, 1])
        if abs(corr) > cfg.max_promo_corr:
            return "promo_corr"
    if changed.sum() > 0:
        switched = promo[1:] != promo[:-1]
        share = float((changed & switched).sum() / changed.sum())
        if share > cfg.max_promo_switch_share:
            return "promo_switch_share"
    return None


def apply_filters(panel: pd.DataFrame, cfg: FilterConfig = FilterConfig()):
    """Store- then series-level identification filters.

    Stores need a minimum number of distinct observed weeks; each surviving
    (store, upc) series must clear length, coverage, price-variation and
    promo-confounding rules.  A failing series is attributed to the first
    rule it violates, in the documented rule order.
    """
    report = FilterReport()
    store_weeks = panel.groupby("store_code")["week_id"].nunique()
    report.n_stores_in = len(store_weeks)
    good_stores = store_weeks[store_weeks >= cfg.min_store_weeks].index
    report.stores_removed = int(report.n_stores_in - len(good_stores))
    panel = panel[panel["store_code"].isin(good_stores)]

    kept = []
    for _, g in panel.groupby(["store_code", "upc_code"], sort=True):
        report.n_series_in += 1
        rule = _series_failure(g, cfg)
        if rule is None:
            kept.append(g)
        else:
            report.removed_by_rule[rule] += 1
    out = pd.concat(kept, ignore_index=True) if kept else panel.iloc[0:0].copy()
    report.n_series_out = len(kept)
    report.n_rows_out = len(out)
    return out.sort_values(["store_code", "upc_code", "week_id"], ignore_index=True), report


def remove_price_outliers(panel: pd.DataFrame, cfg: FilterConfig = FilterConfig()):
    """Trim log-prices beyond the quartile fences within each UPC.

    Fences are [Q1 - m*IQR, Q3 + m*IQR] on ``u`` pooled across stores; UPCs
    with fewer rows than ``min_outlier_rows`` are left untouched.
    """
    report = OutlierReport(n_input=len(panel))
    keep = np.ones(len(panel), dtype=bool)
    for _, idx in panel.groupby("upc_code").indices.items():
        u = panel["u"].to_numpy()[idx]
        if len(idx) < cfg.min_outlier_rows:
            report.groups_skipped += 1
            continue
        q1, q3 = np.percentile(u, [25.0, 75.0])
        iqr = q3 - q1
        lo, hi = q1 - cfg.iqr_multiplier * iqr, q3 + cfg.iqr_multiplier * iqr
        keep[idx] = (u >= lo) & (u <= hi)
    report.n_dropped = int((~keep).sum())
    return panel[keep].reset_index(drop=True), report


# -- calendar + features ------------------------------------------------------------


def complete_calendar(panel: pd.DataFrame) -> pd.DataFrame:
    """Insert flagged synthetic rows so every series spans its weeks gap-free.

    Weeks absent from the whole dataset are inserted like any internal gap.
    Synthetic rows carry NaN economics and ``is_synthetic_row=True``.
    """
    pieces = []
    for (store, upc), g in panel.groupby(["store_code", "upc_code"], sort=True):
        g = g.sort_values("week_id")
        full = pd.RangeIndex(g["week_id"].iloc[0], g["week_id"].iloc[-1] + 1)
        g = g.set_index("week_id").reindex(full)
        g.index.name = "week_id"
        g["is_synthetic_row"] = g["store_code"].isna()
        g["store_code"] = store
        g["upc_code"] = upc
        for col in ("brand_family", "style_segment", "category_code"):
            g[col] = g[col].ffill().bfill()
        g["liters_per_upc"] = g["liters_per_upc"].ffill().bfill()
        pieces.append(g.reset_index())
    return pd.concat(pieces, ignore_index=True)


def engineer_features(panel: pd.DataFrame, last_train_week: int | None = None) -> pd.DataFrame:
    """Build the modeling feature panel from a cleaned panel.

    All lag/rolling features at week t use strictly earlier weeks of the
    calendar-completed series; current-week peer aggregates are allowed.
    Static assortment counts use weeks <= ``last_train_week`` when given, so
    split-dependent statistics never peek past the training range.  Undefined
    features are stored as 0 with their miss_* flag set.  Returns observed
    rows only.
    """
    if len(panel) == 0:
        raise InsufficientDataError("empty panel")
    comp = complete_calendar(panel)
    week_order = np.sort(comp["week_id"].unique())
    rank_map = {int(w): i + 1 for i, w in enumerate(week_order)}
    comp["week_rank"] = comp["week_id"].map(rank_map)
    for period in (52, 26, 13):
        ang = 2.0 * np.pi * comp["week_rank"] / period
        comp[f"sin_{period}"] = np.sin(ang)
        comp[f"cos_{period}"] = np.cos(ang)

    comp = comp.sort_values(["store_code", "upc_code", "week_id"], ignore_index=True)
    grp = comp.groupby(["store_code", "upc_code"], sort=False)["y"]
    for lag in (1, 2, 4):
        comp[f"lag_{lag}"] = grp.shift(lag)
    for win in (4, 13):
        comp[f"roll_{win}"] = grp.transform(
            lambda s: s.shift(1).rolling(win, min_periods=1).mean())

    fp = comp[~comp["is_synthetic_row"]].copy()

    first_upc = fp.groupby("upc_code")["week_id"].transform("min")
    fp["weeks_since_first_seen_upc"] = fp["week_id"] - first_upc
    first_su = fp.groupby(["store_code", "upc_code"])["week_id"].transform("min")
    fp["weeks_since_first_seen_store_upc"] = fp["week_id"] - first_su

    fp["promo_intensity_store_week"] = fp.groupby(["store_code", "week_id"])["on_promo"].transform("mean")

    fp = _peer_aggregates(fp)
    fp = _static_counts(fp, last_train_week)
    fp["log_liters_per_upc"] = np.log(fp["liters_per_upc"])
    fp["on_promo"] = fp["on_promo"].astype(float)

    for col, flag in (("lag_1", "miss_lag_1"), ("lag_2", "miss_lag_2"),
                      ("lag_4", "miss_lag_4"), ("roll_4", "miss_roll_4"),
                      ("roll_13", "miss_roll_13"),
                      ("lag1_neighbor_mean", "miss_lag1_neighbor_mean"),
                      ("roll4_neighbor_mean", "miss_roll4_neighbor_mean"),
                      ("lag1_same_brand_neighbor_mean", "miss_lag1_same_brand_neighbor_mean")):
        fp[flag] = fp[col].isna().astype(float)
        fp[col] = fp[col].fillna(0.0)
    fp["is_synthetic_row"] = False
    return fp.sort_values(["store_code", "week_id", "upc_code"], ignore_index=True)


def _peer_aggregates(fp: pd.DataFrame) -> pd.DataFrame:
    """Same store-week-category peer features, focal row excluded."""
    key = ["store_code", "week_id", "category_code"]
    g = fp.groupby(key)
    size = g["upc_code"].transform("size")
    promo_sum = g["on_promo"].transform("sum")
    fp["n_neighbors_sw_cat"] = (size - 1).astype(float)
    n_nb = fp["n_neighbors_sw_cat"]
    fp["neighbor_promo_share_sw_cat"] = np.where(
        n_nb > 0, (promo_sum - fp["on_promo"].astype(float)) / n_nb.clip(lower=1), 0.0)

    bkey = key + ["brand_family"]
    bg = fp.groupby(bkey)
    bsize = bg["upc_code"].transform("size")
    bpromo = bg["on_promo"].transform("sum")
    fp["n_same_brand_neighbors_sw_cat"] = (bsize - 1).astype(float)
    n_bnb = fp["n_same_brand_neighbors_sw_cat"]
    fp["same_brand_neighbor_promo_share_sw_cat"] = np.where(
        n_bnb > 0, (bpromo - fp["on_promo"].astype(float)) / n_bnb.clip(lower=1), 0.0)

    for col, out_col, keys in (("lag_1", "lag1_neighbor_mean", key),
                               ("roll_4", "roll4_neighbor_mean", key),
                               ("lag_1", "lag1_same_brand_neighbor_mean", bkey)):
        grp = fp.groupby(keys)[col]
        total = grp.transform("sum")
        cnt = grp.transform("count")  # NaN-aware
        self_def = fp[col].notna().astype(float)
        self_val = fp[col].fillna(0.0)
        peer_cnt = cnt - self_def
        fp[out_col] = np.where(peer_cnt > 0, (total - self_val) / peer_cnt.clip(lower=1), np.nan)

    new = (fp["weeks_since_first_seen_store_upc"] <= 13).astype(float)
    new_sum = fp.assign(_new=new).groupby(key)["_new"].transform("sum")
    n_new_peers = new_sum - new
    fp["n_new_neighbors_13w"] = n_new_peers
    fp["share_new_neighbors_13w"] = np.where(n_nb > 0, n_new_peers / n_nb.clip(lower=1), 0.0)
    return fp


def _static_counts(fp: pd.DataFrame, last_train_week: int | None) -> pd.DataFrame:
    base = fp if last_train_week is None else fp[fp["week_id"] <= last_train_week]
    sc = base.groupby(["store_code", "category_code"])["upc_code"].nunique()
    sb = base.groupby(["store_code", "category_code", "brand_family"])["upc_code"].nunique()
    idx = pd.MultiIndex.from_frame(fp[["store_code", "category_code"]])
    fp["store_category_upc_count_static"] = sc.reindex(idx).fillna(0.0).to_numpy(dtype=float)
    bidx = pd.MultiIndex.from_frame(fp[["store_code", "category_code", "brand_family"]])
    fp["same_brand_upc_count_store_cat_static"] = sb.reindex(bidx).fillna(0.0).to_numpy(dtype=float)
    return fp


def smoothed_targets(fp: pd.DataFrame, window: int = 8) -> pd.DataFrame:
    """Replace y with a trailing rolling mean (current + prior observations)."""
    out = fp.sort_values(["store_code", "upc_code", "week_id"]).copy()
    out["y"] = (out.groupby(["store_code", "upc_code"])["y"]
                .transform(lambda s: s.rolling(window, min_periods=1).mean()))
    return out.sort_values(["store_code", "week_id", "upc_code"], ignore_index=True)


# -- universe, tokens, wide assembly --------------------------------------------------


def build_universe(fp: pd.DataFrame) -> Universe:
    """Ordered product axis + static metadata + categorical vocabularies."""
    if len(fp) == 0:
        raise InsufficientDataError("cannot build a universe from an empty panel")
    upcs = sorted(fp["upc_code"].unique())
    meta = fp.drop_duplicates("upc_code").set_index("upc_code")
    vocabs = {
        "store": {c: i + 1 for i, c in enumerate(sorted(fp["store_code"].unique()))},
        "upc": {c: i + 1 for i, c in enumerate(upcs)},
        "brand": {c: i + 1 for i, c in enumerate(sorted(fp["brand_family"].unique()))},
        "style": {c: i + 1 for i, c in enumerate(sorted(fp["style_segment"].unique()))},
        "category": {c: i + 1 for i, c in enumerate(sorted(fp["category_code"].unique()))},
    }
    return Universe(
        upcs=upcs,
        brand_id=np.array([vocabs["brand"][meta.at[u, "brand_family"]] for u in upcs]),
        style_id=np.array([vocabs["style"][meta.at[u, "style_segment"]] for u in upcs]),
        category_id=np.array([vocabs["category"][meta.at[u, "category_code"]] for u in upcs]),
        log_liters=np.array([math.log(meta.at[u, "liters_per_upc"]) for u in upcs]),
        vocabs=vocabs,
    )


def fit_spline_specs(fp_train: pd.DataFrame, universe: Universe, n_knots: int) -> list:
    from .spline import fit_spline_spec

    specs = []
    by_upc = dict(iter(fp_train.groupby("upc_code")["u"]))
    for upc in universe.upcs:
        if upc not in by_upc:
            raise InsufficientDataError(f"no training prices for {upc}")
        specs.append(fit_spline_spec(by_upc[upc].to_numpy(), n_knots))
    return specs


@dataclass
class TokenCodec:
    """Standardization recipe for numeric token features."""

    numeric: list
    flags: list
    means: np.ndarray
    sds: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.numeric) + len(self.flags)

    def transform(self, df: pd.DataFrame) -> np.ndarray:
        x = (df[self.numeric].to_numpy(dtype=float) - self.means) / self.sds
        return np.concatenate([x, df[self.flags].to_numpy(dtype=float)], axis=1)

    def to_dict(self) -> dict:
        return {"numeric": list(self.numeric), "flags": list(self.flags),
                "means": [float(v) for v in self.means], "sds": [float(v) for v in self.sds]}

    @staticmethod
    def from_dict(d: dict) -> "TokenCodec":
        return TokenCodec(numeric=list(d["numeric"]), flags=list(d["flags"]),
                          means=np.asarray(d["means"], dtype=float),
                          sds=np.asarray(d["sds"], dtype=float))


def fit_token_codec(fp_train: pd.DataFrame) -> TokenCodec:
    x = fp_train[NUMERIC_FEATURES].to_numpy(dtype=float)
    means = x.mean(axis=0)
    sds = x.std(axis=0)
    sds[sds < 1e-8] = 1.0  # constant feature -> standardized to 0, not inf
    return TokenCodec(numeric=list(NUMERIC_FEATURES), flags=list(MISS_FLAGS),
                      means=means, sds=sds)


@dataclass
class WideInstance:
    """One store-week: every universe product side by side."""

    store: str
    week_id: int
    u: np.ndarray     # (n,) log prices, imputed where unobserved
    y: np.ndarray     # (n,) log demand, NaN where unobserved
    mask: np.ndarray  # (n,) 1.0 observed
    cat: np.ndarray   # (n, 5) categorical ids
    num: np.ndarray   # (n, F) codec-transformed features


def assemble_wide(fp: pd.DataFrame, universe: Universe, codec: TokenCodec) -> list:
    """Pivot a feature panel into per-store-week wide instances.

    Log prices of unobserved products are imputed forward/backward along each
    store's weeks, then by the product's overall mean log price; a product
    never priced anywhere in ``fp`` is an error.  Products absent from a
    store-week get a default token: calendar and static fields filled, the
    rest zero with every miss flag raised.
    """
    n = universe.n
    fp = fp[fp["upc_code"].isin(universe.upcs)]
    if len(fp) == 0:
        raise InsufficientDataError("feature panel shares no products with the universe")
    col_mean = fp.groupby("upc_code")["u"].mean()
    missing_everywhere = [u for u in universe.upcs if u not in col_mean.index]
    if missing_everywhere:
        raise InsufficientDataError(f"products never priced in this split: {missing_everywhere}")

    cat_base = np.stack([
        np.zeros(n, dtype=np.int64),  # store slot, filled per store
        np.array([universe.vocabs["upc"][u] for u in universe.upcs]),
        universe.brand_id, universe.style_id, universe.category_id,
    ], axis=1)

    static_cols = {u: {} for u in universe.upcs}
    instances = []
    for store, sdf in fp.groupby("store_code", sort=True):
        weeks = np.sort(sdf["week_id"].unique())
        upivot = sdf.pivot_table(index="week_id", columns="upc_code", values="u", aggfunc="first")
        upivot = upivot.reindex(index=weeks, columns=universe.upcs)
        upivot = upivot.ffill().bfill()
        for upc in universe.upcs:
            if upivot[upc].isna().all():
                upivot[upc] = col_mean[upc]
        umat = upivot.to_numpy(dtype=float)

        ypivot = sdf.pivot_table(index="week_id", columns="upc_code", values="y", aggfunc="first")
        ypivot = ypivot.reindex(index=weeks, columns=universe.upcs)
        ymat = ypivot.to_numpy(dtype=float)
        mask = (~np.isnan(ymat)).astype(float)

        # default numeric rows: calendar + static features real, dynamics 0 + flags
        week_cal = sdf.drop_duplicates("week_id").set_index("week_id")[_CALENDAR_FEATURES]
        stat = sdf.drop_duplicates("upc_code").set_index("upc_code")[_STATIC_FEATURES]
        week_groups = {int(k): g for k, g in sdf.groupby("week_id")}
        upc_pos = {u: i for i, u in enumerate(universe.upcs)}

        cat_store = cat_base.copy()
        cat_store[:, 0] = universe.vocabs["store"].get(store, 0)
        feat_index = {name: i for i, name in enumerate(codec.numeric)}
        flag_offset = len(codec.numeric)

        default = np.zeros((n, codec.n_features))
        default[:, flag_offset:] = 1.0  # all miss flags raised
        for col in _STATIC_FEATURES:
            j = feat_index[col]
            for i, upc in enumerate(universe.upcs):
                if upc in stat.index:
                    raw = float(stat.at[upc, col])
                elif col == "log_liters_per_upc":
                    raw = float(universe.log_liters[i])
                else:
                    raw = 0.0
                default[i, j] = (raw - codec.means[j]) / codec.sds[j]

        for wi, week in enumerate(weeks):
            num = default.copy()
            for col in _CALENDAR_FEATURES:
                j = feat_index[col]
                raw = float(week_cal.at[int(week), col])
                num[:, j] = (raw - codec.means[j]) / codec.sds[j]
            rows = week_groups[int(week)]
            encoded = codec.transform(rows)
            for r, upc in enumerate(rows["upc_code"]):
                num[upc_pos[upc]] = encoded[r]
            instances.append(WideInstance(
                store=store, week_id=int(week), u=umat[wi], y=ymat[wi],
                mask=mask[wi], cat=cat_store, num=num))
    instances = [w for w in instances if w.mask.sum() > 0]
    instances.sort(key=lambda w: (w.store, w.week_id))
    return instances


# -- synthetic generator ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_products: int = 5
    n_stores: int = 3
    n_weeks: int = 200
    first_week: int = 1
    own_lo: float = -3.0
    own_hi: float = -1.0
    cross_scale: float = 0.5
    base_log_demand: float = 3.0
    base_price_lo: float = 3.0
    base_price_hi: float = 8.0
    walk_scale: float = 0.08
    walk_bound: float = 0.35
    promo_rate: float = 0.15
    promo_discount: float = 0.10
    noise_sd: float = 0.0
    n_brands: int = 2
    n_styles: int = 2
    n_categories: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def generate_synthetic_panel(cfg: SynthConfig, seed: int,
                             epsilon=None, cross=None):
    """Seeded raw panel with constant-elasticity ground truth.

    Prices follow bounded log random walks with occasional promo discounts;
    log demand is the constant-elasticity closed form plus optional noise.
    Pack sizes are one liter, so per-liter and per-unit coordinates agree.
    Returns ``(raw DataFrame, ground_truth dict)``.
    """
    if cfg.n_products < 2 or cfg.n_stores < 1 or cfg.n_weeks < 2:
        raise ValueError("need at least 2 products, 1 store, 2 weeks")
    rng = rng_stream(seed, "data")
    n = cfg.n_products
    if epsilon is None:
        epsilon = rng.uniform(cfg.own_lo, cfg.own_hi, size=n)
    epsilon = np.asarray(epsilon, dtype=float)
    if cross is None:
        cross = rng.uniform(-cfg.cross_scale, cfg.cross_scale, size=(n, n))
        np.fill_diagonal(cross, 0.0)
    cross = np.asarray(cross, dtype=float)
    if epsilon.shape != (n,) or cross.shape != (n, n) or np.any(np.diag(cross) != 0.0):
        raise ValueError("epsilon must be (n,) and cross (n, n) with zero diagonal")

    u0 = np.log(rng.uniform(cfg.base_price_lo, cfg.base_price_hi, size=n))
    v0 = cfg.base_log_demand + rng.uniform(-0.5, 0.5, size=n)
    E = cross.copy()
    E[np.arange(n), np.arange(n)] = epsilon

    upcs = [f"UPC{i + 1:03d}" for i in range(n)]
    brands = [f"BR{i % cfg.n_brands + 1}" for i in range(n)]
    styles = [f"ST{i % cfg.n_styles + 1}" for i in range(n)]
    cats = [f"CAT{i % cfg.n_categories + 1}" for i in range(n)]

    records = []
    weeks = np.arange(cfg.first_week, cfg.first_week + cfg.n_weeks)
    for s in range(cfg.n_stores):
        store = f"S{s + 1:02d}"
        walk = np.empty((cfg.n_weeks, n))
        level = u0.copy()
        for t in range(cfg.n_weeks):
            level = np.clip(level + rng.normal(0.0, cfg.walk_scale, size=n),
                            u0 - cfg.walk_bound, u0 + cfg.walk_bound)
            walk[t] = level
        promo = rng.random((cfg.n_weeks, n)) < cfg.promo_rate
        u_eff = walk + np.log1p(-cfg.promo_discount) * promo
        noise = rng.normal(0.0, cfg.noise_sd, size=(cfg.n_weeks, n)) if cfg.noise_sd > 0 else 0.0
        y = v0 + (u_eff - u0) @ E.T + noise
        for t, week in enumerate(weeks):
            for i in range(n):
                records.append({
                    "store_code": store, "upc_code": upcs[i], "week_id": int(week),
                    "units_sold": float(np.exp(y[t, i])), "total_price": float(np.exp(u_eff[t, i])),
                    "units_per_deal": 1, "pack_size_text": "1L",
                    "promo_b": bool(promo[t, i]), "promo_s": False, "promo_c": False,
                    "exclude_flag": False, "brand_family": brands[i],
                    "style_segment": styles[i], "category_code": cats[i],
                })
    raw = pd.DataFrame(records, columns=list(RAW_COLUMNS))
    truth = {
        "upcs": upcs,
        "epsilon": [float(v) for v in epsilon],
        "cross": [[float(v) for v in row] for row in cross],
        "baseline_log_price": [float(v) for v in u0],
        "baseline_log_demand": [float(v) for v in v0],
        "seed": int(seed),
        "config": cfg.to_dict(),
    }
    return raw, truth


def write_raw_csv(raw: pd.DataFrame, path: str) -> None:
    out = raw.copy()
    for col in ("promo_b", "promo_s", "promo_c", "exclude_flag"):
        out[col] = out[col].astype(int)
    out.to_csv(path, index=False)


def preprocess(rows, filter_cfg: FilterConfig = FilterConfig(),
               last_train_week: int | None = None):
    """Raw rows -> (cleaned panel, feature panel, reports dict)."""
    panel, drop_report = normalize_units(rows, min_price=filter_cfg.min_price)
    panel, filter_report = apply_filters(panel, filter_cfg)
    panel, outlier_report = remove_price_outliers(panel, filter_cfg)
    if len(panel) == 0:
        raise InsufficientDataError("no series survive the identification filters")
    fp = engineer_features(panel, last_train_week)
    reports = {"drops": drop_report.to_dict(), "filters": filter_report.to_dict(),
               "outliers": outlier_report.to_dict()}
    return panel, fp, reports
