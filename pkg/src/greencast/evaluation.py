"""Scoring protocol: per-pixel metrics, filters, class-balanced aggregation,
Outperformance vs. climatology, horizon curves, the spatial-shuffle harness,
a Wilcoxon signed-rank test and the GPP downstream linear model.

All metrics are computed per pixel over clear-sky target timesteps, then
grouped by (minicube, landcover), averaged per landcover and macro-averaged
across landcover classes so that class imbalance does not skew the result.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InsufficientDataError
from .minicube import (
    DAYS_PER_STEP,
    LANDCOVER_CLASSES,
    VEGETATED_CLASSES,
    Minicube,
)

METRICS = ("r2", "rmse", "nse", "abs_bias")

#: minimum score difference (higher-is-better orientation) that counts as a
#: win when comparing against the climatology
OUTPERFORMANCE_THRESHOLDS = {"rmse": 0.01, "abs_bias": 0.01, "nse": 0.05, "r2": 0.05}

#: pixel-filter thresholds
MIN_TARGET_OBS = 10
MIN_CONTEXT_OBS = 3
MIN_NDVI_STD = 0.1

FILTER_REASONS = ("ok", "landcover", "flooding", "count_target", "count_context",
                  "variation", "degenerate")


@dataclass
class PixelScore:
    minicube_id: str
    landcover: int
    row: int
    col: int
    r2: float
    rmse: float
    nse: float
    abs_bias: float
    n_target_valid: int
    n_context_valid: int

    def metric(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class ScoreTable:
    """Aggregated scores: (minicube, landcover) rows up to the macro-average."""

    rows: list[dict] = field(default_factory=list)
    landcover_means: dict[int, dict] = field(default_factory=dict)
    macro: dict[str, float] = field(default_factory=dict)
    per_minicube: dict[str, dict] = field(default_factory=dict)
    horizon_curve: list[float] = field(default_factory=list)
    horizon_rmse: float = float("nan")
    outperformance: float | None = None
    reasons: dict[str, int] = field(default_factory=dict)
    seasons: dict[str, str] = field(default_factory=dict)
    n_pixels: int = 0
    model_id: str = ""
    config_hash: str = ""
    dataset_hash: str = ""


def pixel_metrics(target: np.ndarray, forecast: np.ndarray,
                  valid: np.ndarray) -> dict | None:
    """Metrics for one pixel series over its valid timesteps.

    R^2 is the squared Pearson correlation, NSE uses the population variance
    of the target, |bias| the absolute difference of the means. Returns None
    when fewer than two valid steps remain or the target variance is zero
    (NSE/R^2 undefined); a constant forecast gets r2 = 0.
    """
    target = np.asarray(target, dtype=np.float64)
    forecast = np.asarray(forecast, dtype=np.float64)
    valid = np.asarray(valid).astype(bool)
    if target.shape != forecast.shape or target.shape != valid.shape:
        raise ContractViolationError("series/validity shape mismatch")
    v = target[valid]
    f = forecast[valid]
    if v.size < 2:
        return None
    var_v = v.var()
    if var_v == 0.0:
        return None
    mse = float(((v - f) ** 2).mean())
    var_f = f.var()
    if var_f == 0.0:
        r2 = 0.0
    else:
        cov = float(((v - v.mean()) * (f - f.mean())).mean())
        r2 = cov * cov / (var_v * var_f)
    return {
        "r2": r2,
        "rmse": math.sqrt(mse),
        "nse": 1.0 - mse / var_v,
        "abs_bias": abs(float(v.mean() - f.mean())),
    }


def pixel_filter(cube: Minicube) -> tuple[np.ndarray, np.ndarray]:
    """Eligibility mask plus per-pixel reason codes (indices into FILTER_REASONS).

    A pixel is kept iff it has a vegetated landcover, min valid NDVI > 0,
    at least MIN_TARGET_OBS valid target and MIN_CONTEXT_OBS valid context
    observations, and valid-NDVI standard deviation above MIN_NDVI_STD.
    """
    t = cube.context_length
    valid = (cube.quality > 0) & np.isfinite(cube.ndvi)
    ndvi = np.where(valid, cube.ndvi, np.nan)
    n_ctx = valid[:t].sum(axis=0)
    n_tgt = valid[t:].sum(axis=0)
    with np.errstate(all="ignore"):
        vmin = np.nanmin(np.where(valid, cube.ndvi, np.inf), axis=0)
        std = np.nanstd(ndvi, axis=0)
    reason = np.zeros(cube.ndvi.shape[1:], dtype=np.int8)
    veg = np.isin(cube.landcover_class, VEGETATED_CLASSES)
    reason[~veg] = FILTER_REASONS.index("landcover")
    sel = reason == 0
    reason[sel & ~(vmin > 0)] = FILTER_REASONS.index("flooding")
    sel = reason == 0
    reason[sel & (n_tgt < MIN_TARGET_OBS)] = FILTER_REASONS.index("count_target")
    sel = reason == 0
    reason[sel & (n_ctx < MIN_CONTEXT_OBS)] = FILTER_REASONS.index("count_context")
    sel = reason == 0
    reason[sel & ~(std > MIN_NDVI_STD)] = FILTER_REASONS.index("variation")
    return reason == 0, reason


def score_minicube(cube: Minicube, forecast_ndvi: np.ndarray,
                   reasons_out: dict | None = None) -> list[PixelScore]:
    """PixelScores for all eligible pixels of one minicube."""
    t = cube.context_length
    if forecast_ndvi.shape != cube.ndvi[t:].shape:
        raise ContractViolationError(
            f"forecast shape {forecast_ndvi.shape} does not match target "
            f"{cube.ndvi[t:].shape}"
        )
    keep, reason = pixel_filter(cube)
    valid = (cube.quality > 0) & np.isfinite(cube.ndvi)
    n_ctx = valid[:t].sum(axis=0)
    scores = []
    target = cube.ndvi[t:]
    tvalid = valid[t:]
    lc = cube.landcover_class.astype(int)
    for r, c in np.argwhere(keep):
        m = pixel_metrics(target[:, r, c], forecast_ndvi[:, r, c], tvalid[:, r, c])
        if m is None:
            reason[r, c] = FILTER_REASONS.index("degenerate")
            continue
        scores.append(PixelScore(
            minicube_id=cube.location_id, landcover=lc[r, c], row=int(r),
            col=int(c), n_target_valid=int(tvalid[:, r, c].sum()),
            n_context_valid=int(n_ctx[r, c]), **m,
        ))
    if reasons_out is not None:
        for code, name in enumerate(FILTER_REASONS):
            n = int((reason == code).sum())
            if n:
                reasons_out[name] = reasons_out.get(name, 0) + n
    return scores


def _mean_metrics(groups: list[dict]) -> dict[str, float]:
    return {m: float(np.mean([g[m] for g in groups])) for m in METRICS}


def aggregate(scores: list[PixelScore], cube_ids: list[str] | None = None) -> ScoreTable:
    """Mean within (minicube, landcover), then landcover, then macro-average.

    ``cube_ids`` pins per-cube row order (and keeps empty cubes visible);
    defaults to sorted ids present in the scores.
    """
    table = ScoreTable(n_pixels=len(scores))
    if not scores and not cube_ids:
        return table
    by_cube_lc: dict[tuple[str, int], list[dict]] = {}
    for s in scores:
        rec = {m: s.metric(m) for m in METRICS}
        by_cube_lc.setdefault((s.minicube_id, s.landcover), []).append(rec)
    for (cid, lc) in sorted(by_cube_lc):
        row = {"minicube_id": cid, "landcover": lc,
               "landcover_name": LANDCOVER_CLASSES.get(lc, str(lc)),
               "n_pixels": len(by_cube_lc[(cid, lc)])}
        row.update(_mean_metrics(by_cube_lc[(cid, lc)]))
        table.rows.append(row)
    by_lc: dict[int, list[dict]] = {}
    by_cube: dict[str, list[dict]] = {}
    for row in table.rows:
        by_lc.setdefault(row["landcover"], []).append(row)
        by_cube.setdefault(row["minicube_id"], []).append(row)
    table.landcover_means = {lc: _mean_metrics(rows) for lc, rows in sorted(by_lc.items())}
    if table.landcover_means:
        table.macro = _mean_metrics(list(table.landcover_means.values()))
    ids = cube_ids if cube_ids is not None else sorted(by_cube)
    table.per_minicube = {
        cid: _mean_metrics(by_cube[cid]) for cid in ids if cid in by_cube
    }
    return table


def outperformance(model_rows: dict[str, dict], reference_rows: dict[str, dict]) -> float:
    """Fraction of minicubes where the model beats the reference on >= 3 of
    the 4 metrics by more than the per-metric threshold (strict inequality,
    higher-is-better orientation: RMSE and |bias| are negated)."""
    if set(model_rows) != set(reference_rows):
        raise ContractViolationError("model/reference rows are not aligned")
    if not model_rows:
        raise ContractViolationError("no minicube rows to compare")
    n_better = 0
    for cid in model_rows:
        wins = 0
        for m in METRICS:
            sign = -1.0 if m in ("rmse", "abs_bias") else 1.0
            diff = sign * (model_rows[cid][m] - reference_rows[cid][m])
            if diff > OUTPERFORMANCE_THRESHOLDS[m]:
                wins += 1
        if wins >= 3:
            n_better += 1
    return n_better / len(model_rows)


def horizon_rmse(target: np.ndarray, forecast: np.ndarray, valid: np.ndarray,
                 horizon_days: int = 25) -> tuple[float, np.ndarray]:
    """(pooled RMSE within the horizon, full per-step RMSE curve).

    Arrays are [K, ...]; the scalar pools squared errors over the first
    horizon_days // DAYS_PER_STEP steps.
    """
    target = np.asarray(target, dtype=np.float64)
    forecast = np.asarray(forecast, dtype=np.float64)
    valid = np.asarray(valid).astype(bool)
    k = target.shape[0]
    n_steps = min(k, max(1, horizon_days // DAYS_PER_STEP))
    if horizon_days > k * DAYS_PER_STEP:
        raise ContractViolationError("horizon exceeds the target period")
    sq = np.where(valid, (target - forecast) ** 2, 0.0).reshape(k, -1)
    cnt = valid.reshape(k, -1).sum(axis=1)
    with np.errstate(invalid="ignore"):
        curve = np.sqrt(sq.sum(axis=1) / np.where(cnt > 0, cnt, np.nan))
    head_cnt = cnt[:n_steps].sum()
    scalar = math.sqrt(sq[:n_steps].sum() / head_cnt) if head_cnt else float("nan")
    return scalar, curve


def pixel_permutation(n_pixels: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n_pixels)


def apply_pixel_permutation(arr: np.ndarray, perm: np.ndarray,
                            inverse: bool = False) -> np.ndarray:
    """Apply one permutation over (batch x H x W) pixel columns to an array
    of shape [B, ..., H, W]; time/channel axes travel with their pixel."""
    b, h, w = arr.shape[0], arr.shape[-2], arr.shape[-1]
    if perm.size != b * h * w:
        raise ContractViolationError("permutation size does not match batch")
    mid = arr.shape[1:-2]
    cols = arr.reshape(b, -1, h * w).transpose(0, 2, 1).reshape(b * h * w, -1)
    if inverse:
        out = np.empty_like(cols)
        out[perm] = cols
    else:
        out = cols[perm]
    return (
        out.reshape(b, h * w, -1).transpose(0, 2, 1).reshape((b,) + mid + (h, w))
    )


def spatial_shuffle(batch: dict[str, np.ndarray], seed: int
                    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Shuffle pixel columns across space and batch, identically for every
    array in the batch. Returns the shuffled batch and the permutation so
    callers can map results back to source pixels."""
    if not batch:
        raise ContractViolationError("empty batch")
    ref = next(iter(batch.values()))
    b, h, w = ref.shape[0], ref.shape[-2], ref.shape[-1]
    for name, arr in batch.items():
        if arr.shape[0] != b or arr.shape[-2:] != (h, w):
            raise ContractViolationError(f"array {name!r} has mismatched pixel axes")
    perm = pixel_permutation(b * h * w, seed)
    return {k: apply_pixel_permutation(v, perm) for k, v in batch.items()}, perm


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str

    def __iter__(self):
        return iter((self.statistic, self.p_value))


def wilcoxon_signed_rank(diffs, exact_max_n: int = 20) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zeros are dropped, tied |differences| get average ranks. For n <=
    exact_max_n the p-value enumerates the exact sign distribution (via a
    rank-sum count table); above that a normal approximation with tie and
    continuity correction is used.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(float("nan"), float("nan"), 0, "undefined")
    if n < 5:
        raise ContractViolationError("need at least 5 nonzero differences")
    order = np.abs(d)
    ranks = _average_ranks(order)
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    stat = min(w_pos, w_neg)
    if n <= exact_max_n:
        p = _exact_two_sided_p(ranks, stat)
        method = "exact"
    else:
        p = _normal_two_sided_p(ranks, stat, n)
        method = "normal"
    return WilcoxonResult(stat, min(1.0, p), n, method)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sv = values[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks: np.ndarray, stat: float) -> float:
    # doubled ranks are integers even with .5 average ranks
    doubled = np.rint(2 * ranks).astype(int)
    total = doubled.sum()
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts += shifted
    w2 = int(round(2 * stat))
    tail = counts[: w2 + 1].sum() / counts.sum()
    return 2.0 * tail


def _normal_two_sided_p(ranks: np.ndarray, stat: float, n: int) -> float:
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var <= 0:
        return 1.0
    z = (stat + 0.5 - mean) / math.sqrt(var)  # continuity correction
    return math.erfc(-z / math.sqrt(2.0))


@dataclass
class GppFit:
    slope: float
    intercept: float
    r2: float


def gpp_fit(ndvi, gpp) -> GppFit:
    """Ordinary least squares GPP = slope * NDVI + intercept."""
    x = np.asarray(ndvi, dtype=np.float64).ravel()
    y = np.asarray(gpp, dtype=np.float64).ravel()
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 2:
        raise InsufficientDataError("need at least 2 paired points")
    vx = x.var()
    if vx == 0.0:
        raise ContractViolationError("zero NDVI variance, fit undefined")
    slope = float(((x - x.mean()) * (y - y.mean())).mean() / vx)
    intercept = float(y.mean() - slope * x.mean())
    vy = y.var()
    if vy == 0.0:
        r2 = 1.0
    else:
        cov = float(((x - x.mean()) * (y - y.mean())).mean())
        r2 = cov * cov / (vx * vy)
    return GppFit(slope, intercept, r2)


def gpp_predict(fit: GppFit, ndvi) -> np.ndarray:
    """Map any NDVI source (array or Forecast) to GPP."""
    arr = getattr(ndvi, "ndvi_hat", ndvi)
    return fit.slope * np.asarray(arr, dtype=np.float64) + fit.intercept


def write_score_table(table: ScoreTable, prefix) -> tuple[str, str]:
    """Serialize: <prefix>_scores.csv (one row per minicube x landcover) and
    <prefix>_summary.json (aggregates, horizon curve, reason histogram)."""
    from pathlib import Path

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + "_scores.csv")
    json_path = prefix.with_name(prefix.name + "_summary.json")
    cols = ["minicube_id", "landcover", "landcover_name", "n_pixels",
            *METRICS, "model_id", "config_hash"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in table.rows:
            out = dict(row)
            out["model_id"] = table.model_id
            out["config_hash"] = table.config_hash
            for m in METRICS:
                out[m] = f"{row[m]:.10g}"
            writer.writerow(out)
    summary = {
        "model_id": table.model_id,
        "config_hash": table.config_hash,
        "dataset_hash": table.dataset_hash,
        "macro": table.macro,
        "landcover_means": {str(k): v for k, v in table.landcover_means.items()},
        "per_minicube": table.per_minicube,
        "horizon_rmse": table.horizon_rmse,
        "horizon_curve": [None if math.isnan(v) else v for v in table.horizon_curve],
        "outperformance": table.outperformance,
        "reasons": table.reasons,
        "seasons": table.seasons,
        "n_pixels": table.n_pixels,
    }
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return str(csv_path), str(json_path)


def read_summary(path) -> dict:
    return json.loads(open(path).read())
