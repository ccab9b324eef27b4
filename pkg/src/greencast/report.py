"""Figure rendering from ScoreTable summaries: horizon-RMSE curves,
per-landcover and per-season bars, and per-minicube score maps."""
from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractViolationError
from .minicube import LANDCOVER_CLASSES


def load_summaries(paths) -> list[dict]:
    out = []
    for p in paths:
        d = json.loads(Path(p).read_text())
        d["_path"] = str(p)
        out.append(d)
    if not out:
        raise ContractViolationError("no summaries to report on")
    return out


def check_same_dataset(summaries: list[dict], allow_mixed: bool = False) -> None:
    hashes = {s.get("dataset_hash", "") for s in summaries}
    if len(hashes) > 1 and not allow_mixed:
        raise ContractViolationError(
            f"summaries come from different datasets {sorted(hashes)}; "
            "pass --allow-mixed to combine them"
        )


def _save(fig, path: Path) -> str:
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_horizon_curves(summaries: list[dict], out_dir: Path) -> str | None:
    curves = [(s["model_id"], s.get("horizon_curve") or []) for s in summaries]
    curves = [(m, c) for m, c in curves if c]
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for model_id, curve in curves:
        days = 5 * (np.arange(len(curve)) + 1)
        vals = [v if v is not None else math.nan for v in curve]
        ax.plot(days, vals, marker="o", markersize=3, label=model_id)
    ax.set_xlabel("prediction horizon [days]")
    ax.set_ylabel("RMSE")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / "horizon_rmse.png")


def plot_landcover_bars(summaries: list[dict], out_dir: Path,
                        metric: str = "rmse") -> str | None:
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(summaries))
    any_bar = False
    classes = sorted(
        {int(k) for s in summaries for k in s.get("landcover_means", {})}
    )
    for i, s in enumerate(summaries):
        means = s.get("landcover_means", {})
        vals = [means.get(str(c), {}).get(metric, math.nan) for c in classes]
        if not classes:
            continue
        any_bar = True
        ax.bar(np.arange(len(classes)) + i * width, vals, width,
               label=s["model_id"])
    if not any_bar:
        plt.close(fig)
        return None
    ax.set_xticks(np.arange(len(classes)) + 0.4 - width / 2)
    ax.set_xticklabels([LANDCOVER_CLASSES.get(c, str(c)) for c in classes])
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / f"landcover_{metric}.png")


def plot_season_bars(summaries: list[dict], out_dir: Path,
                     metric: str = "rmse") -> str | None:
    """Per-season bars, grouping minicubes by their target-period start."""
    order = ("MAM", "MJJ", "JAS", "SON")
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(1, len(summaries))
    any_bar = False
    for i, s in enumerate(summaries):
        seasons = s.get("seasons", {})
        groups: dict[str, list[float]] = {}
        for cid, row in s.get("per_minicube", {}).items():
            season = seasons.get(cid)
            if season:
                groups.setdefault(season, []).append(row[metric])
        if not groups:
            continue
        any_bar = True
        vals = [float(np.mean(groups[k])) if k in groups else math.nan
                for k in order]
        ax.bar(np.arange(4) + i * width, vals, width, label=s["model_id"])
    if not any_bar:
        plt.close(fig)
        return None
    ax.set_xticks(np.arange(4) + 0.4 - width / 2)
    ax.set_xticklabels(order)
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / f"season_{metric}.png")


def plot_score_maps(summaries: list[dict], out_dir: Path,
                    metric: str = "rmse") -> str | None:
    """One colored cell per minicube, one panel per model."""
    fig, axes = plt.subplots(1, len(summaries),
                             figsize=(3.2 * len(summaries), 3.2), squeeze=False)
    drew = False
    for ax, s in zip(axes[0], summaries):
        rows = s.get("per_minicube", {})
        if not rows:
            ax.axis("off")
            continue
        drew = True
        ids = sorted(rows)
        vals = np.array([rows[c][metric] for c in ids])
        side = math.ceil(math.sqrt(len(vals)))
        grid = np.full(side * side, np.nan)
        grid[: len(vals)] = vals
        im = ax.imshow(grid.reshape(side, side), cmap="viridis")
        ax.set_title(f"{s['model_id']} ({metric})", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    if not drew:
        plt.close(fig)
        return None
    fig.tight_layout()
    return _save(fig, out_dir / f"score_map_{metric}.png")


def render_report(summary_paths, out_dir, allow_mixed: bool = False) -> dict:
    """Render all figures; returns a manifest of written files. Empty tables
    produce a warning entry instead of plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = load_summaries(summary_paths)
    check_same_dataset(summaries, allow_mixed=allow_mixed)
    files = {}
    warnings = []
    if all(not s.get("per_minicube") for s in summaries):
        warnings.append("all score tables are empty; no plots rendered")
    else:
        for name, fn in (
            ("horizon", plot_horizon_curves),
            ("landcover", plot_landcover_bars),
            ("season", plot_season_bars),
            ("score_map", plot_score_maps),
        ):
            path = fn(summaries, out)
            if path:
                files[name] = path
            else:
                warnings.append(f"no data for {name} plot")
    manifest = {
        "inputs": [s["_path"] for s in summaries],
        "dataset_hashes": sorted({s.get("dataset_hash", "") for s in summaries}),
        "files": files,
        "warnings": warnings,
    }
    (out / "report.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
