"""End-to-end evaluation runs: forecast a split with a model or baseline,
score every minicube, aggregate into a ScoreTable with horizon curves, and
compare against the climatology reference."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .baselines import baseline_forecast
from .data import CubeDataset
from .errors import InsufficientDataError
from .evaluation import (
    ScoreTable,
    aggregate,
    apply_pixel_permutation,
    horizon_rmse,
    outperformance,
    score_minicube,
)
from .models import ModelConfig

BASELINES = ("persistence", "prevyear", "climatology")

_SEASON_BY_MONTH = {1: "MAM", 2: "MAM", 3: "MAM", 4: "MAM", 5: "MJJ",
                    6: "MJJ", 7: "JAS", 8: "JAS", 9: "SON", 10: "SON",
                    11: "SON", 12: "SON"}


def dataset_hash(root) -> str:
    """Fingerprint of the generated benchmark (its splits.json)."""
    blob = (Path(root) / "splits.json").read_bytes()
    return hashlib.sha256(blob).hexdigest()[:12]


def _model_predict_fn(model):
    model.eval()

    def predict(batch: dict) -> np.ndarray:
        with torch.no_grad():
            out = model(
                torch.from_numpy(batch["frames"]),
                torch.from_numpy(batch["weather"]),
                weather_maps=(torch.from_numpy(batch["weather_maps"])
                              if "weather_maps" in batch else None),
            )
        return out["pred"].clamp(-1.0, 1.0).numpy().astype(np.float32)

    return predict


def evaluate_forecaster(dataset: CubeDataset, predict_fn, model_id: str,
                        config_hash: str = "", batch_size: int = 8,
                        shuffle_seed: int | None = None,
                        weather_maps: bool = False) -> ScoreTable:
    """Score predict_fn over every cube of the dataset.

    With a shuffle seed the model consumes spatially shuffled batches and
    the predictions are mapped back to source pixels before scoring, so the
    per-pixel series alignment (and minicube attribution) is preserved.
    """
    scores = []
    reasons: dict[str, int] = {}
    h_target, h_forecast, h_valid = [], [], []
    n = len(dataset)
    for i0 in range(0, n, batch_size):
        idx = list(range(i0, min(i0 + batch_size, n)))
        shuffled = shuffle_seed is not None
        batch = dataset.build_batch(
            idx, shuffle_space=shuffled,
            shuffle_seed=(shuffle_seed or 0) + i0, weather_maps=weather_maps,
        )
        preds = predict_fn(batch)
        if shuffled:
            preds = apply_pixel_permutation(preds, batch["permutation"],
                                            inverse=True)
        for j, ci in enumerate(idx):
            cube = dataset.cubes[ci]
            scores.extend(score_minicube(cube, preds[j], reasons_out=reasons))
            t = cube.context_length
            veg_valid = (cube.valid_mask()[t:] > 0)
            h_target.append(cube.ndvi[t:].reshape(cube.target_length, -1))
            h_forecast.append(preds[j].reshape(cube.target_length, -1))
            h_valid.append(veg_valid.reshape(cube.target_length, -1))
    table = aggregate(scores, cube_ids=[c.location_id for c in dataset.cubes])
    scalar, curve = horizon_rmse(
        np.concatenate(h_target, axis=1),
        np.concatenate(h_forecast, axis=1),
        np.concatenate(h_valid, axis=1),
    )
    table.horizon_rmse = scalar
    table.horizon_curve = [float(v) for v in curve]
    table.reasons = reasons
    table.model_id = model_id
    table.config_hash = config_hash
    table.seasons = {
        c.location_id: _SEASON_BY_MONTH[int(c.time_axis[c.context_length][5:7])]
        for c in dataset.cubes
    }
    return table


def evaluate_model(dataset: CubeDataset, model, batch_size: int = 8,
                   shuffle_seed: int | None = None) -> ScoreTable:
    config: ModelConfig = model.config
    uses_maps = (config.family in ("convlstm-meteo", "lstm-1x1")
                 and config.meteo and config.conditioning.method == "none"
                 and shuffle_seed is not None)
    return evaluate_forecaster(
        dataset, _model_predict_fn(model), model_id=config.family,
        config_hash=config.config_hash(), batch_size=batch_size,
        shuffle_seed=shuffle_seed, weather_maps=uses_maps,
    )


def evaluate_baseline(dataset: CubeDataset, name: str,
                      batch_size: int = 8) -> ScoreTable:
    if name not in BASELINES:
        raise InsufficientDataError(f"unknown baseline {name!r}")

    def predict(batch: dict) -> np.ndarray:
        preds = []
        for ci in batch["indices"]:
            out, _ = baseline_forecast(name, dataset.cubes[ci])
            preds.append(out)
        return np.stack(preds)

    return evaluate_forecaster(dataset, predict, model_id=name,
                               config_hash=name, batch_size=batch_size)


def attach_outperformance(table: ScoreTable, reference: ScoreTable) -> ScoreTable:
    """Set table.outperformance against the reference's per-minicube rows
    (cubes missing on either side are excluded pairwise)."""
    shared = sorted(set(table.per_minicube) & set(reference.per_minicube))
    model_rows = {k: table.per_minicube[k] for k in shared}
    ref_rows = {k: reference.per_minicube[k] for k in shared}
    table.outperformance = outperformance(model_rows, ref_rows)
    return table
