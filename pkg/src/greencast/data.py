"""Dataset loading and batching: turns minicube directories into the tensor
batches the forecasters consume.

Frame channels per timestep: ndvi, red, nir, validity (quality and observed)
and elevation in kilometers; NaNs are zero-filled. Weather is aggregated to
per-step statistics. With spatial shuffling enabled, one permutation over
(batch x H x W) pixel columns is applied to every pixel-indexed array; for
models that consume weather as broadcast channel maps the maps are shuffled
too, so each pixel keeps its own drivers.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .evaluation import pixel_permutation, apply_pixel_permutation
from .minicube import Minicube, load_minicube, weather_stats_cube

ELEVATION_SCALE = 1000.0  # meters -> unit-scale channel


def frames_tensor(cube: Minicube, start: int, stop: int) -> np.ndarray:
    """[stop-start, 5, H, W] float32 channel stack for model input."""
    ndvi = cube.ndvi[start:stop]
    red = cube.sat_red[start:stop]
    nir = cube.sat_nir[start:stop]
    observed = np.isfinite(ndvi)
    validity = (cube.quality[start:stop] * observed).astype(np.float32)
    elev = np.broadcast_to(
        cube.elevation / ELEVATION_SCALE, ndvi.shape
    ).astype(np.float32)
    stack = np.stack(
        [np.nan_to_num(ndvi), np.nan_to_num(red), np.nan_to_num(nir),
         validity, elev], axis=1
    )
    return stack.astype(np.float32)


class CubeDataset:
    """All minicubes of one split, loaded eagerly with precomputed tensors."""

    def __init__(self, root, split: str, limit: int | None = None):
        self.root = Path(root)
        self.split = split
        manifest_path = self.root / "splits.json"
        if not manifest_path.exists():
            raise FormatError(f"no splits.json under {self.root}")
        manifest = json.loads(manifest_path.read_text())
        names = manifest["cubes"].get(split, [])
        if limit is not None:
            names = names[:limit]
        self.cube_names = names
        self.cubes = [load_minicube(self.root / n) for n in names]
        if not self.cubes:
            raise FormatError(f"split {split!r} is empty under {self.root}")
        self._frames = []
        self._target_frames = []
        self._weather = []
        for cube in self.cubes:
            t = cube.context_length
            self._frames.append(frames_tensor(cube, 0, t))
            self._target_frames.append(frames_tensor(cube, t, cube.n_steps))
            self._weather.append(weather_stats_cube(cube.weather))

    def __len__(self) -> int:
        return len(self.cubes)

    def build_batch(self, indices, shuffle_space: bool = False,
                    shuffle_seed: int = 0, weather_maps: bool = False) -> dict:
        cubes = [self.cubes[i] for i in indices]
        t = cubes[0].context_length
        batch = {
            "frames": np.stack([self._frames[i] for i in indices]),
            "target_frames": np.stack([self._target_frames[i] for i in indices]),
            "weather": np.stack([self._weather[i] for i in indices]),
            "target": np.stack([c.ndvi[t:] for c in cubes]),
            "target_quality": np.stack([
                (c.quality[t:] * np.isfinite(c.ndvi[t:])).astype(np.float32)
                for c in cubes
            ]),
            "landcover_mask": np.stack([c.landcover_mask for c in cubes]),
            "ids": [c.location_id for c in cubes],
            "indices": list(indices),
        }
        if shuffle_space and weather_maps:
            w = batch["weather"]  # [B, S, V, 4]
            b, s = w.shape[:2]
            h, wd = batch["frames"].shape[-2:]
            maps = w.reshape(b, s, -1)[:, :, :, None, None]
            batch["weather_maps"] = np.ascontiguousarray(
                np.broadcast_to(maps, (b, s, maps.shape[2], h, wd)),
                dtype=np.float32,
            )
        if shuffle_space:
            b = batch["frames"].shape[0]
            h, wd = batch["frames"].shape[-2:]
            perm = pixel_permutation(b * h * wd, shuffle_seed)
            for key in ("frames", "target_frames", "target", "target_quality",
                        "landcover_mask", "weather_maps"):
                if key in batch:
                    batch[key] = apply_pixel_permutation(batch[key], perm)
            batch["permutation"] = perm
        return batch

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                shuffle_space: bool = False, weather_maps: bool = False):
        """Yield batches; with an rng the cube order is reshuffled, and each
        spatially shuffled batch gets its own seeded permutation."""
        order = np.arange(len(self.cubes))
        if rng is not None:
            order = rng.permutation(order)
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            seed = int(rng.integers(2 ** 31)) if rng is not None else i + 1
            yield self.build_batch(idx, shuffle_space=shuffle_space,
                                   shuffle_seed=seed, weather_maps=weather_maps)
