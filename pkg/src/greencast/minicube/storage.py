"""Portable on-disk minicube format.

A minicube is a directory with a `manifest.json` (dims, dtype, variable
list, time axis, identifiers) plus one raw little-endian float32 row-major
binary file per variable. Round trips are bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .core import Minicube

FORMAT_VERSION = 1

_CUBE_VARS = (
    "sat_red",
    "sat_nir",
    "ndvi",
    "quality",
    "landcover_mask",
    "landcover_class",
    "weather",
    "elevation",
)
_HISTORY_VARS = ("history_ndvi", "history_quality")


def _write_var(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_var(path: Path, dims: list[int], name: str) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing payload file for variable {name!r}: {path}")
    raw = path.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise FormatError(
            f"variable {name!r}: payload has {len(raw)} bytes, "
            f"manifest dims {dims} require {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


def save_minicube(cube: Minicube, path: str | Path) -> None:
    """Write one minicube directory; overwrites existing variable files."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    variables = {}
    names = _CUBE_VARS + tuple(
        v for v in _HISTORY_VARS if getattr(cube, v) is not None
    )
    for name in names:
        arr = np.asarray(getattr(cube, name))
        _write_var(out / f"{name}.bin", arr)
        variables[name] = list(arr.shape)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "location_id": cube.location_id,
        "split_tag": cube.split_tag,
        "context_length": cube.context_length,
        "time_axis": list(cube.time_axis),
        "weather_variables": list(cube.weather_variables),
        "variables": variables,
    }
    if cube.history_times is not None:
        manifest["history_times"] = list(cube.history_times)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )


def load_minicube(path: str | Path) -> Minicube:
    """Read a minicube directory; raises FormatError on any inconsistency."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"missing manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest in {root}: {e}") from e
    for key in ("variables", "time_axis", "location_id", "split_tag"):
        if key not in manifest:
            raise FormatError(f"manifest in {root} lacks {key!r}")
    variables = manifest["variables"]
    arrays = {}
    for name in _CUBE_VARS:
        if name not in variables:
            raise FormatError(f"manifest in {root} lacks variable {name!r}")
        arrays[name] = _read_var(root / f"{name}.bin", variables[name], name)
    history = {}
    for name in _HISTORY_VARS:
        if name in variables:
            history[name] = _read_var(root / f"{name}.bin", variables[name], name)
    cube = Minicube(
        **arrays,
        time_axis=list(manifest["time_axis"]),
        context_length=int(manifest["context_length"]),
        location_id=manifest["location_id"],
        split_tag=manifest["split_tag"],
        weather_variables=list(manifest.get("weather_variables", [])),
        history_ndvi=history.get("history_ndvi"),
        history_quality=history.get("history_quality"),
        history_times=manifest.get("history_times"),
    )
    try:
        cube.validate()
    except Exception as e:
        raise FormatError(f"minicube in {root} fails validation: {e}") from e
    return cube
