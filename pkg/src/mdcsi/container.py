"""Single-array container files.

Layout::

    [8 bytes]  header length L, unsigned little-endian
    [L bytes]  UTF-8 JSON header (magic "MDCSI/1")
    [rest]     payload, little-endian float64, row-major

The header carries shape, axis names and whatever pipeline metadata applies
(schedule table, spectral grid and weights, mask, provenance). Floats are
written with their shortest round-trip representation, so re-reading a header
reproduces every value exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from numpy.typing import NDArray

from .model import ContrastEncoding, SpectralGrid
from .phantom import MeasuredDataset
from .solver import SpectroscopicImage

MAGIC = "MDCSI/1"
DTYPE = "f64le"
_LEN = struct.Struct("<Q")


class ContainerError(ValueError):
    pass


def write_container(path: str | os.PathLike, array: NDArray, header: Mapping[str, Any],
                    *, force: bool = True) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    hdr = dict(header)
    hdr.update(magic=MAGIC, dtype=DTYPE, shape=list(arr.shape))
    blob = json.dumps(hdr, sort_keys=True, allow_nan=False).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)
    return path


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    raw = fh.read(_LEN.size)
    if len(raw) != _LEN.size:
        raise ContainerError(f"{path}: truncated header length")
    (n,) = _LEN.unpack(raw)
    blob = fh.read(n)
    if len(blob) != n:
        raise ContainerError(f"{path}: truncated header")
    try:
        hdr = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: header is not valid JSON ({exc})") from exc
    if hdr.get("magic") != MAGIC:
        raise ContainerError(f"{path}: bad magic {hdr.get('magic')!r}")
    if hdr.get("dtype") != DTYPE:
        raise ContainerError(f"{path}: unsupported dtype {hdr.get('dtype')!r}")
    return hdr


def read_container(path: str | os.PathLike) -> tuple[NDArray[np.float64], dict]:
    with open(path, "rb") as fh:
        hdr = _read_header(fh, path)
        payload = fh.read()
    shape = tuple(int(s) for s in hdr["shape"])
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != 8 * count:
        raise ContainerError(f"{path}: payload has {len(payload)} bytes, shape {shape} needs {8 * count}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return arr, hdr


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# -- typed helpers -------------------------------------------------------------------

def schedule_table(schedule) -> list[dict]:
    return [{"te_ms": e.te, "ti_ms": e.ti} for e in schedule]


def schedule_from_table(rows) -> tuple[ContrastEncoding, ...]:
    return tuple(ContrastEncoding(te=float(r["te_ms"]), ti=None if r.get("ti_ms") is None else float(r["ti_ms"]))
                 for r in rows)


def grid_header(grid: SpectralGrid) -> dict:
    return {"t1_ms": grid.t1_values.tolist(), "t2_ms": grid.t2_values.tolist(),
            "weights": grid.weights.tolist(), "order": "t1-major"}


def grid_from_header(d: Mapping) -> SpectralGrid:
    return SpectralGrid(np.array(d["t1_ms"]), np.array(d["t2_ms"]), np.array(d["weights"]))


def _mask_list(mask) -> list[int]:
    return [int(x) for x in np.asarray(mask).ravel()]


def write_dataset(path, ds: MeasuredDataset, provenance: Mapping | None = None, **kw) -> Path:
    header = {
        "kind": "dataset",
        "axes": ["encoding", "voxel"],
        "units": {"te": "ms", "ti": "ms"},
        "width": ds.width, "height": ds.height,
        "voxel_order": "row-major (y, x)",
        "schedule": schedule_table(ds.schedule),
        "mask": _mask_list(ds.mask),
        "meta": _jsonable(ds.meta),
        "provenance": dict(provenance or {}),
    }
    return write_container(path, ds.data, header, **kw)


def read_dataset(path) -> MeasuredDataset:
    arr, hdr = read_container(path)
    if hdr.get("kind") != "dataset":
        raise ContainerError(f"{path}: expected a dataset file, found {hdr.get('kind')!r}")
    return MeasuredDataset(arr, schedule_from_table(hdr["schedule"]), int(hdr["width"]),
                           int(hdr["height"]), np.array(hdr["mask"], dtype=np.float64),
                           meta=dict(hdr.get("meta", {})))


def write_image(path, image: SpectroscopicImage, provenance: Mapping | None = None,
                kind: str = "spectroscopic_image", **kw) -> Path:
    header = {
        "kind": kind,
        "axes": ["atom", "voxel"],
        "units": {"t1": "ms", "t2": "ms"},
        "width": image.width, "height": image.height,
        "voxel_order": "row-major (y, x)",
        "grid": grid_header(image.grid),
        "mask": _mask_list(image.mask) if image.mask is not None else None,
        "provenance": dict(provenance or {}),
    }
    return write_container(path, image.values, header, **kw)


def read_image(path) -> SpectroscopicImage:
    arr, hdr = read_container(path)
    if hdr.get("kind") not in ("spectroscopic_image", "ground_truth"):
        raise ContainerError(f"{path}: expected a spectroscopic image, found {hdr.get('kind')!r}")
    mask = hdr.get("mask")
    return SpectroscopicImage(arr, grid_from_header(hdr["grid"]), int(hdr["width"]), int(hdr["height"]),
                              mask=None if mask is None else np.array(mask, dtype=np.float64))


def write_maps(path, maps: NDArray, labels, regions=None, provenance: Mapping | None = None, **kw) -> Path:
    """Stack of named (height, width) planes."""
    maps = np.asarray(maps, dtype=np.float64)
    header = {
        "kind": "maps",
        "axes": ["plane", "y", "x"],
        "planes": list(labels),
        "regions": regions or [],
        "provenance": dict(provenance or {}),
    }
    return write_container(path, maps, header, **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
