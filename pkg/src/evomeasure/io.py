"""File formats: CSV tables, the binary frame, measures, configs and sidecars."""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import sys
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .measures import EmpiricalMeasure
from .model import site_indices

__all__ = [
    "FRAME_MAGIC",
    "write_csv",
    "read_csv",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_frame",
    "read_frame",
    "write_measure_csv",
    "read_measure_csv",
    "write_json",
    "read_json",
    "load_toml",
    "dump_toml",
    "sha256_file",
]

FRAME_MAGIC = b"EVMF"
FRAME_VERSION = 1


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """UTF-8 CSV; floats written with ``repr`` so they parse back exactly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _parse(v: str):
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path) -> tuple[list[str], list[list]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[_parse(v) for v in row] for row in r]


def write_trajectory_csv(path, times, states) -> Path:
    states = np.asarray(states)
    I = (states.shape[1] - 1) // 2
    sites = site_indices(I)

    def rows():
        for t, u in zip(times, states):
            for i, v in zip(sites, u):
                yield (float(t), int(i), float(v))

    return write_csv(path, ("t", "i", "value"), rows())


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    header, rows = read_csv(path)
    if header != ["t", "i", "value"]:
        raise ValueError(f"unexpected trajectory header {header}")
    arr = np.array(rows, dtype=float)
    times = np.unique(arr[:, 0])
    n_sites = int(arr.shape[0] // len(times))
    return times, arr[:, 2].reshape(len(times), n_sites)


def write_frame(path, array) -> Path:
    """Binary frame: magic, u32 version, u32 ndim, u64 dims, little-endian float64 data."""
    a = np.ascontiguousarray(array, dtype="<f8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<II", FRAME_VERSION, a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes())
    return path


def read_frame(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FRAME_MAGIC:
        raise ValueError("not a binary frame (bad magic)")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != FRAME_VERSION:
        raise ValueError(f"unsupported frame version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", data, 12)
    offset = 12 + 8 * ndim
    return np.frombuffer(data, dtype="<f8", offset=offset, count=int(np.prod(shape))).reshape(shape).copy()


def write_measure_csv(path, mu: EmpiricalMeasure, sidecar: bool = True) -> Path:
    """``weight,site_-I,...,site_I`` rows plus a JSON provenance sidecar."""
    I = mu.trunc_radius
    header = ["weight"] + [f"site_{i}" for i in site_indices(I)]
    path = write_csv(path, header, (np.concatenate([[w], a]) for w, a in zip(mu.weights, mu.atoms)))
    if sidecar:
        write_json(path.with_suffix(".provenance.json"), mu.provenance)
    return path


def read_measure_csv(path) -> EmpiricalMeasure:
    path = Path(path)
    header, rows = read_csv(path)
    if not header or header[0] != "weight":
        raise ValueError("measure CSV must start with a weight column")
    arr = np.array(rows, dtype=float)
    side = path.with_suffix(".provenance.json")
    prov = read_json(side) if side.exists() else {}
    return EmpiricalMeasure(arr[:, 1:], arr[:, 0], prov)


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def load_toml(path) -> dict:
    with Path(path).open("rb") as fh:
        return tomllib.load(fh)


def dump_toml(obj: dict) -> str:
    return tomli_w.dumps(_jsonable(obj))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
