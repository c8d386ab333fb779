"""Field snapshots, sidecar manifests and run manifests.

Snapshot formats
----------------
``csv``
    Header ``k,i,j,value`` then one row per entry in k-major lexicographic
    order, values with 17 significant digits.
``raw``
    A 32-byte header (magic ``MFGF0001`` then ``K, N, N`` as little-endian
    uint64) followed by the values as little-endian float64 in k-major order.

Every snapshot ``name.ext`` gets a sidecar ``name.ext.json`` holding the
format, shape and SHA-256 of the data file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"MFGF0001"
HEADER = struct.Struct("<8sQQQ")
FORMATS = ("csv", "raw")


class SnapshotError(IOError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_field_snapshot(field: np.ndarray, path, fmt: str = "raw") -> Path:
    """Write a ``(K, N, N)`` field and its sidecar; returns the data path."""
    field = np.asarray(field, dtype=float)
    if field.ndim == 2:
        field = field[None]
    if field.ndim != 3:
        raise ValueError(f"expected a (K, N, N) field, got shape {field.shape}")
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    path = Path(path)
    K, n1, n2 = field.shape
    try:
        if fmt == "raw":
            with open(path, "wb") as fh:
                fh.write(HEADER.pack(MAGIC, K, n1, n2))
                fh.write(np.ascontiguousarray(field, dtype="<f8").tobytes())
        else:
            k, i, j = np.indices(field.shape).reshape(3, -1)
            with open(path, "w", newline="") as fh:
                fh.write("k,i,j,value\n")
                fh.writelines(
                    f"{a},{b},{c},{v:.17g}\n" for a, b, c, v in zip(k, i, j, field.ravel())
                )
        meta = {"format": fmt, "shape": [K, n1, n2], "sha256": _sha256(path)}
        sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise SnapshotError(f"cannot write snapshot {path}: {exc}") from exc
    return path


def _detect_format(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(8)
    return "raw" if head == MAGIC else "csv"


def read_field_snapshot(path, verify: bool = True) -> np.ndarray:
    """Read a snapshot written by :func:`write_field_snapshot`.

    With ``verify`` the sidecar checksum and shape are checked and a
    :class:`SnapshotError` is raised on any mismatch.
    """
    path = Path(path)
    meta = None
    try:
        if verify:
            meta = json.loads(sidecar_path(path).read_text())
            digest = _sha256(path)
            if digest != meta.get("sha256"):
                raise SnapshotError(f"checksum mismatch for {path}")
        fmt = meta["format"] if meta else _detect_format(path)
        if fmt == "raw":
            data = path.read_bytes()
            if len(data) < HEADER.size:
                raise SnapshotError(f"{path}: truncated header")
            magic, K, n1, n2 = HEADER.unpack_from(data)
            if magic != MAGIC:
                raise SnapshotError(f"{path}: bad magic {magic!r}")
            count = K * n1 * n2
            if len(data) != HEADER.size + 8 * count:
                raise SnapshotError(f"{path}: size does not match header shape {(K, n1, n2)}")
            field = np.frombuffer(data, dtype="<f8", offset=HEADER.size).astype(float)
            field = field.reshape(K, n1, n2)
        else:
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                if header != ["k", "i", "j", "value"]:
                    raise SnapshotError(f"{path}: unexpected csv header {header}")
                rows = np.array([[float(x) for x in row] for row in reader])
            if rows.size == 0:
                raise SnapshotError(f"{path}: no data rows")
            idx = rows[:, :3].astype(int)
            shape = tuple(int(s) for s in idx.max(axis=0) + 1)
            field = np.full(shape, np.nan)
            field[idx[:, 0], idx[:, 1], idx[:, 2]] = rows[:, 3]
            if np.isnan(field).any():
                raise SnapshotError(f"{path}: missing entries")
    except (OSError, ValueError, KeyError, struct.error) as exc:
        if isinstance(exc, SnapshotError):
            raise
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    if meta is not None and list(field.shape) != list(meta["shape"]):
        raise SnapshotError(f"{path}: shape {field.shape} differs from sidecar {meta['shape']}")
    return field


def snapshot_info(path) -> dict:
    """Sidecar metadata plus summary statistics of the stored field."""
    path = Path(path)
    field = read_field_snapshot(path)
    meta = json.loads(sidecar_path(path).read_text())
    return {
        **meta,
        "path": str(path),
        "min": float(field.min()),
        "max": float(field.max()),
        "mass_per_slice": [float(x) for x in field.sum(axis=(1, 2)) / field.shape[-1] ** 2],
    }


def snapshot_steps(N_T: int, stride: int) -> list[int]:
    """Time indices written for a given stride; ``0`` and ``N_T`` are always included."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    steps = set(range(0, N_T + 1, stride))
    steps.update({0, N_T})
    return sorted(steps)


def write_json(obj, path) -> Path:
    path = Path(path)
    try:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise SnapshotError(f"cannot write {path}: {exc}") from exc
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def format_seconds(t: float) -> str:
    """Wall time with three significant digits."""
    return f"{t:.3g}"
