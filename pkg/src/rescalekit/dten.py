"""DTEN tensor files and the named-container convention on top of them.

A single record is::

    magic   b"DTEN"
    u32     version, fixed 1
    u32     ndim
    u64     dims[ndim]
    u32     dtype code, 0 = float32
    bytes   row-major little-endian payload

A container is records laid back to back in one file plus a JSON sidecar
``<file>.json`` holding ``{"entries": [{"name", "offset"}, ...], "meta": {...}}``
so entries can be addressed by name without scanning.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"DTEN"
VERSION = 1
DTYPE_F32 = 0


def _write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<I", DTYPE_F32))
    fh.write(arr.astype("<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"unexpected end of file while reading {what}")
    return raw


def _read_record(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise FormatError("not a DTEN record (bad magic)")
    version, ndim = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported DTEN version {version}")
    if ndim > 16:
        raise FormatError(f"implausible rank {ndim}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "dims")) if ndim else ()
    (code,) = struct.unpack("<I", _read_exact(fh, 4, "dtype"))
    if code != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {code}")
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_dten(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        _write_record(fh, arr)


def read_dten(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _read_record(fh)


def dten_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    _write_record(buf, arr)
    return buf.getvalue()


def write_container(
    path: str | Path,
    entries: Mapping[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Write named tensors as consecutive DTEN records plus a JSON sidecar."""
    path = Path(path)
    manifest = []
    with open(path, "wb") as fh:
        for name, arr in entries.items():
            manifest.append({"name": name, "offset": fh.tell()})
            _write_record(fh, arr)
    sidecar = {"entries": manifest, "meta": meta or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (name -> array in manifest order, meta)."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.is_file():
        raise FormatError(f"container manifest {sidecar_path} not found")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        manifest = sidecar["entries"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed container manifest {sidecar_path}") from exc
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for entry in manifest:
            fh.seek(int(entry["offset"]))
            out[str(entry["name"])] = _read_record(fh)
    return out, dict(sidecar.get("meta", {}))
