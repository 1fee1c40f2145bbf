"""Matrix archive directories.

An archive is a directory holding one ``manifest.json`` plus one
``<name>.rommat`` blob per entry.  A blob is the 8-byte magic
``ROMMAT01``, row and column counts as little-endian uint64, then the
row-major float64 payload.  The manifest records schema_version 1, each
entry's kind ("vector", "matrix", "tensor"), logical shape, and the
CRC-64 checksum of its blob file, plus a free-form metadata object.
Vectors are stored as n-by-1 blobs; tensors flatten trailing axes.

Loads verify magic, shape, checksum, and finiteness; saves refuse
non-finite data, so a loadable archive is always clean.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "ArchiveError",
    "crc64",
    "save_archive",
    "load_archive",
    "list_entries",
    "import_matrix_csv",
]

SCHEMA_VERSION = 1
MAGIC = b"ROMMAT01"
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class ArchiveError(Exception):
    """Malformed archive, checksum mismatch, or rejected data."""


# ---------------------------------------------------------------------------
# CRC-64 (XZ polynomial, reflected, init and xorout all-ones)

_POLY = 0xC96C5795D7870F42
_MASK = (1 << 64) - 1


def _make_table():
    table = np.empty(256, dtype=np.uint64)
    for b in range(256):
        c = b
        for _ in range(8):
            c = (c >> 1) ^ _POLY if c & 1 else c >> 1
        table[b] = c
    return table


_TABLE = _make_table()
_TABLE_INT = [int(x) for x in _TABLE]


def _step_basis():
    """Images of the 64 state basis vectors under 'advance one zero byte'."""
    return [
        (_TABLE_INT[(1 << k) & 0xFF] ^ ((1 << k) >> 8)) & _MASK for k in range(64)
    ]


def _apply(op, state):
    out = 0
    k = 0
    while state:
        if state & 1:
            out ^= op[k]
        state >>= 1
        k += 1
    return out


def _compose(op2, op1):
    """op2 after op1, both as basis-image lists."""
    return [_apply(op2, v) for v in op1]


def _advance_op(nbytes):
    """Linear operator advancing a state across nbytes zero bytes."""
    result = None
    sq = _step_basis()
    n = nbytes
    while n:
        if n & 1:
            result = sq if result is None else _compose(sq, result)
        n >>= 1
        sq = _compose(sq, sq)
    if result is None:
        return [1 << k for k in range(64)]
    return result


def _apply_vec(op, states):
    """Vectorized _apply over a uint64 numpy array."""
    out = np.zeros_like(states)
    cols = np.array(op, dtype=np.uint64)
    for k in range(64):
        bit = (states >> np.uint64(k)) & np.uint64(1)
        out ^= np.where(bit.astype(bool), cols[k], np.uint64(0))
    return out


def crc64(data):
    """CRC-64 of a bytes-like object (XZ parameters).

    Large inputs are processed in parallel lanes and folded with the
    zero-advance operator; both paths agree with the plain byte loop.
    """
    buf = np.frombuffer(memoryview(data), dtype=np.uint8)
    n = buf.size
    state = _MASK  # init
    lanes = 4096
    if n < 4 * lanes:
        for b in buf.tolist():
            state = _TABLE_INT[(state ^ b) & 0xFF] ^ (state >> 8)
        return state ^ _MASK

    chunk = n // lanes
    head = n - lanes * chunk
    for b in buf[:head].tolist():
        state = _TABLE_INT[(state ^ b) & 0xFF] ^ (state >> 8)

    body = buf[head:].reshape(lanes, chunk)
    states = np.zeros(lanes, dtype=np.uint64)
    for pos in range(chunk):
        idx = (states ^ body[:, pos].astype(np.uint64)) & np.uint64(0xFF)
        states = _TABLE[idx.astype(np.intp)] ^ (states >> np.uint64(8))

    adv = _advance_op(chunk)
    width = chunk
    while states.size > 1:
        upper = _apply_vec(adv, states[0::2])
        states = upper ^ states[1::2]
        adv = _compose(adv, adv)
        width *= 2
    total = _apply(adv, state) ^ int(states[0])  # advance head state over the body
    return total ^ _MASK


# ---------------------------------------------------------------------------
# blobs


def _kind_of(arr):
    if arr.ndim == 1:
        return "vector"
    if arr.ndim == 2:
        return "matrix"
    return "tensor"


def _blob_bytes(arr):
    if arr.ndim == 1:
        rows, cols = arr.shape[0], 1
    else:
        rows, cols = arr.shape[0], int(np.prod(arr.shape[1:], dtype=np.int64))
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return MAGIC + struct.pack("<QQ", rows, cols) + payload


def _check_name(name):
    if not _NAME_RE.match(name):
        raise ArchiveError(f"invalid entry name {name!r}")


def save_archive(path, entries, metadata=None):
    """Write a full archive directory (replacing any previous content)."""
    path = Path(path)
    manifest_entries = {}
    blobs = {}
    for name, arr in entries.items():
        _check_name(name)
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 0:
            raise ArchiveError(f"entry {name!r}: scalars are not storable")
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"entry {name!r} contains non-finite values")
        blob = _blob_bytes(arr)
        blobs[name] = blob
        manifest_entries[name] = {
            "kind": _kind_of(arr),
            "shape": list(arr.shape),
            "checksum": f"{crc64(blob):016x}",
        }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "entries": manifest_entries,
        "metadata": metadata if metadata is not None else {},
    }
    text = json.dumps(manifest, indent=1, sort_keys=True)

    path.mkdir(parents=True, exist_ok=True)
    for stale in path.glob("*.rommat"):
        if stale.stem not in blobs:
            stale.unlink()
    for name, blob in blobs.items():
        (path / f"{name}.rommat").write_bytes(blob)
    (path / "manifest.json").write_text(text)


def _read_manifest(path):
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise ArchiveError(f"{path} is not an archive (no manifest.json)")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise ArchiveError(f"corrupt manifest in {path}: {e}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArchiveError(
            f"unsupported schema_version {manifest.get('schema_version')!r}"
        )
    return manifest


def load_archive(path, names=None):
    """Read entries back as float64 arrays.

    Returns (entries, metadata).  names, if given, restricts which
    entries are loaded (all must exist).
    """
    path = Path(path)
    manifest = _read_manifest(path)
    wanted = manifest["entries"]
    if names is not None:
        missing = set(names) - set(wanted)
        if missing:
            raise ArchiveError(f"missing entries: {sorted(missing)}")
        wanted = {k: wanted[k] for k in names}

    out = {}
    for name, info in wanted.items():
        _check_name(name)
        blob_path = path / f"{name}.rommat"
        if not blob_path.is_file():
            raise ArchiveError(f"entry {name!r}: blob file missing")
        blob = blob_path.read_bytes()
        if f"{crc64(blob):016x}" != info["checksum"]:
            raise ArchiveError(f"entry {name!r}: checksum mismatch")
        if blob[:8] != MAGIC:
            raise ArchiveError(f"entry {name!r}: bad magic")
        rows, cols = struct.unpack("<QQ", blob[8:24])
        payload = blob[24:]
        if len(payload) != rows * cols * 8:
            raise ArchiveError(f"entry {name!r}: truncated payload")
        shape = tuple(info["shape"])
        expect = (shape[0], 1) if len(shape) == 1 else (
            shape[0],
            int(np.prod(shape[1:], dtype=np.int64)),
        )
        if shape and (rows, cols) != expect:
            raise ArchiveError(
                f"entry {name!r}: blob shape {(rows, cols)} does not match manifest {shape}"
            )
        arr = np.frombuffer(payload, dtype="<f8").astype(float).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"entry {name!r} contains non-finite values")
        out[name] = arr
    return out, manifest.get("metadata", {})


def list_entries(path):
    """Map entry name -> (kind, shape) without reading payloads."""
    manifest = _read_manifest(path)
    return {
        name: (info["kind"], tuple(info["shape"]))
        for name, info in manifest["entries"].items()
    }


# ---------------------------------------------------------------------------
# CSV import


def import_matrix_csv(path, delimiter=","):
    """Parse a dense numeric CSV into a matrix.

    Every row must have the same number of fields; fields are parsed
    with standard float syntax.  Ragged rows, unparsable fields, and
    non-finite values are rejected with the offending location.
    """
    text = Path(path).read_text()
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(delimiter)
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ArchiveError(
                f"line {lineno}: expected {width} fields, found {len(fields)}"
            )
        vals = []
        for col, tok in enumerate(fields, start=1):
            try:
                v = float(tok)
            except ValueError as e:
                raise ArchiveError(f"line {lineno}, field {col}: {tok!r} is not a number") from e
            if not np.isfinite(v):
                raise ArchiveError(f"line {lineno}, field {col}: non-finite value")
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise ArchiveError("empty CSV")
    return np.array(rows, dtype=float)
