"""Readers and writers for features, labels, embeddings, fits and weights.

Binary layouts are little-endian. Every writer goes through a temporary file
in the destination directory and renames it into place, so a failed run
never leaves a partial file behind.
"""
from __future__ import annotations

import csv
import io as _io
import json
import logging
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import geom
from .errors import DataError, FormatError
from .manifold import Embedding3, GeodesicMap
from .propagator import params_from_bytes, params_from_json, params_to_bytes, params_to_json
from .spherical import SphericalFitParams

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"PCFB"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHII")

GEODESIC_MAGIC = b"PCFG"
GEODESIC_VERSION = 1
_GEODESIC_HEADER = struct.Struct("<4sHIIIBI")

LABEL_UNIT_TOL = 1e-4


def atomic_write(path, data):
    """Write ``bytes`` or ``str`` to ``path`` via a temp file and rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path):
    return Path(path).read_bytes()


# --- features ---------------------------------------------------------------

def features_to_bytes(matrix):
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {m.shape}")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, m.shape[0], m.shape[1])
    return header + np.ascontiguousarray(m, dtype="<f4").tobytes()


def features_from_bytes(buf, name="<bytes>"):
    if len(buf) < _FEATURE_HEADER.size:
        raise FormatError(f"{name}: file shorter than the feature header")
    magic, version, n, d = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{name}: unsupported feature file version {version}")
    expected = _FEATURE_HEADER.size + 4 * n * d
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "oversized"
        raise FormatError(f"{name}: {kind} payload ({len(buf)} bytes, expected {expected})")
    m = np.frombuffer(buf, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(n, d)
    bad = np.argwhere(~np.isfinite(m))
    if bad.size:
        raise DataError(f"{name}: non-finite value at row {bad[0][0]}, col {bad[0][1]}")
    return m.astype(np.float64)


def save_features(matrix, path):
    atomic_write(path, features_to_bytes(matrix))


def load_features(path):
    """Read a ``PCFB`` feature file into an ``(n, d)`` float64 array."""
    return features_from_bytes(_read(path), name=str(path))


# --- labels -----------------------------------------------------------------

ANGLE_HEADER = ["pitch_rad", "yaw_rad"]
VECTOR_HEADER = ["gx", "gy", "gz"]


def _format_rows(header, rows):
    buf = _io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(f"{float(v):.9g}" for v in row) + "\n")
    return buf.getvalue()


def _parse_csv(text, name):
    lines = list(csv.reader(_io.StringIO(text)))
    if not lines:
        raise FormatError(f"{name}: empty file")
    header = [h.strip() for h in lines[0]]
    rows = []
    for lineno, cells in enumerate(lines[1:], start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(header):
            raise FormatError(f"{name}: line {lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise FormatError(f"{name}: line {lineno}: non-numeric cell ({exc})") from exc
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    if not np.all(np.isfinite(arr)):
        r = int(np.argwhere(~np.isfinite(arr))[0][0])
        raise DataError(f"{name}: line {r + 2}: non-finite value")
    return header, arr


def save_labels(labels, path, form=None):
    """Write labels as CSV.

    ``labels`` is ``(n, 2)`` pitch/yaw radians or ``(n, 3)`` unit vectors;
    ``form`` ("angles" or "vectors") defaults to the input's shape.
    """
    labels = np.asarray(labels, dtype=float)
    if form is None:
        form = "angles" if labels.shape[-1] == 2 else "vectors"
    if form == "angles":
        rows = labels if labels.shape[-1] == 2 else geom.vector_to_angles(labels)
        atomic_write(path, _format_rows(ANGLE_HEADER, rows))
    elif form == "vectors":
        rows = labels if labels.shape[-1] == 3 else geom.angles_to_vector(labels)
        atomic_write(path, _format_rows(VECTOR_HEADER, rows))
    else:
        raise ValueError(f"unknown label form {form!r}")


def _load_label_table(path):
    name = str(path)
    header, arr = _parse_csv(_read(path).decode("utf-8"), name)
    if header == ANGLE_HEADER:
        return "angles", arr
    if header == VECTOR_HEADER:
        norms = np.linalg.norm(arr, axis=1)
        if np.any(norms == 0):
            raise DataError(f"{name}: line {int(np.argmax(norms == 0)) + 2}: zero gaze vector")
        off = np.abs(norms - 1.0) > LABEL_UNIT_TOL
        if np.any(off):
            logger.warning("%s: %d gaze vectors deviate from unit length by more than %g; normalized",
                           name, int(off.sum()), LABEL_UNIT_TOL)
        return "vectors", arr / norms[:, None]
    raise FormatError(f"{name}: header must be 'pitch_rad,yaw_rad' or 'gx,gy,gz', got {','.join(header)!r}")


def load_labels(path):
    """Gaze labels as ``(n, 2)`` pitch/yaw radians, whichever form the file uses."""
    form, arr = _load_label_table(path)
    return arr if form == "angles" else geom.vector_to_angles(arr)


def load_label_vectors(path):
    """Gaze labels as ``(n, 3)`` unit vectors."""
    form, arr = _load_label_table(path)
    return arr if form == "vectors" else geom.angles_to_vector(arr)


# --- spherical fit and weights ---------------------------------------------

def save_sf_params(params, path):
    atomic_write(path, json.dumps(params.to_json_dict(), indent=2) + "\n")


def load_sf_params(path):
    try:
        doc = json.loads(_read(path).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return SphericalFitParams.from_json_dict(doc)


def save_weights(params, path):
    """Binary ``PCFW`` by default; JSON when ``path`` ends in ``.json``."""
    if str(path).endswith(".json"):
        atomic_write(path, params_to_json(params) + "\n")
    else:
        atomic_write(path, params_to_bytes(params))


def load_weights(path):
    buf = _read(path)
    if str(path).endswith(".json"):
        try:
            return params_from_json(buf.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return params_from_bytes(buf)


# --- embeddings and geodesic maps ---------------------------------------------

def save_embedding(emb, path):
    """Embedding coordinates as CSV with header ``x,y,z``."""
    coords = getattr(emb, "coords", emb)
    atomic_write(path, _format_rows(["x", "y", "z"], coords))


def load_embedding_coords(path):
    header, arr = _parse_csv(_read(path).decode("utf-8"), str(path))
    if header != ["x", "y", "z"]:
        raise FormatError(f"{path}: embedding header must be 'x,y,z'")
    return arr


def load_embedding(path, geo):
    """Embedding coordinates plus the cached terms rebuilt from ``geo``."""
    return Embedding3.from_coords(load_embedding_coords(path), geo)


def geodesic_to_bytes(geo):
    """``PCFG`` layout: magic, u16 version, u32 n, u32 d, u32 k, u8 connected,
    u32 component count, u32 component sizes, u32 indices, f64 features
    (n x d), f64 distances (n x n)."""
    n, d = geo.features.shape
    sizes = np.asarray(geo.component_sizes, dtype="<u4")
    return b"".join([
        _GEODESIC_HEADER.pack(GEODESIC_MAGIC, GEODESIC_VERSION, n, d, geo.k, int(geo.connected), sizes.size),
        sizes.tobytes(),
        np.asarray(geo.indices, dtype="<u4").tobytes(),
        np.ascontiguousarray(geo.features, dtype="<f8").tobytes(),
        np.ascontiguousarray(geo.distances, dtype="<f8").tobytes(),
    ])


def geodesic_from_bytes(buf, name="<bytes>"):
    if len(buf) < _GEODESIC_HEADER.size:
        raise FormatError(f"{name}: file shorter than the geodesic header")
    magic, version, n, d, k, connected, n_comp = _GEODESIC_HEADER.unpack_from(buf)
    if magic != GEODESIC_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {GEODESIC_MAGIC!r}")
    if version != GEODESIC_VERSION:
        raise FormatError(f"{name}: unsupported geodesic file version {version}")
    expected = _GEODESIC_HEADER.size + 4 * n_comp + 4 * n + 8 * n * d + 8 * n * n
    if len(buf) != expected:
        raise FormatError(f"{name}: payload is {len(buf)} bytes, expected {expected}")
    off = _GEODESIC_HEADER.size
    sizes = np.frombuffer(buf, dtype="<u4", count=n_comp, offset=off)
    off += 4 * n_comp
    indices = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    feats = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
    off += 8 * n * d
    dist = np.frombuffer(buf, dtype="<f8", count=n * n, offset=off).reshape(n, n).copy()
    feats.setflags(write=False)
    dist.setflags(write=False)
    return GeodesicMap(distances=dist, features=feats, k=int(k), indices=indices,
                       connected=bool(connected), component_sizes=tuple(int(s) for s in sizes))


def save_geodesic(geo, path):
    atomic_write(path, geodesic_to_bytes(geo))


def load_geodesic(path):
    return geodesic_from_bytes(_read(path), name=str(path))


def csv_text(header, rows, fmt="{:.9g}"):
    """Render a CSV with a header; strings pass through, numbers use ``fmt``."""
    buf = _io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else fmt.format(float(v)) for v in row) + "\n")
    return buf.getvalue()
