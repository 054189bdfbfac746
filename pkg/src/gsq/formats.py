"""Bit-exact little-endian containers for scenes (.gsq) and codebooks (.gcb).

.gsq layout
    magic "GSQ1"
    u32 flags            bit 0: a codebook-index block follows the records
    u32 K, u32 D, u32 h, u32 w
    f32 cutoff
    K records of (f32 mu_x_norm, f32 mu_y_norm, f32 theta, f32 s1, f32 s2, D x f32 zeta)
    [K x u32 codebook indices]       when flags bit 0 is set

Positions are stored normalized to [0, 1]^2 (divided by the fit-time map
size), theta canonical in [0, pi) and scales in fit-resolution pixels, so a
scene reloads exactly at any uniform target resolution.  Values are f32 on
disk, float64 in compute.

.gcb layout
    magic "GCB1"; u32 N, u32 D; N x D f32 entries.

All writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .core import GaussianSet, canonical_angle
from .errors import FileFormatError, ShapeError

GSQ_MAGIC = b"GSQ1"
GCB_MAGIC = b"GCB1"
FLAG_INDEX_BLOCK = 0x1

_GSQ_HEADER = struct.Struct("<IIIIIf")  # flags, K, D, h, w, cutoff
_GCB_HEADER = struct.Struct("<II")      # N, D

# largest float32 strictly below pi, so canonical angles stay in [0, pi)
# even after the f32 rounding of values just under pi
_THETA_MAX_F32 = np.float32(np.nextafter(np.float32(np.pi), np.float32(0.0)))


def _atomic_write(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gsq-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class GsqFile:
    """Parsed .gsq contents, still in file units (normalized mu, pixel scales)."""

    num_gaussians: int
    feature_dim: int
    height: int
    width: int
    cutoff: float
    mu_norm: np.ndarray   # K x 2 in [0, 1]
    theta: np.ndarray     # K, canonical [0, pi)
    s: np.ndarray         # K x 2 positive, fit-resolution pixels
    zeta: np.ndarray      # K x D
    indices: np.ndarray | None  # K u32 codebook ids, or None

    def to_set(self, height: int | None = None, width: int | None = None,
               entries: np.ndarray | None = None) -> GaussianSet:
        """Materialize a GaussianSet at a target resolution.

        Scales follow the geometric-mean resize ratio (exact for uniform
        resizes).  When ``entries`` is given and an index block is present,
        features are resolved from the codebook instead of the stored zeta.
        """
        h = self.height if height is None else int(height)
        w = self.width if width is None else int(width)
        scale = np.sqrt((w / self.width) * (h / self.height))
        mu = self.mu_norm * np.array([w, h], dtype=np.float64)
        log_s = np.log(self.s * scale)
        zeta = self.zeta
        if entries is not None and self.indices is not None:
            entries = np.asarray(entries, dtype=np.float64)
            if entries.ndim != 2 or entries.shape[1] != self.feature_dim:
                raise ShapeError(
                    f"codebook dim {entries.shape} does not match scene D={self.feature_dim}"
                )
            if self.num_gaussians and self.indices.max(initial=0) >= entries.shape[0]:
                raise FileFormatError("codebook index out of range for the given book")
            zeta = entries[self.indices]
        return GaussianSet.from_arrays(mu, self.theta, log_s, zeta, h, w)


def write_gsq(path: str, gset: GaussianSet, *, cutoff: float,
              indices=None) -> None:
    """Serialize a scene; ``indices`` (K ints) adds the codebook-index block."""
    k, d = len(gset), gset.feature_dim
    h, w = gset.map_height, gset.map_width
    mu, theta_raw, log_s, zeta = gset.as_arrays()

    mu_norm = (mu / np.array([w, h], dtype=np.float64)).astype("<f4")
    theta = np.minimum(
        np.array([canonical_angle(t) for t in theta_raw], dtype=np.float32),
        _THETA_MAX_F32,
    ).astype("<f4")
    s = np.exp(log_s).astype("<f4")
    records = np.empty((k, 5 + d), dtype="<f4")
    if k:
        records[:, 0:2] = mu_norm
        records[:, 2] = theta
        records[:, 3:5] = s
        records[:, 5:] = zeta.astype("<f4")

    flags = 0
    blob = bytearray()
    blob += GSQ_MAGIC
    index_bytes = b""
    if indices is not None:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.shape != (k,):
            raise ShapeError(f"indices must have length K={k}, got {indices.shape}")
        if k and (indices.min() < 0 or indices.max() >= 2**32):
            raise FileFormatError("codebook indices out of u32 range")
        flags |= FLAG_INDEX_BLOCK
        index_bytes = indices.astype("<u4").tobytes()
    blob += _GSQ_HEADER.pack(flags, k, d, h, w, float(cutoff))
    blob += records.tobytes()
    blob += index_bytes
    _atomic_write(path, bytes(blob))


def read_gsq(path: str) -> GsqFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + _GSQ_HEADER.size or blob[:4] != GSQ_MAGIC:
        raise FileFormatError(f"{path}: not a .gsq file")
    flags, k, d, h, w, cutoff = _GSQ_HEADER.unpack_from(blob, 4)
    if d < 1 or h < 1 or w < 1:
        raise FileFormatError(f"{path}: invalid header (K={k}, D={d}, size {h}x{w})")
    if flags & ~FLAG_INDEX_BLOCK:
        raise FileFormatError(f"{path}: unknown flags {flags:#x}")
    has_index = bool(flags & FLAG_INDEX_BLOCK)
    expected = 4 + _GSQ_HEADER.size + k * (5 + d) * 4 + (4 * k if has_index else 0)
    if len(blob) != expected:
        raise FileFormatError(
            f"{path}: length {len(blob)} does not match header arithmetic ({expected})"
        )
    if not np.isfinite(cutoff) or cutoff <= 0:
        raise FileFormatError(f"{path}: invalid cutoff {cutoff}")

    offset = 4 + _GSQ_HEADER.size
    records = (
        np.frombuffer(blob, dtype="<f4", count=k * (5 + d), offset=offset)
        .reshape(k, 5 + d)
        .astype(np.float64)
    )
    indices = None
    if has_index:
        indices = np.frombuffer(
            blob, dtype="<u4", count=k, offset=offset + k * (5 + d) * 4
        ).astype(np.int64)

    mu_norm = records[:, 0:2]
    theta = records[:, 2]
    s = records[:, 3:5]
    zeta = records[:, 5:]
    if k and not np.all(np.isfinite(records)):
        raise FileFormatError(f"{path}: non-finite record values")
    if k and (np.any(mu_norm < -1e-6) or np.any(mu_norm > 1.0 + 1e-6)):
        raise FileFormatError(f"{path}: mu outside [0, 1]^2")
    if k and np.any(s <= 0):
        raise FileFormatError(f"{path}: non-positive scales")
    return GsqFile(
        num_gaussians=k, feature_dim=d, height=h, width=w, cutoff=float(cutoff),
        mu_norm=mu_norm, theta=theta, s=s, zeta=zeta, indices=indices,
    )


def write_gcb(path: str, entries) -> None:
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[0] < 1:
        raise ShapeError(f"entries must be N x D with N >= 1, got {entries.shape}")
    blob = GCB_MAGIC + _GCB_HEADER.pack(*entries.shape) + entries.astype("<f4").tobytes()
    _atomic_write(path, blob)


def read_gcb(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + _GCB_HEADER.size or blob[:4] != GCB_MAGIC:
        raise FileFormatError(f"{path}: not a .gcb file")
    n, d = _GCB_HEADER.unpack_from(blob, 4)
    expected = 4 + _GCB_HEADER.size + n * d * 4
    if n < 1 or d < 1 or len(blob) != expected:
        raise FileFormatError(f"{path}: length {len(blob)} does not match header ({expected})")
    entries = (
        np.frombuffer(blob, dtype="<f4", count=n * d, offset=4 + _GCB_HEADER.size)
        .reshape(n, d)
        .astype(np.float64)
    )
    if not np.all(np.isfinite(entries)):
        raise FileFormatError(f"{path}: non-finite entries")
    return entries


def write_usage(path: str, counts) -> None:
    counts = np.asarray(counts, dtype=np.int64)
    _atomic_write(path, json.dumps({"counts": counts.tolist()}).encode())


def read_usage(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        payload = json.load(fh)
    counts = np.asarray(payload["counts"], dtype=np.int64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise FileFormatError(f"{path}: invalid usage counts")
    return counts
