"""Volumetric container, DVOL binary format, cropping, tiling and joint
normalisation of Dixon channel bundles.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. On disk the
payload is x-fastest, i.e. ``index = i + nx * (j + ny * k)``, which is
numpy's Fortran order.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BoundsError, DegenerateError, FormatError,
                     PayloadLengthError, ShapeError, SizeError)

MAGIC = b"DVOL"
VERSION = 1
DTYPE_F32 = 1
# magic, version, dims[3], spacing[3], dtype code
_HEADER = struct.Struct("<4sI3I3fI")
HEADER_SIZE = _HEADER.size


class Channel(str, enum.Enum):
    IP = "IP"
    OP = "OP"
    F = "F"
    W = "W"
    OTHER = "OTHER"


class Provenance(str, enum.Enum):
    SIMULATED_TRUTH = "SIMULATED_TRUTH"
    SIMULATED_SCANNER = "SIMULATED_SCANNER"
    PREDICTED = "PREDICTED"


class Blend(str, enum.Enum):
    OVERWRITE = "OVERWRITE"
    AVERAGE = "AVERAGE"


def _f32(x):
    return float(np.float32(x))


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid. The array is copied and frozen on construction."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    channel: Channel = Channel.OTHER

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(_f32(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "channel", Channel(self.channel))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data, channel=None):
        return Volume(data, self.spacing, self.channel if channel is None else channel)

    def equals(self, other):
        """Bitwise comparison of dims, spacing and payload."""
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.data.dtype == other.data.dtype
                and self.data.tobytes() == other.data.tobytes())


@dataclass(frozen=True)
class DixonStudy:
    ip: Volume
    op: Volume
    fat: Volume
    water: Volume
    provenance: Provenance = Provenance.SIMULATED_TRUTH
    subject_id: str = ""

    def __post_init__(self):
        roles = {"ip": Channel.IP, "op": Channel.OP, "fat": Channel.F, "water": Channel.W}
        ref = self.ip
        for name, tag in roles.items():
            v = getattr(self, name)
            if v.dims != ref.dims or v.spacing != ref.spacing:
                raise ShapeError(f"channel {name} is not co-registered with ip")
            if v.channel != tag:
                raise ValueError(f"channel {name} tagged {v.channel.value}, expected {tag.value}")
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def dims(self):
        return self.ip.dims

    @property
    def spacing(self):
        return self.ip.spacing

    def channels(self):
        return {"ip": self.ip, "op": self.op, "fat": self.fat, "water": self.water}


@dataclass(frozen=True)
class TileLayout:
    volume_dims: tuple
    tile_dims: tuple
    origins: list = field(default_factory=list)
    blend: Blend = Blend.AVERAGE


def write_volume(v: Volume, path) -> None:
    """Write ``v`` as DVOL: 36-byte little-endian header then f32 payload."""
    header = _HEADER.pack(MAGIC, VERSION, *v.dims, *v.spacing, DTYPE_F32)
    payload = np.asarray(v.data, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_volume(path, channel=Channel.OTHER) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than DVOL header")
    magic, version, nx, ny, nz, sx, sy, sz, dtype = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported DVOL version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    n = nx * ny * nz
    payload = raw[HEADER_SIZE:]
    if len(payload) != 4 * n:
        raise PayloadLengthError(
            f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    return Volume(data.astype(np.float32), (sx, sy, sz), channel)


def crop(v: Volume, origin, size) -> Volume:
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    for o, s, n in zip(origin, size, v.dims):
        if o < 0 or s < 1 or o + s > n:
            raise BoundsError(f"crop origin {origin} size {size} outside dims {v.dims}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return v.with_data(v.data[sl])


def _axis_origins(n, t):
    origins = list(range(0, n, t))
    origins[-1] = min(origins[-1], n - t)
    return sorted(set(origins))


def plan_tiles(volume_dims, tile_dims, blend=Blend.AVERAGE) -> TileLayout:
    """Grid of tile origins per axis; the last tile on each axis is clamped
    inward so that it ends exactly at the volume boundary."""
    volume_dims = tuple(int(n) for n in volume_dims)
    tile_dims = tuple(int(t) for t in tile_dims)
    if any(t > n or t < 1 for t, n in zip(tile_dims, volume_dims)):
        raise SizeError(f"tile {tile_dims} does not fit volume {volume_dims}")
    per_axis = [_axis_origins(n, t) for n, t in zip(volume_dims, tile_dims)]
    origins = [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]
    return TileLayout(volume_dims, tile_dims, origins, Blend(blend))


def reassemble(layout: TileLayout, tiles) -> Volume:
    if len(tiles) != len(layout.origins):
        raise ShapeError(f"{len(tiles)} tiles for a layout of {len(layout.origins)}")
    acc = np.zeros(layout.volume_dims, dtype=np.float64)
    count = np.zeros(layout.volume_dims, dtype=np.float64)
    for origin, tile in zip(layout.origins, tiles):
        if tile.dims != layout.tile_dims:
            raise ShapeError(f"tile dims {tile.dims} != layout tile dims {layout.tile_dims}")
        sl = tuple(slice(o, o + t) for o, t in zip(origin, layout.tile_dims))
        if layout.blend is Blend.AVERAGE:
            acc[sl] += tile.data
            count[sl] += 1
        else:
            acc[sl] = tile.data
            count[sl] = 1
    out = acc / count if layout.blend is Blend.AVERAGE else acc
    first = tiles[0]
    return Volume(out.astype(first.data.dtype), first.spacing, first.channel)


def percentile_scale(arrays, q=0.99):
    """Nearest-rank ``q`` quantile of all values pooled together."""
    pooled = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])
    rank = math.ceil(q * pooled.size) - 1
    return float(np.partition(pooled, rank)[rank])


def normalize_volumes(volumes, scale):
    return [v.with_data(np.clip(v.data / scale, 0.0, 1.0)) for v in volumes]


def joint_scale(volumes):
    """Pooled 99th percentile of the given volumes, falling back to the max
    when fewer than 1% of voxels carry signal."""
    if not any(np.any(v.data > 0) for v in volumes):
        raise DegenerateError("study has no positive intensity")
    scale = percentile_scale([v.data for v in volumes])
    if scale <= 0:
        scale = float(max(v.data.max() for v in volumes))
    return scale


def normalize_study(s: DixonStudy):
    """Divide all four channels by their pooled 99th percentile and clamp to
    [0, 1]. Returns the normalised study and the scale."""
    chans = [s.ip, s.op, s.fat, s.water]
    scale = joint_scale(chans)
    ip, op, fat, water = normalize_volumes(chans, scale)
    return DixonStudy(ip, op, fat, water, s.provenance, s.subject_id), scale
