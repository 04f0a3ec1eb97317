"""3D volume container, respacing, sub-volume cropping and air masks.

Intensities are stored as float32 in HU-like units.  Volumes carry a
``z_extent`` (slice scores of the first and last slice along the ``d`` axis,
pelvis = 0, head = 100) that is used to locate crops anatomically.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from .errors import FormatError

Triple = Tuple[float, float, float]

VOLUME_MAGIC = b"A3DV"
LABEL_MAGIC = b"A3DL"
FORMAT_VERSION = 1
HEADER_SIZE = 64
# magic, version, H, W, D, sh, sw, sd, z_min, z_max
_HEADER = struct.Struct("<4sI3I3f2f")


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    z_extent: Tuple[float, float] = (0.0, 100.0)
    # provenance (uid, client, split, generating z-window); never serialized
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        z_min, z_max = (float(z) for z in self.z_extent)
        if not 0.0 <= z_min <= z_max <= 100.0:
            raise ValueError(f"z_extent must satisfy 0 <= z_min <= z_max <= 100, got {self.z_extent}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "z_extent", (z_min, z_max))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SubVolume:
    data: np.ndarray
    origin: Tuple[int, int, int]
    slice_score: float
    source: str = ""

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


def _interp_axis(arr: np.ndarray, axis: int, n_out: int, step: float, order: int) -> np.ndarray:
    n_in = arr.shape[axis]
    coords = np.clip(np.arange(n_out, dtype=np.float64) * step, 0.0, n_in - 1)
    if order == 0:
        return np.take(arr, np.floor(coords + 0.5).astype(np.intp), axis=axis)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - frac) + np.take(arr, hi, axis=axis) * frac


def resample_array(data: np.ndarray, spacing: Triple, target_spacing: Triple, order: int = 1) -> np.ndarray:
    """Resample ``data`` from ``spacing`` to ``target_spacing``.

    Output voxel ``i`` along an axis sits at physical position ``i * target``
    and samples input coordinate ``i * target / source`` (clamped to the last
    voxel).  ``order=1`` is separable trilinear interpolation, ``order=0``
    nearest neighbour (used for label maps).
    """
    if len(target_spacing) != 3 or min(target_spacing) <= 0:
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    if tuple(float(s) for s in spacing) == tuple(float(t) for t in target_spacing):
        return data.copy()
    out = data.astype(np.float64) if order == 1 else data
    for axis in range(3):
        n_in = data.shape[axis]
        ratio = spacing[axis] / target_spacing[axis]
        n_out = max(1, int(round(n_in * ratio)))
        out = _interp_axis(out, axis, n_out, 1.0 / ratio, order)
    if order == 1:
        # convex combinations cannot leave the input range; guard against rounding
        out = np.clip(out, data.min(), data.max())
    return out.astype(data.dtype)


def respace(v: Volume, target_spacing: Triple) -> Volume:
    """Trilinearly resample a volume onto ``target_spacing`` (mm/voxel)."""
    target = tuple(float(t) for t in target_spacing)
    data = resample_array(v.data, v.spacing, target, order=1)
    return replace(v, data=data, spacing=target)


def crop_sub_volume(v: Volume, origin, size) -> SubVolume:
    """Cut the block ``[origin, origin + size)`` out of ``v``.

    The slice score of the crop is the ``d``-axis midpoint mapped linearly
    into the parent's ``z_extent``.
    """
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    if len(origin) != 3 or len(size) != 3:
        raise ValueError("origin and size must have three components")
    for o, s, n in zip(origin, size, v.shape):
        if o < 0 or s < 1 or o + s > n:
            raise ValueError(f"crop origin={origin} size={size} exceeds volume shape {v.shape}")
    h0, w0, d0 = origin
    H, W, D = size
    block = v.data[h0:h0 + H, w0:w0 + W, d0:d0 + D].copy()
    return SubVolume(block, origin, slice_score_at(v, d0, D), source=str(v.meta.get("uid", "")))


def slice_score_at(v: Volume, d0: int, depth: int) -> float:
    z_min, z_max = v.z_extent
    return z_min + (z_max - z_min) * (d0 + depth / 2.0) / v.shape[2]


def air_mask(sv, tau_air: float) -> np.ndarray:
    """Boolean mask of voxels strictly below ``tau_air``."""
    data = np.asarray(sv) if isinstance(sv, np.ndarray) else np.asarray(getattr(sv, "data", sv))
    return data < tau_air


def random_origin(shape, size, rng: np.random.Generator) -> Tuple[int, int, int]:
    return tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size))


# -- file format -----------------------------------------------------------

def _pack(magic: bytes, v: Volume, payload: bytes) -> bytes:
    H, W, D = v.shape
    header = _HEADER.pack(magic, FORMAT_VERSION, H, W, D, *v.spacing, *v.z_extent)
    return header.ljust(HEADER_SIZE, b"\0") + payload


def volume_to_bytes(v: Volume) -> bytes:
    return _pack(VOLUME_MAGIC, v, v.data.astype("<f4").tobytes(order="C"))


def labels_to_bytes(v: Volume, labels: np.ndarray) -> bytes:
    if labels.shape != v.shape:
        raise ValueError(f"label shape {labels.shape} != volume shape {v.shape}")
    return _pack(LABEL_MAGIC, v, labels.astype(np.uint8).tobytes(order="C"))


def _unpack(buf: bytes, magic: bytes, dtype: str):
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"payload of {len(buf)} bytes is shorter than the {HEADER_SIZE}-byte header")
    got_magic, version, H, W, D, sh, sw, sd, z_min, z_max = _HEADER.unpack_from(buf)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    count = H * W * D
    itemsize = np.dtype(dtype).itemsize
    if len(buf) != HEADER_SIZE + count * itemsize:
        raise FormatError(f"expected {HEADER_SIZE + count * itemsize} bytes, got {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=HEADER_SIZE).reshape(H, W, D)
    return arr, (sh, sw, sd), (z_min, z_max)


def volume_from_bytes(buf: bytes) -> Volume:
    arr, spacing, z_extent = _unpack(buf, VOLUME_MAGIC, "<f4")
    return Volume(arr.astype(np.float32), spacing, z_extent)


def labels_from_bytes(buf: bytes) -> np.ndarray:
    arr, _, _ = _unpack(buf, LABEL_MAGIC, "u1")
    return arr.astype(np.uint8)


def save_volume(path, v: Volume) -> None:
    Path(path).write_bytes(volume_to_bytes(v))


def load_volume(path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


def save_labels(path, v: Volume, labels: np.ndarray) -> None:
    Path(path).write_bytes(labels_to_bytes(v, labels))


def load_labels(path) -> np.ndarray:
    return labels_from_bytes(Path(path).read_bytes())
