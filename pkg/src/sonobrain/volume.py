"""Volume data model, VOLB1 file IO, cropping, resampling, and normalization.

A volume is a scalar 3D grid with voxel spacing in mm and a world origin.
Arrays are stored as numpy ``(d, h, w)`` = ``[z, y, x]``, so C-order
flattening is x-fastest: ``flat_index = (z * h + y) * w + x``.  The world
position of voxel ``(x, y, z)`` is ``origin + (x * sx, y * sy, z * sz)``.

VOLB1 file format (little-endian):
    magic ``b"VOLB1\\n"`` (6 bytes); u32 d, h, w; f32 sx, sy, sz;
    f32 ox, oy, oz; u8 dtype (0 = float32, 1 = uint8); u8[3] reserved
    zeros; payload of d*h*w elements in x-fastest order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (
    BadMagicError,
    IoFailureError,
    NonPositiveDimError,
    NonPositiveSpacingError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

MAGIC = b"VOLB1\n"
_HEADER = struct.Struct("<3I6fB3s")  # after magic: dims, spacing, origin, dtype, reserved
_DTYPE_CODES = {0: np.float32, 1: np.uint8}
_DTYPE_IDS = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


@dataclass(frozen=True)
class Grid:
    """Voxel-grid geometry without payload: dims (d, h, w), spacing (sx, sy, sz) mm, origin mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if any(int(n) <= 0 for n in self.dims):
            raise NonPositiveDimError(f"dims must be positive, got {self.dims}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise NonPositiveSpacingError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def world_center(self) -> np.ndarray:
        """World coordinates (x, y, z) of the grid center."""
        d, h, w = self.dims
        sx, sy, sz = self.spacing
        ox, oy, oz = self.origin
        return np.array(
            [ox + (w - 1) / 2.0 * sx, oy + (h - 1) / 2.0 * sy, oz + (d - 1) / 2.0 * sz]
        )

    def index_to_world(self, zyx: np.ndarray) -> np.ndarray:
        """Map fractional (z, y, x) indices, shape (..., 3), to world (x, y, z)."""
        zyx = np.asarray(zyx, dtype=np.float64)
        sx, sy, sz = self.spacing
        ox, oy, oz = self.origin
        out = np.empty(zyx.shape, dtype=np.float64)
        out[..., 0] = ox + zyx[..., 2] * sx
        out[..., 1] = oy + zyx[..., 1] * sy
        out[..., 2] = oz + zyx[..., 0] * sz
        return out

    def world_to_index(self, xyz: np.ndarray) -> np.ndarray:
        """Map world (x, y, z), shape (..., 3), to fractional (z, y, x) indices."""
        xyz = np.asarray(xyz, dtype=np.float64)
        sx, sy, sz = self.spacing
        ox, oy, oz = self.origin
        out = np.empty(xyz.shape, dtype=np.float64)
        out[..., 0] = (xyz[..., 2] - oz) / sz
        out[..., 1] = (xyz[..., 1] - oy) / sy
        out[..., 2] = (xyz[..., 0] - ox) / sx
        return out


@dataclass
class Volume:
    """Scalar 3D grid; data shape (d, h, w), dtype float32 or uint8."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.uint8):
            raise ShapeMismatchError(f"dtype must be float32 or uint8, got {self.data.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        # delegate dim/spacing validation
        Grid(self.dims, self.spacing, self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin)

    def astype_like(self, data: np.ndarray) -> "Volume":
        """New volume with the same geometry and fresh data."""
        return Volume(data, self.spacing, self.origin)

    def same_geometry(self, other: "Volume | Mask") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


@dataclass
class Mask(Volume):
    """Binary volume: every voxel is exactly 0 or 1, dtype uint8."""

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if not (np.logical_or(raw == 0, raw == 1)).all():
            raise ShapeMismatchError("mask voxels must be exactly 0 or 1")
        self.data = np.ascontiguousarray(raw, dtype=np.uint8)
        super().__post_init__()

    def count(self) -> int:
        return int(self.data.sum())


def _geometry_of(v: Volume) -> Grid:
    return v.grid


def load_volume(path) -> Volume:
    """Read a VOLB1 file; raises BadMagicError / TruncatedPayloadError / NonPositiveDimError."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a VOLB1 file")
    header = blob[len(MAGIC) : len(MAGIC) + _HEADER.size]
    if len(header) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    d, h, w, sx, sy, sz, ox, oy, oz, dtype_id, _ = _HEADER.unpack(header)
    if min(d, h, w) <= 0:
        raise NonPositiveDimError(f"{path}: dims {(d, h, w)} not positive")
    if dtype_id not in _DTYPE_CODES:
        raise BadMagicError(f"{path}: unknown dtype id {dtype_id}")
    dtype = np.dtype(_DTYPE_CODES[dtype_id])
    payload = blob[len(MAGIC) + _HEADER.size :]
    expected = d * h * w * dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload[:expected], dtype=dtype.newbyteorder("<")).astype(dtype)
    data = data.reshape(d, h, w)
    return Volume(data, (sx, sy, sz), (ox, oy, oz))


def load_mask(path) -> Mask:
    v = load_volume(path)
    if v.data.dtype != np.uint8:
        raise ShapeMismatchError(f"{path}: not a uint8 mask file")
    return Mask(v.data, v.spacing, v.origin)


def save_volume(v: Volume, path) -> None:
    """Write a VOLB1 file that round-trips bit-identically through load_volume."""
    d, h, w = v.dims
    header = _HEADER.pack(
        d, h, w, *v.spacing, *v.origin, _DTYPE_IDS[np.dtype(v.data.dtype)], b"\0\0\0"
    )
    payload = np.ascontiguousarray(v.data).astype(v.data.dtype, copy=False)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(header)
            fh.write(payload.astype(payload.dtype.newbyteorder("<"), copy=False).tobytes())
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def center_crop(v: Volume, target: tuple[int, int, int]) -> Volume:
    """Crop or zero-pad symmetrically about the volume center to ``target`` dims.

    Odd margins put the extra voxel on the high-index side; the origin is
    shifted so retained voxels keep their world coordinates.
    """
    if any(int(t) <= 0 for t in target):
        raise NonPositiveDimError(f"crop target must be positive, got {target}")
    target = tuple(int(t) for t in target)
    src = v.data
    out = np.zeros(target, dtype=src.dtype)
    offsets = []
    src_slices = []
    dst_slices = []
    for dim, tgt in zip(v.dims, target):
        if dim >= tgt:
            off = (dim - tgt) // 2
            src_slices.append(slice(off, off + tgt))
            dst_slices.append(slice(0, tgt))
        else:
            pad_low = (tgt - dim) // 2
            off = -pad_low
            src_slices.append(slice(0, dim))
            dst_slices.append(slice(pad_low, pad_low + dim))
        offsets.append(off)
    out[tuple(dst_slices)] = src[tuple(src_slices)]
    # offsets are in (d, h, w) = (z, y, x) axis order; origin is (x, y, z)
    off_z, off_y, off_x = offsets
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    new_origin = (ox + off_x * sx, oy + off_y * sy, oz + off_z * sz)
    if isinstance(v, Mask):
        return Mask(out, v.spacing, new_origin)
    return Volume(out, v.spacing, new_origin)


def resample_isotropic(v: Volume, new_spacing: float) -> Volume:
    """Resample to isotropic spacing by trilinear interpolation at voxel centers.

    Output dims are round(dim * spacing / new_spacing), at least 1 per axis;
    the origin is preserved and samples beyond the source grid clamp to the
    border voxel.  Output is float32.
    """
    if not np.isfinite(new_spacing) or new_spacing <= 0:
        raise NonPositiveSpacingError(f"new spacing must be positive, got {new_spacing}")
    s = float(new_spacing)
    d, h, w = v.dims
    sx, sy, sz = v.spacing
    out_dims = (
        max(1, int(np.rint(d * sz / s))),
        max(1, int(np.rint(h * sy / s))),
        max(1, int(np.rint(w * sx / s))),
    )
    # fractional source indices of each output voxel center (origin shared)
    zz = np.arange(out_dims[0], dtype=np.float64) * (s / sz)
    yy = np.arange(out_dims[1], dtype=np.float64) * (s / sy)
    xx = np.arange(out_dims[2], dtype=np.float64) * (s / sx)
    coords = np.meshgrid(zz, yy, xx, indexing="ij")
    out = map_coordinates(
        v.data.astype(np.float32), coords, order=1, mode="nearest"
    ).astype(np.float32)
    return Volume(out, (s, s, s), v.origin)


def normalize_intensity(v: Volume) -> Volume:
    """Min-max rescale to [0, 1]; an all-equal volume maps to all zeros."""
    data = v.data.astype(np.float32)
    lo = float(data.min())
    hi = float(data.max())
    if hi > lo:
        out = (data - lo) / np.float32(hi - lo)
    else:
        out = np.zeros_like(data)
    return Volume(out.astype(np.float32), v.spacing, v.origin)
