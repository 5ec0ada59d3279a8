"""Dense 3D volumes: container, exact Euclidean distance transform, labeling, VVOL1 I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from tubeskel import kernels

MAGIC = b"VVOL1"
DTYPE_MASK, DTYPE_SCALAR, DTYPE_VEC3 = 0, 1, 2
_HEADER = struct.Struct("<5sB3I3f")


class VolumeError(ValueError):
    """Base class for volume construction and file errors."""


class BadMagicError(VolumeError):
    pass


class PayloadLengthError(VolumeError):
    pass


class UnknownDtypeError(VolumeError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D grid in (z, y, x) order.

    ``data`` is bool (mask), float32 (scalar) or float32 with a trailing axis of
    3 (vec3, components in (z, y, x) order).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == bool:
            if data.ndim != 3:
                raise VolumeError(f"mask must be 3D, got shape {data.shape}")
        elif data.ndim == 4 and data.shape[-1] == 3:
            data = data.astype(np.float32, copy=False)
        elif data.ndim == 3:
            data = data.astype(np.float32, copy=False)
        else:
            raise VolumeError(f"unsupported volume shape {data.shape}")
        if min(data.shape[:3]) <= 0:
            raise VolumeError("dims must be positive")
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive reals, got {self.spacing}")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def kind(self) -> str:
        if self.data.dtype == bool:
            return "mask"
        return "vec3" if self.data.ndim == 4 else "scalar"

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[:3])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class ComponentLabeling:
    labels: np.ndarray
    count: int


def euclidean_distance_transform(mask: Volume, spacing=None) -> Volume:
    """Distance from each foreground voxel centre to the nearest background voxel centre.

    Exact and anisotropic (separable lower envelope of parabolas). Background
    voxels get 0. Voxels outside the grid are not treated as background.
    """
    fg = np.asarray(mask.data, dtype=bool)
    spacing = mask.spacing if spacing is None else tuple(float(s) for s in spacing)
    if fg.all():
        raise VolumeError("all-foreground volume has no boundary; distance transform undefined")
    f = np.where(fg, np.inf, 0.0)
    for axis in (2, 1, 0):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        lines = moved.reshape(-1, shape[-1])
        kernels.edt_pass(lines, spacing[axis])
        f = np.moveaxis(lines.reshape(shape), -1, axis)
    return Volume(np.sqrt(f).astype(np.float32), spacing)


def connected_components(mask: Volume) -> ComponentLabeling:
    """26-connected labeling; labels run 1..count in raster order of first voxel."""
    labels, count = ndimage.label(np.asarray(mask.data, dtype=bool), structure=np.ones((3, 3, 3), bool))
    return ComponentLabeling(labels, int(count))


def write_volume(volume: Volume, path) -> None:
    kind = volume.kind
    code = {"mask": DTYPE_MASK, "scalar": DTYPE_SCALAR, "vec3": DTYPE_VEC3}[kind]
    nz, ny, nx = volume.dims
    header = _HEADER.pack(MAGIC, code, nz, ny, nx, *volume.spacing)
    if kind == "mask":
        payload = volume.data.astype(np.uint8).tobytes(order="C")
    else:
        payload = volume.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 5 or raw[:5] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise PayloadLengthError(f"{path}: payload length mismatch (truncated header)")
    _, code, nz, ny, nx, sz, sy, sx = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    n = nz * ny * nx
    if code == DTYPE_MASK:
        expected = n
    elif code == DTYPE_SCALAR:
        expected = 4 * n
    elif code == DTYPE_VEC3:
        expected = 12 * n
    else:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    if len(body) != expected:
        raise PayloadLengthError(
            f"{path}: payload length mismatch ({len(body)} bytes, expected {expected})"
        )
    if code == DTYPE_MASK:
        data = np.frombuffer(body, dtype=np.uint8).reshape(nz, ny, nx).astype(bool)
    elif code == DTYPE_SCALAR:
        data = np.frombuffer(body, dtype="<f4").reshape(nz, ny, nx).astype(np.float32)
    else:
        data = np.frombuffer(body, dtype="<f4").reshape(nz, ny, nx, 3).astype(np.float32)
    return Volume(data, (sz, sy, sx))
