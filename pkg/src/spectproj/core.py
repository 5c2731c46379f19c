"""Domain types and the on-disk volume format.

Arrays are held in memory as ``(nx, ny, nz)`` numpy arrays; on disk the
payload is little-endian float32 with the first index varying fastest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSF_SUM_TOL = 1e-5


class SpectError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SpectError, ValueError):
    """Malformed or inconsistent file header."""


class SizeMismatchError(FormatError):
    """Raw payload length disagrees with the header."""


class ShapeError(SpectError, ValueError):
    pass


class DomainError(SpectError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ParameterError(SpectError, ValueError):
    pass


class ValidationError(SpectError, ValueError):
    pass


class UsageError(SpectError, RuntimeError):
    """API misuse, such as replaying a tape whose weights have changed."""


class TrainingError(SpectError, ArithmeticError):
    """Non-finite value during training; the message names where it appeared."""


class DegenerateInputError(SpectError, ValueError):
    pass


class UndefinedMetricError(SpectError, ValueError):
    pass


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar field (activity or attenuation) with voxel size in mm."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (4.8, 4.8, 4.8)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume must be 3D with all dims >= 1, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValidationError(f"voxel_size must be three positive values, got {vs}")
        if abs(vs[0] - vs[1]) > 1e-9 * max(vs[0], vs[1]):
            raise ValidationError(f"transaxial voxels must be square, got dx={vs[0]} dy={vs[1]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def check_nonnegative(self, what: str = "volume") -> None:
        if np.any(self.data < 0):
            raise DomainError(f"{what} has negative entries")

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.voxel_size)


@dataclass(frozen=True, eq=False)
class ProjectionViews:
    """Stack of detector views, shape ``(nx, nz, nview)``."""

    data: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if data.ndim != 3:
            raise ShapeError(f"views must be 3D (nx, nz, nview), got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if angles.size < 1 or angles.size != data.shape[2]:
            raise ShapeError(f"{angles.size} angles for {data.shape[2]} views")
        check_angles(angles)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "angles", angles)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def nview(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "ProjectionViews":
        return ProjectionViews(data, self.angles)


def check_angles(angles: np.ndarray) -> None:
    if np.any(~np.isfinite(angles)) or np.any(angles < 0) or np.any(angles >= 2 * np.pi):
        raise ValidationError("view angles must lie in [0, 2*pi)")
    if np.any(np.diff(angles) <= 0):
        raise ValidationError("view angles must be strictly increasing")


def uniform_angles(nview: int) -> np.ndarray:
    """Evenly spaced angles ``2*pi*l/nview`` for a full circular orbit."""
    return 2 * np.pi * np.arange(nview) / nview


@dataclass(frozen=True, eq=False)
class PsfStack:
    """Depth- and view-dependent kernels, shape ``(px, pz, ny, nview)``.

    Every kernel must be nonnegative, symmetric about its center tap in
    both axes, and sum to at most one.
    """

    kernels: np.ndarray
    view_invariant: bool = field(init=False, default=False)

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        if k.ndim != 4:
            raise ShapeError(f"psf must be 4D (px, pz, ny, nview), got shape {k.shape}")
        px, pz = k.shape[:2]
        if px % 2 == 0 or pz % 2 == 0:
            raise ParameterError(f"psf kernel dims must be odd, got {px}x{pz}")
        _check_finite(k, "psf")
        if np.any(k < 0):
            raise ValidationError("psf kernels must be nonnegative")
        sums = k.sum(axis=(0, 1))
        if np.any(sums > 1 + PSF_SUM_TOL):
            raise ValidationError(f"psf kernel sums exceed 1 (max {sums.max():.8g})")
        check_symmetric(k)
        k.setflags(write=False)
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "view_invariant", bool(np.all(k == k[..., :1])))

    @property
    def shape(self):
        return self.kernels.shape

    @property
    def px(self) -> int:
        return self.kernels.shape[0]

    @property
    def pz(self) -> int:
        return self.kernels.shape[1]


def check_symmetric(kernels: np.ndarray, rtol: float = 1e-12) -> None:
    """Raise unless kernels are mirror-symmetric along their first two axes."""
    scale = max(float(np.abs(kernels).max(initial=0.0)), 1e-300)
    if (np.abs(kernels - kernels[::-1]).max(initial=0.0) > rtol * scale
            or np.abs(kernels - kernels[:, ::-1]).max(initial=0.0) > rtol * scale):
        raise ValidationError("psf kernel is not symmetric in both axes")


# ---------------------------------------------------------------------------
# file format: <stem>.json header + <stem>.raw payload
# ---------------------------------------------------------------------------

_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8"), "u8": np.dtype("u1")}


def _write_pair(path, array: np.ndarray, header: dict, dtype: str = "f32le") -> None:
    stem = _stem(path)
    if not stem.parent.is_dir():
        raise OSError(f"directory does not exist: {stem.parent}")
    header = {"shape": list(array.shape), **header, "dtype": dtype, "order": "i-fastest"}
    payload = np.asarray(array, dtype=_DTYPES[dtype]).ravel(order="F").tobytes()
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(header, f, indent=1)
        f.write("\n")
    with open(stem.with_suffix(".raw"), "wb") as f:
        f.write(payload)


def _read_pair(path, ndim: int) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    hpath = stem.with_suffix(".json")
    try:
        with open(hpath, encoding="utf-8") as f:
            header = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"missing header file {hpath}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt header {hpath}: {e}") from None
    if not isinstance(header, dict):
        raise FormatError(f"header {hpath} is not a JSON object")
    shape = header.get("shape")
    if (not isinstance(shape, list) or len(shape) != ndim
            or not all(isinstance(n, int) and n >= 1 for n in shape)):
        raise FormatError(f"header field 'shape' must be {ndim} positive integers, got {shape!r}")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise FormatError(f"header field 'dtype' must be one of {sorted(_DTYPES)}, got {dtype!r}")
    if header.get("order") != "i-fastest":
        raise FormatError(f"header field 'order' must be 'i-fastest', got {header.get('order')!r}")
    rpath = stem.with_suffix(".raw")
    try:
        raw = rpath.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing payload file {rpath}") from None
    dt = _DTYPES[dtype]
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expected:
        raise SizeMismatchError(f"{rpath}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dt).reshape(shape, order="F")
    return np.ascontiguousarray(data, dtype=dt.newbyteorder("=")), header


def _voxel_size_field(header: dict) -> tuple[float, float, float]:
    vs = header.get("voxel_size_mm")
    if (not isinstance(vs, list) or len(vs) != 3
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vs)):
        raise FormatError(f"header field 'voxel_size_mm' must be three numbers, got {vs!r}")
    if min(vs) <= 0:
        raise FormatError(f"header field 'voxel_size_mm' must be positive, got {vs}")
    return tuple(float(v) for v in vs)


def write_volume(v: Volume, path) -> None:
    _check_finite(v.data, "volume")
    _write_pair(path, v.data, {"voxel_size_mm": list(v.voxel_size)})


def read_volume(path) -> Volume:
    data, header = _read_pair(path, 3)
    vs = _voxel_size_field(header)
    try:
        return Volume(data.astype(np.float32, copy=False), vs)
    except ValidationError as e:
        raise FormatError(f"header field 'voxel_size_mm': {e}") from None


def write_views(v: ProjectionViews, path) -> None:
    _check_finite(v.data, "projection views")
    _write_pair(path, v.data, {"angles_rad": [float(a) for a in v.angles]})


def read_views(path) -> ProjectionViews:
    data, header = _read_pair(path, 3)
    angles = header.get("angles_rad")
    if not isinstance(angles, list) or len(angles) != data.shape[2]:
        raise FormatError(f"header field 'angles_rad' must list {data.shape[2]} angles")
    try:
        return ProjectionViews(data.astype(np.float32, copy=False), np.array(angles, dtype=np.float64))
    except (ValidationError, ShapeError) as e:
        raise FormatError(f"header field 'angles_rad': {e}") from None


def write_psf(p: PsfStack, path) -> None:
    _write_pair(path, p.kernels, {}, dtype="f64le")


def read_psf(path) -> PsfStack:
    data, _ = _read_pair(path, 4)
    return PsfStack(data)


def write_labels(labels: np.ndarray, legend: dict[str, int], path, voxel_size=None) -> None:
    """Label-valued uint8 volume with a name -> value legend in the header."""
    if labels.max(initial=0) > 255 or labels.min(initial=0) < 0:
        raise ValidationError("label values must fit in 8 bits")
    extra = {"legend": legend}
    if voxel_size is not None:
        extra["voxel_size_mm"] = list(voxel_size)
    _write_pair(path, labels, extra, dtype="u8")


def read_labels(path) -> tuple[np.ndarray, dict[str, int]]:
    data, header = _read_pair(path, 3)
    legend = header.get("legend")
    if not isinstance(legend, dict):
        raise FormatError("header field 'legend' must be an object")
    return data, {str(k): int(v) for k, v in legend.items()}


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)
