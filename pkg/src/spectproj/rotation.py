"""In-plane rotation of z-slices and its exact adjoint.

Two interpolators are available: ``bilinear`` and ``three_pass_1d``
(x-shear, y-shear, x-shear with 1D linear interpolation). Both rotate about
the plane center ``((n-1)/2, (n-1)/2)`` in 0-based indices and treat samples
outside the plane as zero. The adjoint scatters the interpolation weights
back onto their source samples; it is not a rotation by ``-theta``.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend
from .core import ParameterError, ShapeError

METHODS = {"bilinear": 0, "three_pass_1d": 1}


def method_code(method: str) -> int:
    try:
        return METHODS[method]
    except KeyError:
        raise ParameterError(f"unknown rotation method {method!r}; choose from {sorted(METHODS)}") from None


def rotation_params(theta: float) -> tuple[float, float, int, float, float]:
    """Split ``theta`` into a quarter turn ``q`` and a residual in [-pi/4, pi/4].

    Returns ``(cos, sin, q, tan(phi/2), sin(phi))``. Cosine and sine of the
    full angle are composed from the exact quarter-turn values so multiples
    of pi/2 map the grid onto itself exactly.
    """
    if not math.isfinite(theta):
        raise ParameterError(f"rotation angle must be finite, got {theta}")
    q = int(round(theta / (math.pi / 2)))
    phi = theta - q * (math.pi / 2)
    cq, sq = ((1, 0), (0, 1), (-1, 0), (0, -1))[q % 4]
    c, s = math.cos(phi), math.sin(phi)
    return cq * c - sq * s, sq * c + cq * s, q % 4, math.tan(phi / 2), s


def padded_size(nx: int, ny: int) -> int:
    """Side of the square working plane that holds an (nx, ny) slice at any angle.

    Smallest integer >= ceil(sqrt(2) * max(nx, ny)) with the parity of
    ``max(nx, ny)``, so the slice sits centered in the plane.
    """
    m = max(nx, ny)
    n = math.ceil(math.sqrt(2) * m)
    if (n - m) % 2:
        n += 1
    return n


def batch_params(angles) -> tuple[np.ndarray, ...]:
    """Per-view rotation parameters stacked as arrays (cos, sin, q, tan_half, sin_phi)."""
    rows = [rotation_params(float(t)) for t in angles]
    cols = list(zip(*rows)) if rows else [(), (), (), (), ()]
    return (np.array(cols[0], dtype=float), np.array(cols[1], dtype=float),
            np.array(cols[2], dtype=np.intc), np.array(cols[3], dtype=float),
            np.array(cols[4], dtype=float))


def rotate_stack(stack: np.ndarray, theta: float, method: str = "bilinear",
                 npad: int | None = None, adjoint: bool = False, kernels=None) -> np.ndarray:
    """Rotate every z-slice of an ``(nx, ny, nz)`` stack (or apply the adjoint).

    The slice is embedded in a centered ``npad`` x ``npad`` plane, rotated
    there and cropped back to ``(nx, ny)``.
    """
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ShapeError(f"expected an (nx, ny, nz) stack, got shape {stack.shape}")
    nx, ny, _ = stack.shape
    npad = padded_size(nx, ny) if npad is None else npad
    if npad < max(nx, ny):
        raise ShapeError(f"working plane {npad} smaller than slice {nx}x{ny}")
    k = kernels or backend.kernels
    src = np.ascontiguousarray(stack, dtype=np.float64)
    out = np.empty_like(src)
    k.rotate(src, out, npad, method_code(method), *rotation_params(theta), adjoint)
    return out.astype(stack.dtype if stack.dtype in (np.float32, np.float64) else np.float64, copy=False)


def _check_plane(p) -> np.ndarray:
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ShapeError(f"plane must be square 2D, got shape {p.shape}")
    return p


def rotate_plane(p: np.ndarray, theta: float, method: str = "bilinear", kernels=None) -> np.ndarray:
    """Rotate a square plane by ``theta`` radians about its center."""
    p = _check_plane(p)
    return rotate_stack(p[:, :, None], theta, method, p.shape[0], False, kernels)[:, :, 0]


def rotate_plane_adjoint(p: np.ndarray, theta: float, method: str = "bilinear", kernels=None) -> np.ndarray:
    """Transpose of :func:`rotate_plane` for the same angle and method."""
    p = _check_plane(p)
    return rotate_stack(p[:, :, None], theta, method, p.shape[0], True, kernels)[:, :, 0]
