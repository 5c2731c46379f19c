"""Depth-dependent Gaussian PSFs and replicate-padded 2D convolution."""

from __future__ import annotations

import math

import numpy as np

from . import backend
from .core import ParameterError, PsfStack, ShapeError, check_symmetric

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.3548...


def gaussian_kernel(fwhm_mm: float, kernel_size: tuple[int, int], voxel_size: float) -> np.ndarray:
    """Sampled isotropic 2D Gaussian normalized to unit sum.

    A FWHM below half a voxel gives a centered delta.
    """
    px, pz = kernel_size
    if px % 2 == 0 or pz % 2 == 0 or px < 1 or pz < 1:
        raise ParameterError(f"kernel size must be odd, got {px}x{pz}")
    if not fwhm_mm > 0:
        raise ParameterError(f"FWHM must be positive, got {fwhm_mm}")
    k = np.zeros((px, pz))
    if fwhm_mm < 0.5 * voxel_size:
        k[px // 2, pz // 2] = 1.0
        return k
    sigma = fwhm_mm / FWHM_PER_SIGMA / voxel_size
    ox = np.arange(px) - px // 2
    oz = np.arange(pz) - pz // 2
    k = np.exp(-(ox[:, None] ** 2 + oz[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_psf(fwhm_by_depth, kernel_size: tuple[int, int], voxel_size: float, nview: int) -> PsfStack:
    """One Gaussian kernel per depth plane, replicated across ``nview`` views.

    ``fwhm_by_depth[j]`` is the FWHM in mm for plane ``j`` (``j = ny-1``
    closest to the detector).
    """
    fwhm = np.asarray(fwhm_by_depth, dtype=float).reshape(-1)
    if nview < 1:
        raise ParameterError("nview must be >= 1")
    ks = np.stack([gaussian_kernel(f, kernel_size, voxel_size) for f in fwhm], axis=2)
    return PsfStack(np.repeat(ks[:, :, :, None], nview, axis=3))


def linear_fwhm(ny: int, voxel_size: float, near_mm: float, slope_mm_per_mm: float) -> np.ndarray:
    """FWHM growing linearly with distance from the detector face.

    Plane ``ny-1`` is half a voxel from the face.
    """
    dist = (ny - 1 - np.arange(ny) + 0.5) * voxel_size
    return near_mm + slope_mm_per_mm * dist


def delta_psf(ny: int, nview: int, kernel_size: tuple[int, int] = (1, 1)) -> PsfStack:
    px, pz = kernel_size
    k = np.zeros((px, pz, ny, nview))
    k[px // 2, pz // 2] = 1.0
    return PsfStack(k)


def _check(plane, kernel):
    plane = np.asarray(plane)
    kernel = np.asarray(kernel, dtype=np.float64)
    if plane.ndim != 2 or kernel.ndim != 2:
        raise ShapeError("plane and kernel must be 2D")
    px, pz = kernel.shape
    if px % 2 == 0 or pz % 2 == 0:
        raise ParameterError(f"kernel dims must be odd, got {px}x{pz}")
    if px > 2 * plane.shape[0] - 1 or pz > 2 * plane.shape[1] - 1:
        raise ShapeError(f"kernel {px}x{pz} larger than the padded plane {plane.shape}")
    return plane, kernel


def convolve_slice(plane, kernel, kernels=None) -> np.ndarray:
    """Replicate-pad ``plane``, convolve with ``kernel`` via FFT, crop back."""
    plane, kernel = _check(plane, kernel)
    k = kernels or backend.kernels
    out = np.empty(plane.shape)
    k.conv2d(np.ascontiguousarray(plane, dtype=np.float64), np.ascontiguousarray(kernel), out, False)
    return out


def convolve_slice_adjoint(plane, kernel, kernels=None) -> np.ndarray:
    """Transpose of :func:`convolve_slice`; ``kernel`` must be symmetric.

    Zero-pads, convolves with the same kernel, then folds the border cells
    back onto the edge samples they were replicated from.
    """
    plane, kernel = _check(plane, kernel)
    check_symmetric(kernel)
    k = kernels or backend.kernels
    out = np.empty(plane.shape)
    k.conv2d(np.ascontiguousarray(plane, dtype=np.float64), np.ascontiguousarray(kernel), out, True)
    return out
