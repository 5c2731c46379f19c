"""Accumulated attenuation along parallel rays toward the detector."""

import numpy as np

from . import backend
from .core import DomainError, ParameterError, ShapeError


def accumulate_attenuation(mu_rot, delta_y: float, kernels=None) -> np.ndarray:
    """Survival factor for every voxel of a rotated attenuation map.

    ``mu_rot`` has shape ``(nx, ny, nz)`` in mm^-1 with plane ``ny-1`` next
    to the detector. Each voxel is attenuated by half of itself plus all
    voxels between it and the detector::

        out[i, j, k] = exp(-delta_y * (mu[i, j, k] / 2 + sum(mu[i, j+1:, k])))

    computed with one reverse running sum per ray.
    """
    mu = np.asarray(getattr(mu_rot, "data", mu_rot))
    if mu.ndim != 3:
        raise ShapeError(f"attenuation map must be 3D, got shape {mu.shape}")
    if not delta_y > 0:
        raise ParameterError(f"delta_y must be positive, got {delta_y}")
    if np.any(mu < 0):
        raise DomainError("attenuation map has negative entries")
    k = kernels or backend.kernels
    src = np.ascontiguousarray(mu, dtype=np.float64)
    out = np.empty_like(src)
    k.attenuation(src, float(delta_y), out)
    return out
