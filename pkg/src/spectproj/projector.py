"""System model ``A`` and its exact adjoint.

For each view the activity and attenuation maps are rotated, the activity
is weighted by the accumulated attenuation, every depth plane is blurred
with its PSF and the planes are summed onto the detector. The backprojector
applies the transpose of each stage in reverse order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import backend
from .core import (ParameterError, ProjectionViews, PsfStack, ShapeError, ValidationError,
                   Volume, check_angles)
from .rotation import batch_params, method_code, padded_size

MAX_EXPLICIT_ENTRIES = 10_000_000


class SystemModel:
    """Geometry, PSF and attenuation bundled as a linear operator.

    Work buffers for ``threads`` concurrent views are allocated at
    construction; calls that find the default buffers in use (or ask for
    another thread count) get their own set from a pool.
    """

    def __init__(self, psf: PsfStack, angles, attenuation: Volume | None = None,
                 shape: tuple[int, int, int] | None = None, voxel_size=None,
                 rotation_method: str = "bilinear", threads: int = 1, kernels=None):
        angles = np.asarray(angles, dtype=np.float64).reshape(-1)
        check_angles(angles)
        if attenuation is not None:
            shape = attenuation.shape
            voxel_size = attenuation.voxel_size
            if np.any(attenuation.data < 0):
                raise ValidationError("attenuation map has negative entries")
            if not np.all(np.isfinite(attenuation.data)):
                raise ValidationError("attenuation map has non-finite entries")
        if shape is None:
            raise ParameterError("shape is required when no attenuation map is given")
        shape = tuple(int(n) for n in shape)
        voxel_size = Volume(np.zeros((1, 1, 1)), voxel_size or (4.8, 4.8, 4.8)).voxel_size
        if psf.shape[2] != shape[1] or psf.shape[3] != angles.size:
            raise ShapeError(f"psf shape {psf.shape} does not match ny={shape[1]}, nview={angles.size}")
        if threads < 1:
            raise ParameterError("threads must be >= 1")

        self.shape = shape
        self.voxel_size = voxel_size
        self.angles = angles
        self.psf = psf
        self.attenuation = attenuation
        self.rotation_method = rotation_method
        self.threads = int(threads)
        self.kernels = kernels or backend.kernels
        self.npad = padded_size(shape[0], shape[1])
        mu = None
        if attenuation is not None and np.any(attenuation.data != 0):
            mu = attenuation.data
        self._plan = self.kernels.Plan(shape, self.npad, mu, voxel_size[1], psf.kernels,
                                       psf.view_invariant, batch_params(angles),
                                       method_code(rotation_method))
        self._lock = threading.Lock()
        self._free: dict[int, list] = {self.threads: [self._plan.new_workspace(self.threads)]}
        self._subsets: dict[tuple[int, int], SystemModel] = {}

    # -- shapes ---------------------------------------------------------------

    @property
    def nview(self) -> int:
        return self.angles.size

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.shape

    @property
    def views_shape(self) -> tuple[int, int, int]:
        return (self.shape[0], self.shape[2], self.nview)

    @property
    def backend(self) -> str:
        return backend.name_of(self.kernels)

    # -- workspaces -----------------------------------------------------------

    def new_workspace(self, threads: int | None = None):
        """Fresh, independent buffer set for ``threads`` concurrent views."""
        return self._plan.new_workspace(threads or self.threads)

    @contextmanager
    def workspace(self, threads: int):
        with self._lock:
            free = self._free.get(threads)
            ws = free.pop() if free else None
        if ws is None:
            ws = self._plan.new_workspace(threads)
        try:
            yield ws
        finally:
            with self._lock:
                self._free.setdefault(threads, []).append(ws)

    def workspace_nbytes(self, threads: int | None = None) -> int:
        with self.workspace(threads or self.threads) as ws:
            return ws.nbytes

    # -- operators ------------------------------------------------------------

    def forward(self, x: np.ndarray, out: np.ndarray | None = None, threads: int | None = None) -> np.ndarray:
        """``A x`` for an ``(nx, ny, nz)`` array; output dtype follows ``x``."""
        x = _as_real(x)
        if x.shape != self.shape:
            raise ShapeError(f"image shape {x.shape} does not match model {self.shape}")
        out = _output(out, self.views_shape, x.dtype)
        T = threads or self.threads
        with self.workspace(T) as ws:
            self._plan.forward(x, out, ws, T)
        return out

    def back(self, v: np.ndarray, out: np.ndarray | None = None, threads: int | None = None) -> np.ndarray:
        """``A' v`` for an ``(nx, nz, nview)`` array; output dtype follows ``v``."""
        v = _as_real(v)
        if v.shape != self.views_shape:
            raise ShapeError(f"views shape {v.shape} does not match model {self.views_shape}")
        out = _output(out, self.shape, v.dtype)
        T = threads or self.threads
        with self.workspace(T) as ws:
            self._plan.back(v, out, ws, T)
        return out

    def subset(self, index: int, n_subsets: int) -> "SystemModel":
        """Model restricted to views ``index, index + n_subsets, ...``."""
        key = (index, n_subsets)
        if n_subsets == 1:
            return self
        if key not in self._subsets:
            sel = slice(index, None, n_subsets)
            self._subsets[key] = SystemModel(
                PsfStack(self.psf.kernels[..., sel]), self.angles[sel], self.attenuation,
                shape=self.shape, voxel_size=self.voxel_size,
                rotation_method=self.rotation_method, threads=self.threads, kernels=self.kernels)
        return self._subsets[key]

    def with_psf(self, psf: PsfStack) -> "SystemModel":
        return SystemModel(psf, self.angles, self.attenuation, shape=self.shape,
                           voxel_size=self.voxel_size, rotation_method=self.rotation_method,
                           threads=self.threads, kernels=self.kernels)


def _as_real(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if not a.flags.c_contiguous:
        a = np.ascontiguousarray(a)
    return a


def _output(out, shape, dtype) -> np.ndarray:
    if out is None:
        return np.empty(shape, dtype=dtype)
    if out.shape != tuple(shape) or out.dtype != dtype or not out.flags.c_contiguous:
        raise ShapeError(f"out must be C-contiguous {dtype} with shape {shape}")
    return out


def forward_project(x, model: SystemModel, threads: int | None = None) -> ProjectionViews:
    """Project a volume onto all detector views."""
    data = x.data if isinstance(x, Volume) else x
    return ProjectionViews(model.forward(data, threads=threads), model.angles)


def back_project(v, model: SystemModel, threads: int | None = None) -> Volume:
    """Exact adjoint of :func:`forward_project`."""
    data = v.data if isinstance(v, ProjectionViews) else v
    return Volume(model.back(data, threads=threads), model.voxel_size)


def _guard(model: SystemModel):
    n = int(np.prod(model.shape))
    m = int(np.prod(model.views_shape))
    if n * m > MAX_EXPLICIT_ENTRIES:
        raise ParameterError(f"explicit matrix would have {n * m} entries; limit is {MAX_EXPLICIT_ENTRIES}")
    return m, n


def to_explicit_matrix(model: SystemModel, dtype=np.float32) -> np.ndarray:
    """Dense ``A``: column ``j`` is the projection of the ``j``-th unit voxel.

    Rows and columns follow the i-fastest flattening of views and volume.
    """
    m, n = _guard(model)
    mat = np.empty((m, n), dtype=dtype)
    e = np.zeros(model.shape, dtype=dtype)
    out = np.empty(model.views_shape, dtype=dtype)
    for j in range(n):
        idx = np.unravel_index(j, model.shape, order="F")
        e[idx] = 1
        model.forward(e, out=out)
        mat[:, j] = out.reshape(-1, order="F")
        e[idx] = 0
    return mat


def explicit_adjoint_matrix(model: SystemModel, dtype=np.float32) -> np.ndarray:
    """Dense backprojector: row ``i`` is ``A'`` applied to the ``i``-th unit view bin."""
    m, n = _guard(model)
    mat = np.empty((n, m), dtype=dtype)
    e = np.zeros(model.views_shape, dtype=dtype)
    out = np.empty(model.shape, dtype=dtype)
    for i in range(m):
        idx = np.unravel_index(i, model.views_shape, order="F")
        e[idx] = 1
        model.back(e, out=out)
        mat[:, i] = out.reshape(-1, order="F")
        e[idx] = 0
    return mat


def random_symmetric_kernels(rng: np.random.Generator, px: int, pz: int, count: tuple[int, ...]) -> np.ndarray:
    """Nonnegative kernels symmetric in both axes, each summing to one."""
    k = rng.random((px, pz) + count)
    k = k + k[::-1] + k[:, ::-1] + k[::-1, ::-1]
    return k / k.sum(axis=(0, 1), keepdims=True)


def random_system(rng: np.random.Generator, shape=(8, 8, 6), nview: int = 7, kernel_size=(3, 3),
                  mu_max: float = 0.05, rotation_method: str = "bilinear", threads: int = 1,
                  kernels=None) -> SystemModel:
    """Model with uniform random angles, attenuation in [0, mu_max) and random PSFs."""
    angles = np.sort(rng.uniform(0, 2 * np.pi, nview))
    mu = Volume(rng.uniform(0, mu_max, shape))
    psf = PsfStack(random_symmetric_kernels(rng, *kernel_size, (shape[1], nview)))
    return SystemModel(psf, angles, mu, rotation_method=rotation_method, threads=threads, kernels=kernels)


def adjoint_discrepancy(model: SystemModel, dtype=np.float32) -> tuple[float, float]:
    """``(||A' - A^T||_F, ||A||_F)`` from the materialized operators."""
    a = to_explicit_matrix(model, dtype).astype(np.float64)
    at = explicit_adjoint_matrix(model, dtype).astype(np.float64)
    return float(np.linalg.norm(at - a.T)), float(np.linalg.norm(a))
