"""Poisson-likelihood EM reconstruction: MLEM, OSEM and the regularized EM step.

Iterates are held in float64. Voxels whose sensitivity ``A'1`` is below
``SENS_FLOOR`` lie outside the field of view and are pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, ParameterError, ProjectionViews, ShapeError, ValidationError, Volume
from .projector import SystemModel

SENS_FLOOR = 1e-12
DENOM_FLOOR = 1e-12


@dataclass(eq=False)
class PoissonProblem:
    """Measurements ``y ~ Poisson(A x + r_bar)`` with known background."""

    y: np.ndarray
    r_bar: np.ndarray
    model: SystemModel

    def __post_init__(self):
        self.y = np.asarray(getattr(self.y, "data", self.y), dtype=np.float64)
        r = np.asarray(getattr(self.r_bar, "data", self.r_bar), dtype=np.float64)
        if np.ndim(r) == 0:
            r = np.full(self.model.views_shape, float(r))
        self.r_bar = r
        if self.y.shape != self.model.views_shape or r.shape != self.model.views_shape:
            raise ShapeError(f"y {self.y.shape} and r_bar {r.shape} must match views {self.model.views_shape}")
        if np.any(self.y < 0) or not np.all(np.isfinite(self.y)):
            raise ValidationError("measurements must be finite and nonnegative")
        if np.any(r <= 0) or not np.all(np.isfinite(r)):
            raise ValidationError("background means must be finite and strictly positive")
        self._sens: dict[tuple[int, int], np.ndarray] = {}

    def sensitivity(self, index: int = 0, n_subsets: int = 1) -> np.ndarray:
        """``A_s' 1`` for subset ``index`` of ``n_subsets`` (cached)."""
        key = (index, n_subsets)
        if key not in self._sens:
            sub = self.model.subset(index, n_subsets)
            self._sens[key] = sub.back(np.ones(sub.views_shape))
        return self._sens[key]

    def fov_mask(self) -> np.ndarray:
        return self.sensitivity() >= SENS_FLOOR

    def subset_data(self, index: int, n_subsets: int):
        sel = slice(index, None, n_subsets)
        return self.model.subset(index, n_subsets), self.y[:, :, sel], self.r_bar[:, :, sel]


def poisson_loglik(y: np.ndarray, ybar: np.ndarray) -> float:
    """``sum(y log ybar - ybar)`` with ``0 log 0 = 0``."""
    ybar = np.asarray(ybar, dtype=np.float64)
    terms = np.where(y > 0, y * np.log(np.where(y > 0, ybar, 1.0)), 0.0) - ybar
    return float(terms.sum())


def _array(x) -> np.ndarray:
    return np.array(getattr(x, "data", x), dtype=np.float64)


def _wrap(like, data):
    return Volume(data.astype(np.float32), like.voxel_size) if isinstance(like, Volume) else data


def _check_start(prob: PoissonProblem, x0) -> np.ndarray:
    x = _array(x0)
    if x.shape != prob.model.shape:
        raise ShapeError(f"start image {x.shape} does not match model {prob.model.shape}")
    if np.any(x < 0):
        raise DomainError("start image has negative entries")
    return x


def _em_subiteration(x, prob, index, n_subsets, mask):
    model, y, r = prob.subset_data(index, n_subsets)
    sens = prob.sensitivity(index, n_subsets)
    ybar = np.maximum(model.forward(x) + r, DENOM_FLOOR)
    back = model.back(y / ybar)
    upd = mask & (sens >= SENS_FLOOR)
    return np.where(upd, x * back / np.where(upd, sens, 1.0), np.where(mask, x, 0.0))


def osem(prob: PoissonProblem, x0, n_iter: int, n_subsets: int, callback=None):
    """Ordered-subset EM; subset ``s`` holds views ``s, s + n_subsets, ...``.

    One iteration visits every subset once.
    """
    if n_iter < 0:
        raise ParameterError("n_iter must be >= 0")
    if n_subsets < 1 or prob.model.nview % n_subsets:
        raise ParameterError(f"n_subsets={n_subsets} must divide nview={prob.model.nview}")
    x = _check_start(prob, x0)
    mask = prob.fov_mask()
    x = np.where(mask, x, 0.0)
    for it in range(n_iter):
        for s in range(n_subsets):
            x = _em_subiteration(x, prob, s, n_subsets, mask)
        if callback is not None:
            callback(it, x)
    return _wrap(x0, x)


def mlem(prob: PoissonProblem, x0, n_iter: int, callback=None):
    """Maximum-likelihood EM: ``x <- x * A'(y / (A x + r)) / A'1``."""
    if n_iter < 1:
        raise ParameterError("n_iter must be positive")
    return osem(prob, x0, n_iter, 1, callback)


def stable_root(d: np.ndarray, c: np.ndarray, beta: float) -> np.ndarray:
    """Nonnegative root of ``beta x^2 + d x - c = 0`` for ``c >= 0``.

    Uses ``2c / (d + sqrt(d^2 + 4 beta c))`` where ``d >= 0`` and the
    textbook form where ``d < 0`` so neither branch cancels.
    """
    disc = np.sqrt(d * d + 4.0 * beta * c)
    pos = d >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        r_pos = np.where(d + disc > 0, 2.0 * c / (d + disc), 0.0)
        r_neg = (disc - d) / (2.0 * beta) if beta > 0 else np.zeros_like(d)
    return np.where(pos, r_pos, r_neg)


def literal_root(d: np.ndarray, c: np.ndarray, beta: float) -> np.ndarray:
    """``(-d + sqrt(d^2 + 4 beta c)) / (2 beta)`` exactly as written; needs beta > 0."""
    return (-d + np.sqrt(d * d + 4.0 * beta * c)) / (2.0 * beta)


@dataclass
class InnerStep:
    """Intermediates of one inner EM step, kept for reverse-mode sweeps."""

    z: np.ndarray       # iterate entering the step
    ybar: np.ndarray    # A z + r (before flooring)
    e: np.ndarray       # A'(y / ybar)
    d: np.ndarray       # A'1 - beta u
    disc: np.ndarray    # sqrt(d^2 + 4 beta z e)
    out: np.ndarray     # iterate leaving the step


def reg_em_step(z: np.ndarray, u: np.ndarray, beta: float, prob: PoissonProblem,
                mask: np.ndarray | None = None) -> InnerStep:
    sens = prob.sensitivity()
    if mask is None:
        mask = sens >= SENS_FLOOR
    ybar = prob.model.forward(z) + prob.r_bar
    e = prob.model.back(prob.y / np.maximum(ybar, DENOM_FLOOR))
    d = sens - beta * u
    c = z * e
    disc = np.sqrt(d * d + 4.0 * beta * c)
    out = np.where(mask, stable_root(d, c, beta), 0.0)
    return InnerStep(z, ybar, e, d, disc, out)


def regularized_em_update(x_k, u_k, beta: float, prob: PoissonProblem, n_inner: int = 1,
                          tol: float | None = None):
    """Inner EM iterations for ``f(x) + beta/2 ||x - u_k||^2`` from ``x_k``.

    Each step solves ``beta x^2 + d x - x e = 0`` with ``d = A'1 - beta u_k``
    and ``e = A'(y / (A x + r))``. With ``tol`` set, stops early once the
    relative change falls below it.
    """
    if beta < 0:
        raise ParameterError(f"beta must be >= 0, got {beta}")
    if n_inner < 1:
        raise ParameterError("n_inner must be >= 1")
    x = _check_start(prob, x_k)
    u = _array(u_k)
    mask = prob.fov_mask()
    for _ in range(n_inner):
        new = reg_em_step(x, u, beta, prob, mask).out
        done = tol is not None and np.linalg.norm(new - x) <= tol * max(np.linalg.norm(x), 1e-300)
        x = new
        if done:
            break
    return _wrap(x_k, x)
