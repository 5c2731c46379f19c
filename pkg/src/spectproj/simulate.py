"""Ellipsoid phantoms, noisy measurement simulation and VOI error metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .core import (DegenerateInputError, ParameterError, ProjectionViews, ShapeError,
                   UndefinedMetricError, Volume)
from .projector import SystemModel


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid; center and semi-axes in voxels (0-based index coordinates)."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    activity: float
    attenuation: float
    label: str

    def __post_init__(self):
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise ParameterError("center and semi_axes need three entries")
        if min(self.semi_axes) <= 0:
            raise ParameterError(f"semi-axes of {self.label!r} must be positive")
        if self.activity < 0 or self.attenuation < 0:
            raise ParameterError(f"activity and attenuation of {self.label!r} must be >= 0")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (4.8, 4.8, 4.8)
    ellipsoids: tuple[Ellipsoid, ...] = ()
    background_attenuation: float = 0.0

    def __post_init__(self):
        labels = [e.label for e in self.ellipsoids]
        if len(set(labels)) != len(labels):
            raise ParameterError("ellipsoid labels must be unique")
        if len(labels) > 254:
            raise ParameterError("at most 254 labeled regions")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ParameterError(f"bad grid shape {self.shape}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        ells = tuple(Ellipsoid(tuple(e["center"]), tuple(e["semi_axes"]), float(e["activity"]),
                               float(e.get("attenuation", 0.0)), str(e["label"]))
                     for e in d.get("ellipsoids", []))
        return cls(tuple(d["shape"]), tuple(d.get("voxel_size", (4.8, 4.8, 4.8))), ells,
                   float(d.get("background_attenuation", 0.0)))

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "voxel_size": list(self.voxel_size),
                "background_attenuation": self.background_attenuation,
                "ellipsoids": [{"center": list(e.center), "semi_axes": list(e.semi_axes),
                                "activity": e.activity, "attenuation": e.attenuation,
                                "label": e.label} for e in self.ellipsoids]}


@dataclass
class VoiMask:
    """Label volume (0 = unlabeled) with a name -> value legend."""

    labels: np.ndarray
    legend: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self.legend:
            raise KeyError(f"unknown VOI label {name!r}")
        return self.labels == self.legend[name]

    def names(self) -> list[str]:
        return list(self.legend)


def make_phantom(spec: PhantomSpec, seed: int = 0, jitter: float = 0.0):
    """Rasterize ``spec``; returns ``(activity, attenuation, VoiMask)``.

    Later ellipsoids override earlier ones. ``jitter > 0`` multiplies the
    activity by ``1 + jitter * N(0, 1)`` texture (clipped at 0).
    """
    nx, ny, nz = spec.shape
    act = np.zeros(spec.shape)
    att = np.full(spec.shape, spec.background_attenuation)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    legend, warnings = {}, []
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    for n, e in enumerate(spec.ellipsoids, start=1):
        r2 = sum(((g - c) / a) ** 2 for g, c, a in zip((ii, jj, kk), e.center, e.semi_axes))
        inside = r2 <= 1.0
        legend[e.label] = n
        if not inside.any():
            warnings.append(f"ellipsoid {e.label!r} covers no voxel of the grid")
            continue
        act[inside] = e.activity
        att[inside] = e.attenuation
        labels[inside] = n
    if jitter > 0:
        noise = np.random.default_rng(seed).standard_normal(spec.shape)
        act = np.maximum(act * (1.0 + jitter * noise), 0.0)
    return (Volume(act.astype(np.float32), spec.voxel_size),
            Volume(att.astype(np.float32), spec.voxel_size),
            VoiMask(labels, legend, warnings))


# -- measurements -------------------------------------------------------------

def count_scale(x_true, model: SystemModel, scatter_fraction: float, total_counts: float) -> float:
    """Factor mapping activity units to expected primary counts."""
    p = model.forward(np.asarray(getattr(x_true, "data", x_true), dtype=np.float64))
    total = float(p.sum())
    if not total > 0:
        raise DegenerateInputError("forward projection of the phantom is zero")
    return total_counts / ((1.0 + scatter_fraction) * total)


def simulate_measurements(x_true, model: SystemModel, scatter_fraction: float, total_counts: float,
                          seed: int):
    """Poisson counts with a uniform background; returns ``(y, r_bar)``.

    Primary projections are scaled so that primaries plus background add up
    to ``total_counts`` in expectation, with the background carrying
    ``scatter_fraction`` of the primary total.
    """
    if scatter_fraction < 0:
        raise ParameterError("scatter_fraction must be >= 0")
    if not total_counts > 0:
        raise ParameterError("total_counts must be positive")
    x = np.asarray(getattr(x_true, "data", x_true), dtype=np.float64)
    if np.any(x < 0):
        raise ParameterError("x_true must be nonnegative")
    scale = count_scale(x, model, scatter_fraction, total_counts)
    p = scale * model.forward(x)
    r = np.full(p.shape, scatter_fraction * p.sum() / p.size)
    y = rng.poisson(np.maximum(p, 0.0) + r, seed).astype(np.float32)
    return (ProjectionViews(y, model.angles),
            ProjectionViews(r.astype(np.float32), model.angles))


# -- metrics ------------------------------------------------------------------

def _prepare(x_hat, x_true, mask):
    a = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float64)
    b = np.asarray(getattr(x_true, "data", x_true), dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or m.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape}, {b.shape}, mask {m.shape}")
    if not m.any():
        raise UndefinedMetricError("empty VOI")
    sa, sb = a.sum(), b.sum()
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("cannot normalize a volume with zero total activity")
    return a[m] / sa, b[m] / sb


def mae(x_hat, x_true, mask) -> float:
    """``|1 - mean(x_hat[VOI]) / mean(x_true[VOI])| * 100`` after unit-total normalization."""
    a, b = _prepare(x_hat, x_true, mask)
    if b.mean() == 0:
        raise UndefinedMetricError("true mean over the VOI is zero")
    return float(abs(1.0 - a.mean() / b.mean()) * 100.0)


def nrmse(x_hat, x_true, mask) -> float:
    """RMS error over the VOI divided by ``sqrt(sum(x_true[VOI])**2 / n_p)``, in percent.

    The denominator squares the VOI total rather than summing squares, so for
    a flat region the value is ``sqrt(n_p)`` times below the conventional NRMSE.
    Both volumes are normalized to unit total first.
    """
    a, b = _prepare(x_hat, x_true, mask)
    n = a.size
    denom = np.sqrt(b.sum() ** 2 / n)
    if denom == 0:
        raise UndefinedMetricError("true sum over the VOI is zero")
    return float(100.0 * np.sqrt(np.sum((a - b) ** 2) / n) / denom)
