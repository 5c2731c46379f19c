"""Unrolled CNN-regularized EM and its three training regimes.

The unrolled network alternates ``u = g_k(x)`` with regularized EM steps.
Gradients through the projector use its linearity: the pullback of
``w = A x`` is ``A' w_bar`` and the pullback of ``w = A' v`` is ``A w_bar``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ParameterError, TrainingError, UsageError
from .neural import (AdamWHyper, NetworkWeights, OptimState, RegularizerTape, adamw_step,
                     regularizer_backward, regularizer_forward, save_weights)
from .recon import DENOM_FLOOR, InnerStep, PoissonProblem, osem, reg_em_step

METHODS = ("sequential", "truncation", "end2end")
METHOD_ALIASES = {"seq": "sequential", "trunc": "truncation", "e2e": "end2end"}


@dataclass
class TrainConfig:
    K: int = 3
    n_inner: int = 1
    beta: float = 1.0
    epochs: int = 50
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    method: str = "end2end"
    seed: int = 0
    init: str = "gaussian"          # "gaussian" (last layer zero) or "zeros"
    activation: str = "relu"
    osem_iters: int = 16
    osem_subsets: int = 4
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.method = METHOD_ALIASES.get(self.method, self.method)
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.K < 0 or self.n_inner < 1 or self.beta < 0 or self.epochs < 0:
            raise ParameterError("need K >= 0, n_inner >= 1, beta >= 0 and epochs >= 0")

    @property
    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    prob: PoissonProblem
    x0: np.ndarray
    target: np.ndarray


def warm_start(prob: PoissonProblem, cfg: TrainConfig) -> np.ndarray:
    """OSEM reconstruction from a uniform image, used as ``x0``."""
    start = np.ones(prob.model.shape)
    return osem(prob, start, cfg.osem_iters, cfg.osem_subsets)


def make_sample(prob: PoissonProblem, target, cfg: TrainConfig, x0=None) -> Sample:
    x0 = warm_start(prob, cfg) if x0 is None else x0
    return Sample(prob, np.array(getattr(x0, "data", x0), dtype=np.float64),
                  np.array(getattr(target, "data", target), dtype=np.float64))


def init_nets(cfg: TrainConfig) -> list[NetworkWeights]:
    if cfg.init == "zeros":
        return [NetworkWeights.zeros() for _ in range(cfg.K)]
    if cfg.init != "gaussian":
        raise ParameterError(f"unknown init {cfg.init!r}")
    return [NetworkWeights.gaussian(cfg.seed * 1000 + k, zero_last=True) for k in range(cfg.K)]


def mse(x: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((x - target) ** 2))


# -- unrolled forward ---------------------------------------------------------

@dataclass
class OuterRecord:
    x: np.ndarray
    reg: RegularizerTape
    u: np.ndarray
    steps: list[InnerStep] = field(default_factory=list)


@dataclass
class UnrolledTape:
    outer: list[OuterRecord]
    x_final: np.ndarray
    versions: list[int]


def _finite(a: np.ndarray, k: int, node: str) -> None:
    if not np.all(np.isfinite(a)):
        raise TrainingError(f"non-finite {node} at outer iteration {k}")


def unrolled_forward(prob: PoissonProblem, x0, nets: list[NetworkWeights], cfg: TrainConfig):
    """Run ``len(nets)`` outer iterations from ``x0``; returns ``(x_K, tape)``."""
    x = np.array(getattr(x0, "data", x0), dtype=np.float64)
    if np.any(x < 0):
        raise ParameterError("warm start must be nonnegative")
    mask = prob.fov_mask()
    outer = []
    for k, w in enumerate(nets):
        u, reg = regularizer_forward(x, w, cfg.activation)
        _finite(u, k, "regularizer output")
        rec = OuterRecord(x, reg, u)
        z = x
        for _ in range(cfg.n_inner):
            step = reg_em_step(z, u, cfg.beta, prob, mask)
            _finite(step.out, k, "EM update")
            rec.steps.append(step)
            z = step.out
        outer.append(rec)
        x = z
    return x, UnrolledTape(outer, x, [w.version for w in nets])


# -- reverse sweeps -----------------------------------------------------------

def _reverse(tape: UnrolledTape, target, prob: PoissonProblem, nets, cfg: TrainConfig, through_projector: bool):
    if len(nets) != len(tape.outer) or any(w.version != v for w, v in zip(nets, tape.versions)):
        raise UsageError("tape does not match the given networks")
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    mask = prob.fov_mask()
    model, y, beta = prob.model, prob.y, cfg.beta
    xbar = 2.0 * (tape.x_final - target) / target.size
    grads: list[NetworkWeights | None] = [None] * len(nets)
    for k in range(len(tape.outer) - 1, -1, -1):
        rec = tape.outer[k]
        ubar = np.zeros_like(rec.u)
        zbar = xbar
        for st in reversed(rec.steps):
            obar = np.where(mask, zbar, 0.0)
            safe = st.disc > 0
            inv = np.where(safe, 1.0 / np.where(safe, st.disc, 1.0), 0.0)
            cbar = obar * inv
            dbar = -obar * st.out * inv
            ubar -= beta * dbar
            zbar = cbar * st.e
            if through_projector:
                ebar = cbar * st.z
                q = np.maximum(st.ybar, DENOM_FLOOR)
                qbar = -model.forward(ebar) * y / (q * q)
                qbar = np.where(st.ybar > DENOM_FLOOR, qbar, 0.0)
                zbar = zbar + model.back(qbar)
            _finite(zbar, k, "image gradient")
        gx, gw = regularizer_backward(rec.reg, ubar)
        _finite(gw.to_vector(), k, "network gradient")
        grads[k] = gw
        xbar = zbar + gx
    return grads


def e2e_gradient(tape: UnrolledTape, target, prob: PoissonProblem, nets, cfg: TrainConfig):
    """Exact gradient of ``mean((x_K - target)^2)`` w.r.t. every network."""
    return _reverse(tape, target, prob, nets, cfg, True)


def truncated_gradient(tape: UnrolledTape, target, prob: PoissonProblem, nets, cfg: TrainConfig):
    """As :func:`e2e_gradient` with every path through ``A`` or ``A'`` cut.

    ``e = A'(y / (A z + r))`` is held constant; the explicit ``z`` in
    ``c = z e`` and ``u`` in ``d = A'1 - beta u`` still carry gradient.
    """
    return _reverse(tape, target, prob, nets, cfg, False)


def unrolled_loss(sample: Sample, nets, cfg: TrainConfig) -> float:
    x, _ = unrolled_forward(sample.prob, sample.x0, nets, cfg)
    return mse(x, sample.target)


# -- training loops -----------------------------------------------------------

def _checkpoint(nets, cfg: TrainConfig, epoch: int, only: int | None = None) -> None:
    if not cfg.checkpoint_every or not cfg.checkpoint_dir or (epoch + 1) % cfg.checkpoint_every:
        return
    d = Path(cfg.checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    for k, w in enumerate(nets):
        if only is None or k == only:
            save_weights(w, d / f"net{k}_epoch{epoch + 1:04d}")


def _check_dataset(dataset):
    if not dataset:
        raise ParameterError("dataset is empty")


def sequential_train(dataset: list[Sample], cfg: TrainConfig, nets=None, validation=None, curves=None):
    """Train each network against the target in turn, then freeze it.

    Network ``k`` sees only the iterates produced by the already-frozen
    networks ``0..k-1``; no gradient crosses an EM update.
    """
    _check_dataset(dataset)
    if cfg.K < 1:
        raise ParameterError("sequential training needs K >= 1")
    nets = init_nets(cfg) if nets is None else nets
    validation = validation or []
    rng = np.random.default_rng(cfg.seed)
    xs = [s.x0 for s in dataset]
    vs = [s.x0 for s in validation]
    for k, w in enumerate(nets):
        state = OptimState.zeros_like(w)
        for epoch in range(cfg.epochs):
            for n in rng.permutation(len(dataset)):
                u, reg = regularizer_forward(xs[n], w, cfg.activation)
                _, gw = regularizer_backward(reg, 2.0 * (u - dataset[n].target) / u.size)
                adamw_step(w, gw, state, cfg.hyper, name=f"net{k}")
            if curves is not None:
                curves["train"].append(_stage_loss(xs, dataset, w, cfg))
                curves["valid"].append(_stage_loss(vs, validation, w, cfg))
            _checkpoint(nets, cfg, k * cfg.epochs + epoch, only=k)
        xs = [_em(s.prob, x, w, cfg) for s, x in zip(dataset, xs)]
        vs = [_em(s.prob, x, w, cfg) for s, x in zip(validation, vs)]
    return nets


def _stage_loss(xs, samples, w, cfg) -> float:
    if not samples:
        return float("nan")
    return float(np.mean([mse(regularizer_forward(x, w, cfg.activation)[0], s.target)
                          for x, s in zip(xs, samples)]))


def _em(prob, x, w, cfg):
    u, _ = regularizer_forward(x, w, cfg.activation)
    mask = prob.fov_mask()
    for _ in range(cfg.n_inner):
        x = reg_em_step(x, u, cfg.beta, prob, mask).out
    return x


def evaluate(samples: list[Sample], nets, cfg: TrainConfig) -> float:
    if not samples:
        return float("nan")
    return float(np.mean([unrolled_loss(s, nets, cfg) for s in samples]))


def train(dataset: list[Sample], validation: list[Sample], cfg: TrainConfig, nets=None):
    """Train with ``cfg.method``; returns ``(nets, {"train": [...], "valid": [...]})``.

    Curves hold one entry per epoch. Sequential training reports the
    per-network losses of each stage back to back.
    """
    _check_dataset(dataset)
    nets = init_nets(cfg) if nets is None else nets
    curves = {"train": [], "valid": []}
    if cfg.method == "sequential":
        sequential_train(dataset, cfg, nets, validation, curves)
        return nets, curves
    grad_fn = e2e_gradient if cfg.method == "end2end" else truncated_gradient
    states = [OptimState.zeros_like(w) for w in nets]
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        for n in rng.permutation(len(dataset)):
            s = dataset[n]
            _, tape = unrolled_forward(s.prob, s.x0, nets, cfg)
            grads = grad_fn(tape, s.target, s.prob, nets, cfg)
            for k, (w, g, st) in enumerate(zip(nets, grads, states)):
                adamw_step(w, g, st, cfg.hyper, name=f"net{k}")
        curves["train"].append(evaluate(dataset, nets, cfg))
        curves["valid"].append(evaluate(validation, nets, cfg))
        _checkpoint(nets, cfg, epoch)
    return nets, curves


def write_curves(curves: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["epoch", "train_mse", "valid_mse"])
        for i, (a, b) in enumerate(zip(curves["train"], curves["valid"])):
            wr.writerow([i + 1, repr(float(a)), repr(float(b))])
