"""Three-layer residual 3D CNN regularizer, its reverse-mode gradients, and AdamW.

Layers are 3x3x3 cross-correlations with replicate padding and channel
widths 1 -> 4 -> 4 -> 1. ReLU follows the first two layers and the network
output is added to its input. Everything runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import ParameterError, ShapeError, TrainingError, UsageError, Volume, _read_pair, _write_pair

WIDTHS = (1, 4, 4, 1)
N_PARAMS = 657
PARAM_NAMES = ("layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias",
               "layer3.weight", "layer3.bias")
ACTIVATIONS = ("relu", "identity")


def _param_shapes():
    shapes = []
    for cin, cout in zip(WIDTHS[:-1], WIDTHS[1:]):
        shapes += [(cout, cin, 3, 3, 3), (cout,)]
    return shapes


class NetworkWeights:
    """Parameters of one regularizer network, in layer order w1, b1, w2, b2, w3, b3.

    ``version`` increases on every in-place change so tapes recorded with
    older values can be detected.
    """

    def __init__(self, params):
        params = [np.array(p, dtype=np.float64) for p in params]
        shapes = _param_shapes()
        if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
            raise ShapeError(f"expected parameter shapes {shapes}")
        self.params = params
        self.version = 0
        assert self.size == N_PARAMS

    @classmethod
    def zeros(cls) -> "NetworkWeights":
        return cls([np.zeros(s) for s in _param_shapes()])

    @classmethod
    def gaussian(cls, seed: int, zero_last: bool = False) -> "NetworkWeights":
        """He-style init: weights ~ N(0, 2 / fan_in), biases zero."""
        rng = np.random.default_rng(seed)
        params = []
        for n, s in enumerate(_param_shapes()):
            if len(s) == 1 or (zero_last and n >= 4):
                params.append(np.zeros(s))
            else:
                fan_in = s[1] * 27
                params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), s))
        return cls(params)

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    @classmethod
    def from_vector(cls, vec) -> "NetworkWeights":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (N_PARAMS,):
            raise ShapeError(f"expected a vector of {N_PARAMS} parameters, got shape {vec.shape}")
        out, pos = [], 0
        for s in _param_shapes():
            n = int(np.prod(s))
            out.append(vec[pos:pos + n].reshape(s))
            pos += n
        return cls(out)

    def set_vector(self, vec) -> None:
        new = NetworkWeights.from_vector(vec)
        for p, q in zip(self.params, new.params):
            p[...] = q
        self.bump()

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.params)

    def __eq__(self, other) -> bool:
        return isinstance(other, NetworkWeights) and all(
            np.array_equal(p, q) for p, q in zip(self.params, other.params))

    __hash__ = None


def save_weights(w: NetworkWeights, path) -> None:
    """JSON manifest plus a little-endian float64 blob in layer order."""
    _write_pair(path, w.to_vector(), {
        "layers": [{"name": n, "shape": list(p.shape)} for n, p in zip(PARAM_NAMES, w.params)]},
        dtype="f64le")


def load_weights(path) -> NetworkWeights:
    vec, _ = _read_pair(path, 1)
    return NetworkWeights.from_vector(vec)


# -- convolution --------------------------------------------------------------

def _taps():
    for a in range(3):
        for b in range(3):
            for c in range(3):
                yield a, b, c


def conv3_forward(inp: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3x3 cross-correlation of ``(C_in, nx, ny, nz)`` with edge replication.

    ``weight`` is ``(C_out, C_in, 3, 3, 3)``; the output keeps the spatial shape.
    """
    inp = np.asarray(inp, dtype=np.float64)
    if inp.ndim != 4 or weight.ndim != 5 or inp.shape[0] != weight.shape[1]:
        raise ShapeError(f"input {inp.shape} does not match layer weights {weight.shape}")
    _, nx, ny, nz = inp.shape
    pad = np.pad(inp, ((0, 0), (1, 1), (1, 1), (1, 1)), mode="edge")
    out = np.empty((weight.shape[0], nx, ny, nz))
    out[...] = bias[:, None, None, None]
    for a, b, c in _taps():
        out += np.tensordot(weight[:, :, a, b, c], pad[:, a:a + nx, b:b + ny, c:c + nz], axes=1)
    return out


def _fold_edges(g: np.ndarray) -> np.ndarray:
    """Adjoint of one-voxel edge padding on the three spatial axes."""
    for ax in (1, 2, 3):
        g = np.moveaxis(g, ax, 0).copy()
        g[1] += g[0]
        g[-2] += g[-1]
        g = np.moveaxis(g[1:-1], 0, ax)
    return g


def conv3_backward(inp: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Gradients of :func:`conv3_forward` w.r.t. input, weight and bias."""
    _, nx, ny, nz = inp.shape
    pad = np.pad(inp, ((0, 0), (1, 1), (1, 1), (1, 1)), mode="edge")
    gpad = np.zeros(pad.shape)
    gw = np.empty(weight.shape)
    for a, b, c in _taps():
        win = pad[:, a:a + nx, b:b + ny, c:c + nz]
        gw[:, :, a, b, c] = np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))
        gpad[:, a:a + nx, b:b + ny, c:c + nz] += np.tensordot(weight[:, :, a, b, c], grad_out, axes=([0], [0]))
    gb = grad_out.sum(axis=(1, 2, 3))
    return _fold_edges(gpad), gw, gb


# -- regularizer --------------------------------------------------------------

@dataclass
class RegularizerTape:
    weights: NetworkWeights
    version: int
    activation: str
    x: np.ndarray
    pre: list = field(default_factory=list)    # layer inputs h0, h1, h2
    z: list = field(default_factory=list)      # pre-activations of layers 1, 2


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def regularizer_forward(x, w: NetworkWeights, activation: str = "relu"):
    """``u = x + net(x)``; returns ``(u, tape)``. Volumes come back as Volumes."""
    if activation not in ACTIVATIONS:
        raise ParameterError(f"activation must be one of {ACTIVATIONS}")
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"regularizer input must be 3D, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TrainingError("non-finite regularizer input")
    p = w.params
    tape = RegularizerTape(w, w.version, activation, arr)
    h = arr[None]
    for layer in range(3):
        tape.pre.append(h)
        z = conv3_forward(h, p[2 * layer], p[2 * layer + 1])
        if layer < 2:
            tape.z.append(z)
            h = _act(z, activation)
        else:
            h = z
    u = arr + h[0]
    if isinstance(x, Volume):
        return Volume(u, x.voxel_size), tape
    return u, tape


def regularizer_backward(tape: RegularizerTape, grad_u):
    """Reverse pass: returns ``(grad_x, grad_w)`` with ``grad_w`` a NetworkWeights."""
    if tape.weights.version != tape.version:
        raise UsageError("tape is stale: weights changed after the forward pass")
    g = np.asarray(getattr(grad_u, "data", grad_u), dtype=np.float64)
    if g.shape != tape.x.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tape input {tape.x.shape}")
    p = tape.weights.params
    grads = [None] * 6
    gh = g[None]
    for layer in (2, 1, 0):
        if layer < 2 and tape.activation == "relu":
            gh = gh * (tape.z[layer] > 0)
        gh, grads[2 * layer], grads[2 * layer + 1] = conv3_backward(tape.pre[layer], p[2 * layer], gh)
    return g + gh[0], NetworkWeights(grads)


# -- optimizer ----------------------------------------------------------------

@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, w: NetworkWeights) -> "OptimState":
        return cls([np.zeros_like(p) for p in w.params], [np.zeros_like(p) for p in w.params])


def adamw_step(w: NetworkWeights, g: NetworkWeights, s: OptimState, hyper: AdamWHyper = AdamWHyper(),
               name: str = "net"):
    """One decoupled-weight-decay Adam step, applied in place; returns ``(w, s)``."""
    for pname, gp in zip(PARAM_NAMES, g.params):
        if not np.all(np.isfinite(gp)):
            raise TrainingError(f"non-finite gradient in {name}.{pname}")
    s.step += 1
    c1 = 1.0 - hyper.beta1 ** s.step
    c2 = 1.0 - hyper.beta2 ** s.step
    for p, gp, m, v in zip(w.params, g.params, s.m, s.v):
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * gp
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * gp * gp
        p -= hyper.lr * ((m / c1) / (np.sqrt(v / c2) + hyper.eps) + hyper.weight_decay * p)
    w.bump()
    return w, s
