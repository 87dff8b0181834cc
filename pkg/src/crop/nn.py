"""Small numpy MLP stack: ReLU networks, reverse-mode gradients, Adam.

A network may hold several independent members evaluated in one batched
matmul (weights shaped ``(members, fan_in, fan_out)``); ensembles use this so
that seven models train at the cost of one larger matmul.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_units: int = 200
    n_layers: int = 4  # hidden layers; 0 gives a single linear map
    activation: str = "relu"
    members: int = 1

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_units, self.members) < 1:
            raise ValueError("dimensions must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.activation != "relu":
            raise ValueError("only rectified-linear activations are supported")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_units] * self.n_layers + [self.output_dim]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, (fi, fo) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            out.append((f"w{i}", (self.members, fi, fo)))
            out.append((f"b{i}", (self.members, 1, fo)))
        return out

    @property
    def size(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


class ParameterVector:
    """Flat parameter array with per-layer (weight, bias) views into it."""

    def __init__(self, spec: MlpSpec, data: np.ndarray | None = None, dtype=None):
        self.spec = spec
        if data is None:
            self.data = np.zeros(spec.size, dtype=dtype or np.float64)
        else:
            self.data = np.ascontiguousarray(data, dtype=dtype or np.asarray(data).dtype)
        if self.data.shape != (spec.size,):
            raise ValueError(f"expected {spec.size} parameters, got {self.data.shape}")
        self.layers = _views(spec, self.data)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.spec, self.data.copy())

    def __len__(self) -> int:
        return self.data.size


def _views(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    views, off = [], 0
    for _, shape in spec.layout():
        n = math.prod(shape)
        views.append(flat[off:off + n].reshape(shape))
        off += n
    return list(zip(views[0::2], views[1::2]))


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype=np.float64) -> ParameterVector:
    """Uniform fan-in scaled weights, zero biases.

    The first layer has unit gain, later layers sqrt(2) to offset the ReLU.
    """
    p = ParameterVector(spec, dtype=dtype)
    for i, (w, _) in enumerate(p.layers):
        fan_in = w.shape[1]
        gain = 1.0 if i == 0 or i == len(p.layers) - 1 else math.sqrt(2.0)
        bound = gain * math.sqrt(3.0 / fan_in)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return p


@dataclass
class ForwardCache:
    inputs: list  # input to each linear layer
    pre: list  # pre-activation of each hidden layer
    squeeze: bool  # the caller passed a 2-D batch to a single-member network
    shared: bool = False  # the caller passed a 2-D batch shared by all members


def _as_member_batch(spec: MlpSpec, x: np.ndarray, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=dtype)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input width {x.shape[-1]} != {spec.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    if x.ndim == 2:
        return x[None], spec.members == 1
    if x.ndim == 3 and x.shape[0] in (1, spec.members):
        return x, False
    raise ValueError(f"input must be (batch, dim) or (members, batch, dim), got {x.shape}")


def forward(spec: MlpSpec, params: ParameterVector, x) -> tuple[np.ndarray, ForwardCache]:
    """ReLU hidden layers, linear output.

    A 2-D input is shared by every member; the output is 2-D only for a
    single-member network.
    """
    shared = np.ndim(x) == 2
    h, squeeze = _as_member_batch(spec, x, params.data.dtype)
    inputs, pre = [], []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return (h[0] if squeeze else h), ForwardCache(inputs, pre, squeeze, shared)


def backward(spec: MlpSpec, params: ParameterVector, cache: ForwardCache, dout,
             input_grad: bool = False):
    """Gradient of a scalar loss w.r.t. the flat parameters given dLoss/dOutput.

    Returns a flat array; with ``input_grad`` also dLoss/dInput shaped like the
    forward input.
    """
    g = np.asarray(dout, dtype=params.data.dtype)
    if cache.squeeze:
        g = g[None]
    if len(cache.inputs) != len(params.layers) or g.shape[-1] != spec.output_dim:
        raise ValueError("cache does not match this network")
    grad = ParameterVector(spec, dtype=params.data.dtype)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        gw, gb = grad.layers[i]
        x_in = cache.inputs[i]
        gw[...] = np.swapaxes(x_in, -1, -2) @ g
        gb[...] = g.sum(axis=-2, keepdims=True)
        if i > 0 or input_grad:
            g = g @ np.swapaxes(w, -1, -2)
        if i > 0:
            g = g * (cache.pre[i - 1] > 0)
    if not input_grad:
        return grad.data
    if cache.inputs[0].shape[0] != g.shape[0]:
        g = g.sum(axis=0, keepdims=True)
    return grad.data, (g[0] if cache.shared else g)


# --- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 1e-3, dtype=np.float64, **kw) -> "AdamState":
        return cls(np.zeros(n, dtype), np.zeros(n, dtype), learning_rate, **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam, applied in place to ``params`` (also returned)."""
    grads = np.asarray(grads, dtype=params.dtype)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient; Adam step rejected")
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    params -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# --- Gaussian head -----------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def clamp_log_std(raw, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX):
    """Smooth clamp of raw log-std outputs into [lo, hi]; returns value and derivative."""
    u = hi - _softplus(hi - raw)
    du = _sigmoid(hi - raw)
    out = lo + _softplus(u - lo)
    d = du * _sigmoid(u - lo)
    # the two softplus shoulders overshoot the bounds by about exp(lo - hi)
    inside = (out >= lo) & (out <= hi)
    return np.clip(out, lo, hi), np.where(inside, d, 0.0)


@dataclass
class GaussianHead:
    """Splits a 2d-wide network output into a mean and a clamped log-std."""

    mean: np.ndarray
    log_std: np.ndarray
    dlog_std_draw: np.ndarray = field(repr=False)

    @classmethod
    def from_output(cls, out: np.ndarray) -> "GaussianHead":
        d = out.shape[-1] // 2
        ls, dls = clamp_log_std(out[..., d:])
        return cls(out[..., :d], ls, dls)

    def output_grad(self, dmean, dlog_std) -> np.ndarray:
        return np.concatenate([dmean, dlog_std * self.dlog_std_draw], axis=-1)


def gaussian_nll(mean, log_std, target):
    """Diagonal-Gaussian negative log density, summed over dims, averaged over the batch.

    Returns (loss, dloss/dmean, dloss/dlog_std).
    """
    mean, log_std, target = (np.asarray(v, dtype=np.float64) for v in (mean, log_std, target))
    if mean.shape != target.shape or log_std.shape != mean.shape:
        raise ValueError("mean, log_std and target shapes differ")
    n = math.prod(mean.shape[:-1]) if mean.ndim > 1 else 1
    inv_var = np.exp(-2.0 * log_std)
    diff = mean - target
    per = 0.5 * diff * diff * inv_var + log_std + HALF_LOG_2PI
    loss = float(per.sum() / n)
    dmean = diff * inv_var / n
    dlog_std = (1.0 - diff * diff * inv_var) / n
    return loss, dmean, dlog_std


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"CRPNN001"


def save_params(path, params: ParameterVector, extra: dict | None = None) -> None:
    """Header (magic, length, JSON spec) followed by little-endian float64 data."""
    spec = params.spec
    header = json.dumps({
        "spec": {k: getattr(spec, k) for k in ("input_dim", "output_dim", "hidden_units", "n_layers",
                                               "activation", "members")},
        "layout": [[name, list(shape)] for name, shape in spec.layout()],
        "dtype": params.data.dtype.name,
        "extra": extra or {},
    }).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(params.data.astype("<f8").tobytes())


def load_params(path) -> tuple[ParameterVector, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a parameter checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    spec = MlpSpec(**header["spec"])
    data = np.frombuffer(raw[16 + n:], dtype="<f8").astype(header.get("dtype", "float64"))
    return ParameterVector(spec, data), header["extra"]
