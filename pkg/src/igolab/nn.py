"""Dense layers with tape-based reverse mode, Adam, time embedding, checkpoints.

Tensors are float64 numpy arrays. A forward pass returns the output and a
``Tape``; ``backward(tape, g)`` accumulates ``d(out . g)/d(param)`` into every
``Param.grad`` the pass touched and returns the gradient with respect to the
network input.
"""
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import NonFiniteTensor, OddDim, ShapeMismatch, StaleTape

ACTIVATIONS = ("tanh", "relu", "silu")


class Param:
    """A named trainable array with a same-shaped gradient buffer."""

    def __init__(self, name, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.version = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeMismatch(self.value.shape, value.shape, f"param {self.name}")
        self.value[...] = value
        self.version += 1

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def zero_grads(params):
    for p in params:
        p.zero_grad()


def _act(name, z):
    if name is None:
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "silu":
        return z / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z):
    if name is None:
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    raise ValueError(f"unknown activation {name!r}")


def sinusoidal_embed(t, dim):
    """Interleaved ``[sin(1000 t w_k), cos(1000 t w_k)]`` with ``w_k = 10000^(-2(k-1)/dim)``.

    Scalar ``t`` gives shape ``(dim,)``; an array of times gives ``(len(t), dim)``.
    """
    if dim < 2 or dim % 2:
        raise OddDim(f"embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    arg = 1000.0 * t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


class Dense:
    """Affine map on ``[x, embed(t)]`` followed by an optional activation."""

    def __init__(self, weight, bias, activation=None, embed_dim=0):
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self.embed_dim = embed_dim

    @property
    def n_in(self):
        return self.weight.shape[0] - self.embed_dim

    @property
    def n_out(self):
        return self.weight.shape[1]

    @property
    def params(self):
        return [self.weight, self.bias]

    @classmethod
    def create(cls, name, n_in, n_out, rng, activation=None, embed_dim=0, gain=1.0):
        w = rng.standard_normal((n_in + embed_dim, n_out)) * gain / np.sqrt(n_in + embed_dim)
        return cls(Param(f"{name}.weight", w), Param(f"{name}.bias", np.zeros(n_out)),
                   activation, embed_dim)


@dataclass
class Tape:
    entries: list
    versions: list
    out_shape: tuple
    in_shape: tuple

    @property
    def params(self):
        return [p for layer, *_ in self.entries for p in layer.params]


def run_layers(layers, x, t=None):
    """Forward ``x`` (shape ``(..., n_in)``) through ``layers`` at time(s) ``t``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layers[0].n_in:
        raise ShapeMismatch((..., layers[0].n_in), x.shape)
    batch_shape = x.shape[:-1]
    embeds = {}
    entries = []
    h = x
    for layer in layers:
        if layer.embed_dim:
            if layer.embed_dim not in embeds:
                tt = np.broadcast_to(np.asarray(0.0 if t is None else t, dtype=np.float64), batch_shape)
                embeds[layer.embed_dim] = sinusoidal_embed(tt, layer.embed_dim)
            inp = np.concatenate([h, embeds[layer.embed_dim]], axis=-1)
        else:
            inp = h
        if inp.shape[-1] != layer.weight.shape[0]:
            raise ShapeMismatch((..., layer.weight.shape[0]), inp.shape, "layer input")
        z = inp @ layer.weight.value + layer.bias.value
        h = _act(layer.activation, z)
        entries.append((layer, inp, z))
    if not np.isfinite(h).all():
        raise NonFiniteTensor("forward pass produced a non-finite value")
    versions = [p.version for layer, *_ in entries for p in layer.params]
    return h, Tape(entries, versions, h.shape, x.shape)


def backward(tape, output_grad, accumulate=True):
    """Accumulate parameter gradients; return the gradient w.r.t. the input.

    With ``accumulate=False`` only the input gradient is computed, leaving
    every ``Param.grad`` untouched.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.out_shape:
        raise ShapeMismatch(tape.out_shape, g.shape, "output_grad")
    if [p.version for p in tape.params] != tape.versions:
        raise StaleTape("parameters were modified after the forward pass")
    for layer, inp, z in reversed(tape.entries):
        gz = g * _act_grad(layer.activation, z)
        if accumulate:
            flat_in = inp.reshape(-1, inp.shape[-1])
            flat_gz = gz.reshape(-1, gz.shape[-1])
            layer.weight.grad += flat_in.T @ flat_gz
            layer.bias.grad += flat_gz.sum(axis=0)
        g = (gz @ layer.weight.value.T)[..., :layer.n_in]
    return g


# -- plain MLP -----------------------------------------------------------------

@dataclass
class MlpSpec:
    layer_widths: Sequence[int]
    activation: str = "silu"
    time_embed_dim: int = 16

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(int(w) < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.time_embed_dim and (self.time_embed_dim < 2 or self.time_embed_dim % 2):
            raise OddDim(f"time_embed_dim must be even, got {self.time_embed_dim}")


def init_mlp(spec, rng, prefix="mlp"):
    """Parameters ``[W0, b0, W1, b1, ...]`` for ``spec``; weights scaled by ``1/sqrt(fan_in)``."""
    params = []
    w = list(spec.layer_widths)
    for i, (n_in, n_out) in enumerate(zip(w[:-1], w[1:])):
        layer = Dense.create(f"{prefix}.{i}", n_in, n_out, rng, embed_dim=spec.time_embed_dim)
        params.extend(layer.params)
    return params


def mlp_layers(params, spec):
    w = list(spec.layer_widths)
    n_layers = len(w) - 1
    if len(params) != 2 * n_layers:
        raise ShapeMismatch(2 * n_layers, len(params), "parameter count")
    layers = []
    for i in range(n_layers):
        act = spec.activation if i < n_layers - 1 else None
        W, b = params[2 * i], params[2 * i + 1]
        expected = (w[i] + spec.time_embed_dim, w[i + 1])
        if W.shape != expected:
            raise ShapeMismatch(expected, W.shape, f"weight {W.name}")
        layers.append(Dense(W, b, act, spec.time_embed_dim))
    return layers


def forward(params, spec, x, t=0.0):
    """Evaluate the MLP described by ``spec`` at ``(x, t)``; returns ``(out, tape)``."""
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return run_layers(mlp_layers(params, spec), x, t)


# -- optimizer -----------------------------------------------------------------

class Adam:
    """Adam with bias correction over a fixed list of ``Param``."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.n_steps = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.n_steps += 1
        c1 = 1.0 - self.beta1 ** self.n_steps
        c2 = 1.0 - self.beta2 ** self.n_steps
        for p, m, v in zip(self.params, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.version += 1


def adam_step(optimizer, lr=None, beta1=None, beta2=None, eps=None):
    """Functional wrapper: optionally override hyperparameters, then step."""
    for name, val in (("lr", lr), ("beta1", beta1), ("beta2", beta2), ("eps", eps)):
        if val is not None:
            setattr(optimizer, name, val)
    optimizer.step()


# -- checkpoints ---------------------------------------------------------------

_MAGIC = "IGOLAB-PARAMS 1"


def save_params(path, params, meta=None):
    """Text header (names, shapes) then raw little-endian float64 in order."""
    lines = [_MAGIC]
    if meta is not None:
        lines.append("meta " + json.dumps(meta, sort_keys=True))
    for p in params:
        if any(c.isspace() for c in p.name):
            raise ValueError(f"parameter name {p.name!r} contains whitespace")
        shape = "x".join(str(d) for d in p.shape) or "scalar"
        lines.append(f"param {p.name} {shape}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_params(path):
    """Inverse of ``save_params``: returns ``(params, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0
    meta = None
    specs = []
    first = True
    while True:
        nl = blob.index(b"\n", pos)
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != _MAGIC:
                raise ValueError(f"{path}: not an igolab checkpoint")
            first = False
        elif line.startswith("meta "):
            meta = json.loads(line[5:])
        elif line.startswith("param "):
            _, name, shape = line.split(" ")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            specs.append((name, dims))
        elif line == "end":
            break
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    params = []
    for name, dims in specs:
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        params.append(Param(name, arr.astype(np.float64)))
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return params, meta
