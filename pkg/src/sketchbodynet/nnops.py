"""Layers, parameter storage, initialization and the Adam/SGD updates."""

import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ShapeError, Tensor


class MissingGradError(RuntimeError):
    """An unlocked parameter has no gradient at update time."""


class ParamStore:
    """Ordered name -> Tensor map plus per-parameter optimizer state."""

    def __init__(self, params=None):
        self.params = OrderedDict()
        self.state = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self.params[name] = t
        self.state[name] = {"m": np.zeros(t.shape), "v": np.zeros(t.shape), "t": 0}
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix=None):
        return [n for n in self.params if prefix is None or n.startswith(prefix)]

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def reset_state(self):
        """Forget optimizer moments and step counts; parameter values are kept."""
        for name, t in self.params.items():
            self.state[name] = {"m": np.zeros(t.shape), "v": np.zeros(t.shape), "t": 0}

    def copy(self):
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, t.data.copy())
            st = self.state[name]
            out.state[name] = {"m": st["m"].copy(), "v": st["v"].copy(), "t": st["t"]}
        return out

    def num_values(self):
        return sum(t.size for t in self.params.values())


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    kind: str  # "weight" or "bias"

    @property
    def fan_in(self):
        if len(self.shape) == 4:  # conv kernels (Co, Ci, k, k)
            return self.shape[1] * self.shape[2] * self.shape[3]
        return self.shape[0]  # linear weights (d_in, d_out)


def linear_spec(name, d_in, d_out):
    return [ParamSpec(f"{name}.w", (d_in, d_out), "weight"), ParamSpec(f"{name}.b", (d_out,), "bias")]


def conv_spec(name, c_in, c_out, k):
    return [ParamSpec(f"{name}.w", (c_out, c_in, k, k), "weight"), ParamSpec(f"{name}.b", (c_out,), "bias")]


def init_params(specs, seed):
    """He-uniform fan-in weights and zero biases.

    Each parameter draws from its own stream keyed by (seed, name), so adding
    or reordering parameters never changes the others.
    """
    store = ParamStore()
    for spec in specs:
        if spec.kind == "bias":
            store.add(spec.name, np.zeros(spec.shape))
            continue
        bound = math.sqrt(6.0 / spec.fan_in)
        rng = np.random.default_rng([seed, zlib.crc32(spec.name.encode())])
        store.add(spec.name, rng.uniform(-bound, bound, size=spec.shape))
    return store


def linear(x, W, b):
    x = gc.as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    if x.ndim == 1:
        return gc.reshape(gc.matmul(gc.reshape(x, (1, -1)), W), (-1,)) + b
    return gc.matmul(x, W) + b


def residual_block(x, params, prefix, stride=1):
    """conv-relu-conv plus shortcut, then relu.

    A 1x1 projection shortcut (``{prefix}.proj``) is used when present; it is
    required whenever the channel count or spatial size changes.
    """
    w1 = params[f"{prefix}.conv1.w"]
    out = gc.relu(gc.conv2d(x, w1, stride=stride, pad=1, bias=params[f"{prefix}.conv1.b"]))
    out = gc.conv2d(out, params[f"{prefix}.conv2.w"], stride=1, pad=1, bias=params[f"{prefix}.conv2.b"])
    if f"{prefix}.proj.w" in params:
        shortcut = gc.conv2d(x, params[f"{prefix}.proj.w"], stride=stride, pad=0, bias=params[f"{prefix}.proj.b"])
    else:
        shortcut = gc.as_tensor(x)
    if shortcut.shape != out.shape:
        raise ShapeError(f"residual paths disagree: {out.shape} vs shortcut {shortcut.shape}")
    return gc.relu(out + shortcut)


def residual_block_spec(prefix, c_in, c_out, stride=1):
    specs = conv_spec(f"{prefix}.conv1", c_in, c_out, 3) + conv_spec(f"{prefix}.conv2", c_out, c_out, 3)
    if c_in != c_out or stride != 1:
        specs += conv_spec(f"{prefix}.proj", c_in, c_out, 1)
    return specs


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    head_dim: int = 64
    model_dim: int = 2048

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1 or self.model_dim < 1:
            raise ValueError("attention sizes must be positive")

    @property
    def inner_dim(self):
        return self.heads * self.head_dim


def mhsa_spec(prefix, cfg):
    d, inner = cfg.model_dim, cfg.inner_dim
    return (
        linear_spec(f"{prefix}.q", d, inner)
        + linear_spec(f"{prefix}.k", d, inner)
        + linear_spec(f"{prefix}.v", d, inner)
        + linear_spec(f"{prefix}.out", inner, d)
    )


def mhsa_sequence(x, cfg, params, prefix):
    """Multi-head self-attention over tokens: (T, d) or (N, T, d) -> same shape."""
    x = gc.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = gc.reshape(x, (1,) + x.shape)
    n, t, d = x.shape
    if d != cfg.model_dim:
        raise ShapeError(f"mhsa: input width {d} != model_dim {cfg.model_dim}")
    h, hd = cfg.heads, cfg.head_dim

    def heads(name):
        proj = linear(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])
        return gc.transpose(gc.reshape(proj, (n, t, h, hd)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = gc.scale(gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    attended = gc.matmul(gc.softmax(scores, axis=-1), v)
    merged = gc.reshape(gc.transpose(attended, (0, 2, 1, 3)), (n, t, h * hd))
    out = linear(merged, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
    return gc.reshape(out, (t, d)) if squeeze else out


def mhsa(f_in, cfg, params, prefix):
    """Attention feature f^a for a single-token input, (d,) or (N, d).

    The residual sum with ``f_in`` is left to the caller.
    """
    f_in = gc.as_tensor(f_in)
    if f_in.ndim == 1:
        return gc.reshape(mhsa_sequence(gc.reshape(f_in, (1, -1)), cfg, params, prefix), (-1,))
    n = f_in.shape[0]
    out = mhsa_sequence(gc.reshape(f_in, (n, 1, f_in.shape[1])), cfg, params, prefix)
    return gc.reshape(out, (n, cfg.model_dim))


def mlp_spec(prefix, widths):
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"bad MLP widths {widths}")
    specs = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        specs += linear_spec(f"{prefix}.fc{i}", a, b)
    return specs


def mlp(x, layer_widths, params, prefix):
    """Linear+relu stack with a bare final linear layer."""
    n_layers = len(layer_widths) - 1
    for i in range(n_layers):
        W = params[f"{prefix}.fc{i}.w"]
        if W.shape != (layer_widths[i], layer_widths[i + 1]):
            raise ShapeError(f"{prefix}.fc{i}: weight {W.shape} does not match widths {layer_widths}")
        x = linear(x, W, params[f"{prefix}.fc{i}.b"])
        if i < n_layers - 1:
            x = gc.relu(x)
    return x


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _trainable(store, locked):
    if locked is None:
        return list(store.params)
    if callable(locked):
        return [n for n in store.params if not locked(n)]
    locked = set(locked)
    return [n for n in store.params if n not in locked]


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8, locked=None):
    """Bias-corrected Adam update, in place.

    ``locked`` (names or a predicate) selects parameters that are skipped
    entirely: value, moments and step counter stay as they are. A parameter
    whose gradient is identically zero keeps its value; its moments still decay.
    """
    names = _trainable(store, locked)
    missing = [n for n in names if store[n].grad is None]
    if missing:
        raise MissingGradError(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name in names:
        p, st = store[name], store.state[name]
        g = p.grad
        st["t"] += 1
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * (g * g)
        if not g.any():
            continue
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def sgd_step(store, lr, locked=None):
    names = _trainable(store, locked)
    missing = [n for n in names if store[n].grad is None]
    if missing:
        raise MissingGradError(f"no gradient for {missing[:5]}")
    for name in names:
        p = store[name]
        store.state[name]["t"] += 1
        p.data = p.data - lr * p.grad
    return store


def optimizer_step(store, cfg, locked=None):
    if cfg.kind == "adam":
        return adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, locked=locked)
    if cfg.kind == "sgd":
        return sgd_step(store, cfg.lr, locked=locked)
    raise ValueError(f"unknown optimizer {cfg.kind!r}")
