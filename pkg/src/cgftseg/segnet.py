"""Miniature U-Net in NumPy with hand-written backward pass and Adam.

Layout is (channels, height, width) for a single image; batch size is always 1
at the network level and the trainer accumulates over larger batches.

Parameters are stored as float32 (the checkpoint dtype) while every forward and
backward pass runs in float64. Passing ``dtype=np.float64`` to
:func:`init_params` keeps full precision, which the gradient checks rely on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import InvalidConfig, InvalidInput, InvalidState
from .slices import as_pixels


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    input_size: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.depth < 2:
            raise InvalidConfig(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise InvalidConfig(f"base_channels must be >= 4, got {self.base_channels}")
        h, w = self.input_size
        step = 2**self.depth
        if h % step or w % step:
            raise InvalidConfig(f"input size {h}x{w} not divisible by 2^depth = {step}")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def feature_dim(self) -> int:
        return self.width(self.depth - 1)


def architecture(config: NetConfig):
    """Ordered layer table: (name, in_channels, out_channels, kernel)."""
    layers = []
    cin = 1
    for k in range(config.depth):
        c = config.width(k)
        layers.append((f"enc{k}_conv1", cin, c, 3))
        layers.append((f"enc{k}_conv2", c, c, 3))
        cin = c
    for k in reversed(range(config.depth - 1)):
        c = config.width(k)
        layers.append((f"dec{k}_up", config.width(k + 1), c, 3))
        layers.append((f"dec{k}_conv1", 2 * c, c, 3))
        layers.append((f"dec{k}_conv2", c, c, 3))
    layers.append(("head", config.base_channels, 1, 1))
    return layers


@dataclass
class NetParams:
    config: NetConfig
    tensors: dict = field(default_factory=dict)

    def names(self):
        return list(self.tensors)

    def metadata(self):
        return (self.config, tuple((k, v.shape, v.dtype.str) for k, v in self.tensors.items()))

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equal(self, other: "NetParams") -> bool:
        """Bitwise equality of all tensors and metadata."""
        if self.metadata() != other.metadata():
            return False
        return all(
            self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors
        )

    def __getitem__(self, name):
        return self.tensors[name]


HEAD_PRIOR = 0.1


def init_params(config: NetConfig, seed: int, dtype=np.float32, prior=HEAD_PRIOR) -> NetParams:
    """He (fan-in) normal weights and zero biases.

    The output bias starts at logit(prior) so that the untrained network leans
    towards background, the majority class; ``prior=0.5`` gives a zero bias.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, cin, cout, k in architecture(config):
        std = np.sqrt(2.0 / (cin * k * k))
        tensors[f"{name}.weight"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        tensors[f"{name}.bias"] = np.zeros(cout, dtype=dtype)
    tensors["head.bias"][:] = np.log(prior / (1 - prior))
    return NetParams(config, tensors)


def zeros_like(params: NetParams) -> NetParams:
    return NetParams(params.config, {k: np.zeros_like(v) for k, v in params.tensors.items()})


# --- layer primitives -------------------------------------------------------


def _im2col(x, k):
    c, h, w = x.shape
    p = k // 2
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _col2im(dcols, shape, k):
    c, h, w = shape
    p = k // 2
    d = dcols.reshape(c, k, k, h, w)
    if not p:
        return d[:, 0, 0].copy()
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, i : i + h, j : j + w] += d[:, i, j]
    return out[:, p:-p, p:-p]


def _conv(x, wt, b):
    cols = _im2col(x, wt.shape[-1])
    out = wt.reshape(wt.shape[0], -1).astype(np.float64) @ cols
    out += b.astype(np.float64)[:, None]
    return out.reshape(wt.shape[0], *x.shape[1:]), cols


def _conv_back(dout, cols, wt, x_shape):
    o = wt.shape[0]
    d = dout.reshape(o, -1)
    dw = (d @ cols.T).reshape(wt.shape)
    db = d.sum(axis=1)
    dcols = wt.reshape(o, -1).astype(np.float64).T @ d
    return _col2im(dcols, x_shape, wt.shape[-1]), dw, db


def _pool(x):
    c, h, w = x.shape
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], -1)[..., 0], idx


def _pool_back(dout, idx, x_shape):
    c, h, w = x_shape
    blocks = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], -1)
    return blocks.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def _up(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_back(dout):
    c, h, w = dout.shape
    return dout.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


# --- network ----------------------------------------------------------------


class ActivationCache:
    """Intermediates recorded by :func:`forward`; bound to one parameter object."""

    def __init__(self, params):
        self.params = params
        self.records = {}
        self.prob = None

    def conv_relu(self, params, name, x):
        wt, b = params[f"{name}.weight"], params[f"{name}.bias"]
        z, cols = _conv(x, wt, b)
        self.records[name] = (cols, x.shape, z > 0)
        return np.maximum(z, 0.0)


def _check_input(params, image):
    x = as_pixels(image)
    if x.shape != params.config.input_size:
        raise InvalidInput(f"image {x.shape} does not match network input {params.config.input_size}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("image contains non-finite pixels")
    return x


def _encode(params, x, cache):
    cfg = params.config
    h = x[None]
    skips = []
    for k in range(cfg.depth):
        if k:
            h, idx = _pool(h)
            cache.records[f"pool{k}"] = (idx, skips[-1].shape)
        h = cache.conv_relu(params, f"enc{k}_conv1", h)
        h = cache.conv_relu(params, f"enc{k}_conv2", h)
        skips.append(h)
    return h, skips


def forward(params: NetParams, image):
    """Return ``(prob_map, cache)``; prob_map is H x W in [0, 1]."""
    x = _check_input(params, image)
    cfg = params.config
    cache = ActivationCache(params)
    h, skips = _encode(params, x, cache)
    for k in reversed(range(cfg.depth - 1)):
        h = cache.conv_relu(params, f"dec{k}_up", _up(h))
        h = np.concatenate([h, skips[k]], axis=0)
        h = cache.conv_relu(params, f"dec{k}_conv1", h)
        h = cache.conv_relu(params, f"dec{k}_conv2", h)
    z, cols = _conv(h, params["head.weight"], params["head.bias"])
    cache.records["head"] = (cols, h.shape, None)
    prob = expit(z[0])
    cache.prob = prob
    return prob, cache


def activation_pattern(cache: ActivationCache) -> bytes:
    """Fingerprint of every ReLU gate and pooling choice taken in a forward pass.

    Two parameter points with equal patterns lie in the same piecewise-smooth
    region of the network, which is where finite differences are meaningful.
    """
    parts = []
    for name in sorted(cache.records):
        rec = cache.records[name]
        if name.startswith("pool"):
            parts.append(rec[0].astype(np.uint8).tobytes())
        elif rec[2] is not None:
            parts.append(np.packbits(rec[2]).tobytes())
    return b"".join(parts)


def predict(params: NetParams, image) -> np.ndarray:
    return forward(params, image)[0]


def backward(params: NetParams, cache: ActivationCache, upstream_grad) -> NetParams:
    """Gradients of sum(upstream_grad * prob) w.r.t. every parameter (float64)."""
    if cache.params is not params or cache.prob is None:
        raise InvalidState("activation cache does not belong to these parameters")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.prob.shape:
        raise InvalidInput(f"upstream gradient {g.shape} != prob map {cache.prob.shape}")
    cfg = params.config
    grads = {}

    def conv_back(name, dout, relu=True):
        cols, x_shape, active = cache.records[name]
        if relu:
            dout = dout * active
        dx, dw, db = _conv_back(dout, cols, params[f"{name}.weight"], x_shape)
        grads[f"{name}.weight"] = dw
        grads[f"{name}.bias"] = db
        return dx

    p = cache.prob
    dh = conv_back("head", (g * p * (1 - p))[None], relu=False)
    dskips = [None] * cfg.depth
    for k in range(cfg.depth - 1):
        c = cfg.width(k)
        dh = conv_back(f"dec{k}_conv2", dh)
        dh = conv_back(f"dec{k}_conv1", dh)
        dskips[k] = dh[c:]
        dh = _up_back(conv_back(f"dec{k}_up", dh[:c]))
    for k in reversed(range(cfg.depth)):
        if dskips[k] is not None:
            dh = dh + dskips[k]
        dh = conv_back(f"enc{k}_conv2", dh)
        dh = conv_back(f"enc{k}_conv1", dh)
        if k:
            idx, shape = cache.records[f"pool{k}"]
            dh = _pool_back(dh, idx, shape)
    return NetParams(cfg, {name: grads[name] for name in params.tensors})


def extract_features(params: NetParams, image) -> np.ndarray:
    """Spatially average-pooled bottleneck activations."""
    x = _check_input(params, image)
    h, _ = _encode(params, x, ActivationCache(params))
    return h.mean(axis=(1, 2))


# --- optimisation -----------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 6e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetParams, grads: NetParams, state: AdamState):
    """One Adam update with L2 weight decay folded into the gradient."""
    if set(grads.tensors) != set(params.tensors):
        raise InvalidInput("gradient names do not match parameters")
    t = state.step + 1
    m_new, v_new, out = {}, {}, {}
    for name, theta in params.tensors.items():
        th = theta.astype(np.float64)
        g = grads.tensors[name].astype(np.float64) + state.weight_decay * th
        m = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        out[name] = (th - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)
        m_new[name], v_new[name] = m, v
    new_state = AdamState(
        state.lr, state.weight_decay, state.beta1, state.beta2, state.eps, t, m_new, v_new
    )
    return NetParams(params.config, out), new_state


def ema_update(teacher: NetParams, student: NetParams, beta: float) -> NetParams:
    """theta_t <- beta * theta_t + (1 - beta) * theta_s, evaluated in float64."""
    if teacher.metadata() != student.metadata():
        raise InvalidInput("teacher and student parameter layouts differ")
    if not 0.0 <= beta <= 1.0:
        raise InvalidConfig(f"beta must be in [0, 1], got {beta}")
    out = {}
    for name, t in teacher.tensors.items():
        s = student.tensors[name]
        if beta == 0.0:
            out[name] = s.copy()
            continue
        t64 = t.astype(np.float64)
        # incremental form keeps teacher == student a fixed point bit-for-bit
        out[name] = (t64 + (1.0 - beta) * (s.astype(np.float64) - t64)).astype(t.dtype)
    return NetParams(teacher.config, out)


# --- checkpoint container ---------------------------------------------------

_MAGIC = b"CGFTCKPT"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(path, params: NetParams, step: int = 0, extra=None):
    """Write ``MAGIC | u32 header_len | JSON header | raw little-endian tensors``."""
    entries, payload, offset = [], [], 0
    for name, arr in params.tensors.items():
        code = "f64" if arr.dtype == np.float64 else "f32"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    cfg = asdict(params.config)
    cfg["input_size"] = list(cfg["input_size"])
    header = {"format": 1, "config": cfg, "step": int(step), "tensors": entries}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(payload))


def load_checkpoint(path):
    """Return ``(params, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise InvalidInput(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        tensors[e["name"]] = arr
    return NetParams(NetConfig(**header["config"]), tensors), header
