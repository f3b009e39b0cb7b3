"""Convolutional pseudo-inverse mapping (y, r_inv) observation maps to X0.

Five 3x3 conv layers over the (time, space) plane with circular padding in
space (the domain is periodic) and zero padding in time, ReLU on layers 1-4,
a linear fifth layer, then flatten + dense down to the state dimension.
Forward/backward are hand-written in float64 so gradients can be checked
against finite differences to tight tolerances.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class ConvNetArch:
    n_space: int
    n_time: int  # T+1 rows of the observation maps
    hidden_channels: tuple = (32, 32, 32, 32)
    out_channels: int = 4
    y_scale: float = 10.0  # ~ state dynamic range
    rinv_scale: float = 16.0  # precision cap at sigma=0.25

    @property
    def channel_widths(self):
        return (2, *self.hidden_channels, self.out_channels)

    @property
    def n_features(self):
        return self.n_time * self.n_space * self.out_channels


@dataclass
class ConvNetParams:
    arch: ConvNetArch
    conv_weights: list  # per layer: (out_ch, in_ch, 3, 3)
    conv_biases: list  # per layer: (out_ch,)
    dense_weight: np.ndarray  # (n_space, n_features)
    dense_bias: np.ndarray  # (n_space,)

    def arrays(self):
        """Parameter arrays in the canonical (checkpoint) order."""
        out = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            out.extend((w, b))
        out.extend((self.dense_weight, self.dense_bias))
        return out

    def with_arrays(self, arrays):
        """Rebuild params from arrays in canonical order (shapes must match)."""
        n_conv = len(self.conv_weights)
        return ConvNetParams(
            arch=self.arch,
            conv_weights=[arrays[2 * l] for l in range(n_conv)],
            conv_biases=[arrays[2 * l + 1] for l in range(n_conv)],
            dense_weight=arrays[2 * n_conv],
            dense_bias=arrays[2 * n_conv + 1],
        )


@dataclass
class AdamState:
    m: list
    v: list
    k: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, arrays, lr=1e-3):
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            lr=lr,
        )


def net_init(arch: ConvNetArch, seed=0) -> ConvNetParams:
    """He-uniform fan-in initialization for all weights, zero biases."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    widths = arch.channel_widths
    conv_w, conv_b = [], []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (c_in * 9))
        conv_w.append(rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)))
        conv_b.append(np.zeros(c_out))
    limit = np.sqrt(6.0 / arch.n_features)
    dense_w = rng.uniform(-limit, limit, size=(arch.n_space, arch.n_features))
    return ConvNetParams(
        arch=arch,
        conv_weights=conv_w,
        conv_biases=conv_b,
        dense_weight=dense_w,
        dense_bias=np.zeros(arch.n_space),
    )


def make_net_input(y, r_inv, arch: ConvNetArch):
    """Stack the two observation maps into the normalized network input."""
    return np.stack([y / arch.y_scale, r_inv / arch.rinv_scale])


def _pad(x):
    # zero pad the time axis, wrap the (periodic) space axis
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    return np.concatenate([xp[:, :, -1:], xp, xp[:, :, :1]], axis=2)


def _conv_forward(x, w, b):
    """3x3 same-size convolution of x (C,H,W); returns (out, patch matrix)."""
    c, h, wd = x.shape
    win = sliding_window_view(_pad(x), (3, 3), axis=(1, 2))  # (C,H,W,3,3)
    col = win.transpose(1, 2, 0, 3, 4).reshape(h * wd, c * 9)
    out = col @ w.reshape(w.shape[0], c * 9).T + b
    return out.T.reshape(w.shape[0], h, wd), col


def _conv_backward(d_out, col, x_shape, w):
    """Gradients of a conv layer given d(pre-activation)."""
    c, h, wd = x_shape
    o = w.shape[0]
    d_mat = d_out.reshape(o, h * wd)
    dw = (d_mat @ col).reshape(w.shape)
    db = d_out.sum(axis=(1, 2))
    dcol = (d_mat.T @ w.reshape(o, c * 9)).reshape(h, wd, c, 3, 3)
    dxp = np.zeros((c, h + 2, wd + 2))
    for a in range(3):
        for bb in range(3):
            dxp[:, a : a + h, bb : bb + wd] += dcol[:, :, :, a, bb].transpose(2, 0, 1)
    # fold wrapped space columns back, drop zero-padded time rows
    dx = dxp[:, 1 : h + 1, 1 : wd + 1].copy()
    dx[:, :, -1] += dxp[:, 1 : h + 1, 0]
    dx[:, :, 0] += dxp[:, 1 : h + 1, wd + 1]
    return dw, db, dx


def net_forward(params: ConvNetParams, inp):
    """Run the network on one normalized input of shape (2, T+1, n_space).

    Returns (x0 estimate of shape (n_space,), cache for net_backward).
    """
    arch = params.arch
    if inp.shape != (2, arch.n_time, arch.n_space):
        raise ValueError(f"input shape {inp.shape} != (2, {arch.n_time}, {arch.n_space})")
    n_conv = len(params.conv_weights)
    h = np.asarray(inp, dtype=np.float64)
    layers = []
    for l, (w, b) in enumerate(zip(params.conv_weights, params.conv_biases)):
        z, col = _conv_forward(h, w, b)
        layers.append((h.shape, col, z))
        h = np.maximum(z, 0.0) if l < n_conv - 1 else z
    feat = h.reshape(-1)
    x0 = params.dense_weight @ feat + params.dense_bias
    return x0, {"layers": layers, "feat": feat}


def net_backward(params: ConvNetParams, cache, grad_x0):
    """Exact parameter gradients given d(objective)/d(x0); canonical order."""
    n_conv = len(params.conv_weights)
    d_dense_w = np.outer(grad_x0, cache["feat"])
    d_dense_b = np.asarray(grad_x0, dtype=np.float64).copy()
    dh = (params.dense_weight.T @ grad_x0).reshape(
        params.arch.out_channels, params.arch.n_time, params.arch.n_space
    )
    conv_grads = [None] * n_conv
    for l in range(n_conv - 1, -1, -1):
        x_shape, col, z = cache["layers"][l]
        dz = dh if l == n_conv - 1 else dh * (z > 0)
        dw, db, dh = _conv_backward(dz, col, x_shape, params.conv_weights[l])
        conv_grads[l] = (dw, db)
    grads = []
    for dw, db in conv_grads:
        grads.extend((dw, db))
    grads.extend((d_dense_w, d_dense_b))
    return grads


def adam_step(arrays, grads, state: AdamState):
    """Bias-corrected Adam update on a list of parameter arrays."""
    k = state.k + 1
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * np.square(g)
        m_hat = m / (1 - state.beta1**k)
        v_hat = v / (1 - state.beta2**k)
        new_arrays.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_arrays, replace(state, m=new_m, v=new_v, k=k)


def save_checkpoint(params: ConvNetParams, path, extra=None):
    """JSON header line + little-endian float64 blob in canonical array order."""
    arch = params.arch
    header = {
        "arch": {
            "n_space": arch.n_space,
            "n_time": arch.n_time,
            "hidden_channels": list(arch.hidden_channels),
            "out_channels": arch.out_channels,
            "y_scale": arch.y_scale,
            "rinv_scale": arch.rinv_scale,
        },
        "array_shapes": [list(a.shape) for a in params.arrays()],
        "dtype": "f64le",
    }
    if extra:
        header["provenance"] = extra
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    a = header["arch"]
    arch = ConvNetArch(
        n_space=a["n_space"],
        n_time=a["n_time"],
        hidden_channels=tuple(a["hidden_channels"]),
        out_channels=a["out_channels"],
        y_scale=a["y_scale"],
        rinv_scale=a["rinv_scale"],
    )
    arrays = []
    offset = 0
    for shape in header["array_shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset * 8)
        arrays.append(arr.reshape(shape).astype(np.float64))
        offset += size
    template = net_init(arch, seed=0)
    return template.with_arrays(arrays), header


def checkpoint_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
