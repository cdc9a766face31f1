"""Fully connected, convolutional and LSTM layers over a selectable product.

Every weight-vector / data-vector contraction goes through
:func:`prgrad.products.batched_product`, so switching ``mode`` swaps the
backward rule without touching the forward value (except for ``R``).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .products import ProductMode, batched_product
from .tensor import Tensor, record

Observer = Callable[[str, np.ndarray, np.ndarray], None]


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------


@dataclass
class LinearSpec:
    weight: Tensor  # out_features x in_features, one weight vector per row
    bias: Optional[Tensor] = None
    mode: ProductMode = ProductMode.P

    def __post_init__(self):
        self.mode = ProductMode.parse(self.mode)
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"linear: bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )


def linear_forward(spec: LinearSpec, X, observe: Observer = None, name="linear") -> Tensor:
    X = T.as_tensor(X)
    if X.ndim != 2 or X.shape[1] != spec.weight.shape[1]:
        raise ValueError(f"linear: input shape {X.shape} does not match weight {spec.weight.shape}")
    if observe is not None:
        observe(name, spec.weight.data, X.data)
    out = batched_product(spec.weight, X, spec.mode)
    if spec.bias is not None:
        out = out + spec.bias
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2col(x, k1, k2, stride=1, padding=0) -> np.ndarray:
    """Sliding windows as rows, each flattened in (channel, row, col) order.

    ``x`` is C x H x W (returns positions x C*k1*k2) or N x C x H x W
    (returns N*positions x C*k1*k2, batch-major).
    """
    x = np.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, c, h, w = x.shape
    oh = conv_output_size(h, k1, stride, padding)
    ow = conv_output_size(w, k2, stride, padding)
    if oh <= 0 or ow <= 0 or k1 < 1 or k2 < 1 or stride < 1:
        raise ValueError(
            f"im2col: kernel {k1}x{k2}, stride {stride}, padding {padding} "
            f"gives non-positive output {oh}x{ow} for input {h}x{w}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k1, k2), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k1 * k2)
    return cols


def col2im(cols, shape, k1, k2, stride=1, padding=0) -> np.ndarray:
    """Adjoint of :func:`im2col` for a 4-D ``shape``: overlapping windows add up."""
    n, c, h, w = shape
    oh = conv_output_size(h, k1, stride, padding)
    ow = conv_output_size(w, k2, stride, padding)
    g = cols.reshape(n, oh, ow, c, k1, k2).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k1):
        for j in range(k2):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def unfold(x: Tensor, k1, k2, stride=1, padding=0) -> Tensor:
    """Tape-recorded :func:`im2col` on a batch N x C x H x W."""
    x = T.as_tensor(x)
    cols = im2col(x.data, k1, k2, stride, padding)
    return record("im2col", (x,), cols,
                  lambda g: (col2im(g, x.shape, k1, k2, stride, padding),))


@dataclass
class Conv2dSpec:
    kernel: Tensor  # C_out x C_in x k1 x k2
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    mode: ProductMode = ProductMode.P

    def __post_init__(self):
        self.mode = ProductMode.parse(self.mode)
        if self.kernel.ndim != 4 or min(self.kernel.shape[2:]) < 1:
            raise ValueError(f"conv2d: kernel must be C_out x C_in x k1 x k2, got {self.kernel.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"conv2d: bad stride {self.stride} / padding {self.padding}")


def conv2d_forward(spec: Conv2dSpec, x, observe: Observer = None, name="conv2d") -> Tensor:
    x = T.as_tensor(x)
    c_out, c_in, k1, k2 = spec.kernel.shape
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ValueError(f"conv2d: input shape {x.shape} does not match kernel {spec.kernel.shape}")
    n, _, h, w = x.shape
    oh = conv_output_size(h, k1, spec.stride, spec.padding)
    ow = conv_output_size(w, k2, spec.stride, spec.padding)
    cols = unfold(x, k1, k2, spec.stride, spec.padding)
    flat = spec.kernel.reshape(c_out, c_in * k1 * k2)
    if observe is not None:
        observe(name, flat.data, cols.data)
    out = batched_product(flat, cols, spec.mode)  # (n*oh*ow) x c_out
    out = out.reshape(n, oh * ow, c_out).transpose(0, 2, 1).reshape(n, c_out, oh, ow)
    if spec.bias is not None:
        out = out + spec.bias.reshape(1, c_out, 1, 1)
    return out


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

GATES = ("i", "f", "g", "o")


@dataclass
class LstmParams:
    """Eight weight matrices ``W_i<gate>`` (H x D), ``W_h<gate>`` (H x H) and four biases."""

    weights: dict  # "W_ii", "W_hi", ..., "W_ho" -> Tensor
    biases: dict  # "b_i", ..., "b_o" -> Tensor
    mode: ProductMode = ProductMode.P

    def __post_init__(self):
        self.mode = ProductMode.parse(self.mode)
        h, d = self.hidden_size, self.input_size
        for g in GATES:
            if self.weights[f"W_i{g}"].shape != (h, d):
                raise ValueError(f"lstm: W_i{g} must be {h}x{d}, got {self.weights[f'W_i{g}'].shape}")
            if self.weights[f"W_h{g}"].shape != (h, h):
                raise ValueError(f"lstm: W_h{g} must be {h}x{h}, got {self.weights[f'W_h{g}'].shape}")
            if self.biases[f"b_{g}"].shape != (h,):
                raise ValueError(f"lstm: b_{g} must have length {h}")

    @property
    def hidden_size(self):
        return self.weights["W_hi"].shape[0]

    @property
    def input_size(self):
        return self.weights["W_ii"].shape[1]

    def parameters(self):
        return OrderedDict(list(self.weights.items()) + list(self.biases.items()))

    @classmethod
    def init(cls, input_size, hidden_size, mode=ProductMode.P, rng=None):
        rng = np.random.default_rng(rng)
        dtype = T.get_default_dtype()
        weights, biases = {}, {}
        for g in GATES:
            b = 1.0 / np.sqrt(input_size)
            weights[f"W_i{g}"] = Tensor(rng.uniform(-b, b, (hidden_size, input_size)), True, dtype)
            b = 1.0 / np.sqrt(hidden_size)
            weights[f"W_h{g}"] = Tensor(rng.uniform(-b, b, (hidden_size, hidden_size)), True, dtype)
        for g in GATES:
            b = 1.0 / np.sqrt(hidden_size)
            biases[f"b_{g}"] = Tensor(rng.uniform(-b, b, hidden_size), True, dtype)
        order = [f"W_{s}{g}" for g in GATES for s in "ih"]
        return cls({k: weights[k] for k in order}, biases, mode)


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden_size, batch=None):
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def lstm_cell(params: LstmParams, x_t, state: LstmState, observe: Observer = None,
              name="lstm") -> LstmState:
    x_t = T.as_tensor(x_t)
    vector = x_t.ndim == 1
    if x_t.shape[-1] != params.input_size:
        raise ValueError(f"lstm: input size {x_t.shape[-1]} != {params.input_size}")
    if state.h.shape[-1] != params.hidden_size:
        raise ValueError(f"lstm: state size {state.h.shape[-1]} != {params.hidden_size}")
    x2 = x_t.reshape(1, -1) if vector else x_t
    h2 = state.h.reshape(1, -1) if state.h.ndim == 1 else state.h
    c2 = state.c.reshape(1, -1) if state.c.ndim == 1 else state.c
    if observe is not None:
        W_in = np.concatenate([params.weights[f"W_i{g}"].data for g in GATES])
        W_hh = np.concatenate([params.weights[f"W_h{g}"].data for g in GATES])
        observe(f"{name}.input_hidden", W_in, x2.data)
        observe(f"{name}.hidden_hidden", W_hh, h2.data)

    pre = {}
    for g in GATES:
        # one bias per gate; the two PR-FC terms are bias-free
        pre[g] = (batched_product(params.weights[f"W_i{g}"], x2, params.mode)
                  + batched_product(params.weights[f"W_h{g}"], h2, params.mode)
                  + params.biases[f"b_{g}"])
    i, f, o = T.sigmoid(pre["i"]), T.sigmoid(pre["f"]), T.sigmoid(pre["o"])
    g = T.tanh(pre["g"])
    c = f * c2 + i * g
    h = o * T.tanh(c)
    if vector:
        h, c = h.reshape(-1), c.reshape(-1)
    return LstmState(h, c)


def lstm_sequence(params: LstmParams, inputs, initial: LstmState = None,
                  observe: Observer = None, name="lstm"):
    """Run the cell over ``inputs`` (T x D, or T x B x D); returns (all h, final state)."""
    inputs = T.as_tensor(inputs)
    steps = inputs.shape[0]
    if steps < 1:
        raise ValueError("lstm: empty sequence")
    batch = None if inputs.ndim == 2 else inputs.shape[1]
    state = initial or LstmState.zeros(params.hidden_size, batch)
    hs = []
    for t in range(steps):
        state = lstm_cell(params, inputs[t], state, observe, name)
        hs.append(state.h.reshape((1,) + state.h.shape))
    return T.concat(hs, axis=0), state


# ---------------------------------------------------------------------------
# model builder
# ---------------------------------------------------------------------------

ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid}


@dataclass
class ModelSpec:
    """Ordered layer list, e.g. ``{"kind": "linear", "name": "fc1", "in": 784, "out": 256}``.

    Kinds: ``linear``, ``conv2d`` (in_channels, out_channels, kernel_size,
    stride, padding), ``relu``/``tanh``/``sigmoid``, ``flatten`` and
    ``global_avg_pool``.
    """

    layers: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, ModelSpec):
            return d
        if isinstance(d, list):
            return cls(list(d))
        if "layers" not in d:
            raise ValueError("model spec needs a 'layers' list")
        return cls(list(d["layers"]))

    def to_dict(self):
        return {"layers": self.layers}


def mlp_spec(sizes, activation="relu") -> ModelSpec:
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append({"kind": "linear", "name": f"fc{k + 1}", "in": n_in, "out": n_out})
        if k < len(sizes) - 2:
            layers.append({"kind": activation})
    return ModelSpec(layers)


def small_cnn_spec(in_channels=3, widths=(32, 32, 64, 64, 128, 128),
                   strides=(1, 1, 2, 1, 2, 1), num_classes=10) -> ModelSpec:
    """Six 3x3 conv layers + ReLU, global average pool, linear classifier."""
    layers = []
    c = in_channels
    for k, (width, stride) in enumerate(zip(widths, strides)):
        layers.append({"kind": "conv2d", "name": f"conv{k + 1}", "in_channels": c,
                       "out_channels": width, "kernel_size": 3, "stride": stride, "padding": 1})
        layers.append({"kind": "relu"})
        c = width
    layers.append({"kind": "global_avg_pool"})
    layers.append({"kind": "linear", "name": "fc", "in": c, "out": num_classes})
    return ModelSpec(layers)


class Model:
    """Parameters plus a forward function built from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, params, mode=ProductMode.P):
        self.spec = spec
        self.params = params  # OrderedDict name -> Tensor
        self.mode = ProductMode.parse(mode)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def product_layer_names(self):
        return [l["name"] for l in self.spec.layers if l["kind"] in ("linear", "conv2d")]

    def forward(self, x, observe: Observer = None) -> Tensor:
        x = T.as_tensor(x)
        for layer in self.spec.layers:
            kind = layer["kind"]
            if kind == "linear":
                if x.ndim != 2:
                    x = x.reshape(x.shape[0], -1)
                name = layer["name"]
                lin = LinearSpec(self.params[f"{name}.weight"],
                                 self.params.get(f"{name}.bias"), self.mode)
                x = linear_forward(lin, x, observe, name)
            elif kind == "conv2d":
                name = layer["name"]
                conv = Conv2dSpec(self.params[f"{name}.weight"], self.params.get(f"{name}.bias"),
                                  layer.get("stride", 1), layer.get("padding", 0), self.mode)
                x = conv2d_forward(conv, x, observe, name)
            elif kind in ACTIVATIONS:
                x = ACTIVATIONS[kind](x)
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            elif kind == "global_avg_pool":
                x = x.mean(axis=(2, 3))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return x

    __call__ = forward


def build_model(spec, seed=0, mode=ProductMode.P) -> Model:
    """Initialise parameters deterministically from ``seed``.

    Linear layers: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and
    bias.  Conv layers: normal with std sqrt(2/fan_in), zero bias.
    """
    spec = ModelSpec.from_dict(spec)
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    params = OrderedDict()
    prev_features = None  # None when the flattened width is not known statically
    prev_channels = None
    for layer in spec.layers:
        kind = layer["kind"]
        if kind == "linear":
            n_in, n_out = int(layer["in"]), int(layer["out"])
            if prev_features is not None and prev_features != n_in:
                raise ValueError(f"layer {layer['name']}: expects {n_in} inputs, "
                                 f"previous layer gives {prev_features}")
            bound = 1.0 / np.sqrt(n_in)
            params[f"{layer['name']}.weight"] = Tensor(
                rng.uniform(-bound, bound, (n_out, n_in)), True, dtype)
            if layer.get("bias", True):
                params[f"{layer['name']}.bias"] = Tensor(rng.uniform(-bound, bound, n_out), True, dtype)
            prev_features = n_out
        elif kind == "conv2d":
            c_in, c_out = int(layer["in_channels"]), int(layer["out_channels"])
            k = layer.get("kernel_size", 3)
            k1, k2 = (k, k) if np.isscalar(k) else k
            if prev_channels is not None and prev_channels != c_in:
                raise ValueError(f"layer {layer['name']}: expects {c_in} channels, "
                                 f"previous layer gives {prev_channels}")
            fan_in = c_in * k1 * k2
            params[f"{layer['name']}.weight"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k1, k2)), True, dtype)
            if layer.get("bias", True):
                params[f"{layer['name']}.bias"] = Tensor(np.zeros(c_out), True, dtype)
            prev_channels = c_out
            prev_features = None
        elif kind == "flatten":
            prev_features = None
        elif kind == "global_avg_pool":
            prev_features = prev_channels
        elif kind not in ACTIVATIONS:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Model(spec, params, mode)
