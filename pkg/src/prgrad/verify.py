"""Gradient oracles that do not go through the tape.

``finite_diff`` is the ground truth for the P and R products.  Detach-based
modes (PR and the two ablations) have no true derivative to compare with, so
``frozen_coeff_oracle`` fixes the detached coefficients at the base point and
differentiates numerically what is left.

The layer references in this module are plain numpy loops with a pluggable
product; :class:`FrozenProducts` records each call's coefficients on a base
pass and replays them on every perturbed pass.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (Conv2dSpec, LinearSpec, LstmParams, LstmState, GATES, conv2d_forward,
                     linear_forward, lstm_sequence)
from .products import DegeneratePair, ProductMode, product_forward, product_value

ORACLE_EPS = 1e-5
MIN_ABS_SIN = 1e-4


def finite_diff(f, x, eps=ORACLE_EPS) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, evaluated in float64."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"finite_diff: non-finite value at component {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b) -> float:
    """max |a - b| scaled by the larger of the two arrays' max-abs (floor 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def _geometry(w, x):
    nw, nx = np.sqrt(w @ w), np.sqrt(x @ x)
    cos = float(np.clip((w @ x) / max(nw * nx, T.EPS_NORM), -1.0, 1.0))
    return nw, nx, cos, np.sqrt(1.0 - cos * cos)


def pr_frozen(w, x, sin0, cos0):
    """PR written through the projection and rejection of x, coefficients fixed.

    |w| * [ |sin0| * sign(cos) |P_x| + cos0 * (|x| - |R_x|) ]
    """
    nw = np.sqrt(w @ w)
    p_x = (w @ x) / (w @ w) * w
    r_x = x - p_x
    sign = 1.0 if w @ x >= 0 else -1.0
    return nw * (sin0 * sign * np.sqrt(p_x @ p_x) + cos0 * (np.sqrt(x @ x) - np.sqrt(r_x @ r_x)))


def frozen_coeff_oracle(w, x, wrt="w", eps=ORACLE_EPS) -> np.ndarray:
    """Numerical PR gradient with ``|sin theta|`` and ``cos theta`` detached."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _, _, cos0, sin0 = _geometry(w, x)
    if sin0 < MIN_ABS_SIN:
        raise DegeneratePair(f"|sin theta| = {sin0:.3g} < {MIN_ABS_SIN}")
    if wrt == "w":
        return finite_diff(lambda v: pr_frozen(v, x, sin0, cos0), w, eps)
    if wrt == "x":
        return finite_diff(lambda v: pr_frozen(w, v, sin0, cos0), x, eps)
    raise ValueError(f"wrt must be 'w' or 'x', got {wrt!r}")


# ---------------------------------------------------------------------------
# product surrogates: same value at the base point, same gradient as the mode
# ---------------------------------------------------------------------------


def _norms(A):
    return np.sqrt(np.einsum("ij,ij->i", A, A))


class FrozenProducts:
    """Batched product ``X W^T`` with each mode's detached parts frozen.

    The first call pass stores the
    coefficients of every call in order; after :meth:`replay` they are reused.
    """

    def __init__(self, mode):
        self.mode = ProductMode.parse(mode)
        self.frozen = []
        self.recording = True
        self.calls = 0

    def replay(self):
        self.recording = False
        self.calls = 0

    def __call__(self, W, X):
        W = np.asarray(W, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        nw, nx = _norms(W), _norms(X)
        dot = X @ W.T
        cos = np.clip(dot / np.maximum(np.outer(nx, nw), T.EPS_NORM), -1.0, 1.0)
        sin = np.sqrt(1.0 - cos * cos)
        mode = self.mode
        if mode is ProductMode.P:
            return dot
        if mode is ProductMode.R:
            return np.where(cos >= 0, 1.0, -1.0) * np.outer(nx, nw) * (1.0 - sin)

        if self.recording:
            if mode is ProductMode.PR:
                # parallel pairs fall back to the plain product (zero rejection direction)
                par = sin < 1e-6
                coeffs = (np.where(par, 1.0, sin), np.where(par, 0.0, cos))
            else:
                coeffs = (dot / np.maximum(nw, T.EPS_NORM), W.copy(), nw.copy())
            self.frozen.append(coeffs)
        coeffs = self.frozen[self.calls]
        self.calls += 1

        if mode is ProductMode.PR:
            c_sin, c_cos = coeffs
            return np.outer(nx, nw) * (c_sin * cos + c_cos * (1.0 - sin))
        k, w0, nw0 = coeffs  # k = |x| cos theta at the base point
        if mode is ProductMode.P_LENGTH_ONLY:
            # d/dw = k * w_hat = P_x, d/dx = w0
            return nw[None, :] * k + X @ w0.T - k * nw0[None, :]
        # P_DIRECTION_ONLY: d/dw = x - P_x = R_x, d/dx = w
        return dot - nw[None, :] * k + k * nw0[None, :]


def surrogate_gradients(mode, w, x):
    """Numerical (grad_w, grad_x) of a single product under ``mode``'s backward rule."""
    prod = FrozenProducts(mode)
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    prod(w[None], x[None])
    prod.replay()

    def f_w(v):
        prod.calls = 0
        return prod(v[None], x[None])[0, 0]

    def f_x(v):
        prod.calls = 0
        return prod(w[None], v[None])[0, 0]

    return finite_diff(f_w, w), finite_diff(f_x, x)


# ---------------------------------------------------------------------------
# numpy layer references
# ---------------------------------------------------------------------------


def ref_linear(params, X, prod):
    out = prod(params["weight"], X)
    if "bias" in params:
        out = out + params["bias"]
    return out


def ref_conv(params, x, prod, stride=1, padding=0):
    """Direct sliding-window convolution (N x C x H x W) with a pluggable product."""
    K = params["weight"]
    c_out, c_in, k1, k2 = K.shape
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k1) // stride + 1
    ow = (w + 2 * padding - k2) // stride + 1
    rows = []
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                win = xp[b, :, i * stride:i * stride + k1, j * stride:j * stride + k2]
                rows.append(win.reshape(-1))
    out = prod(K.reshape(c_out, -1), np.array(rows))
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    if "bias" in params:
        out = out + params["bias"][None, :, None, None]
    return out


def ref_lstm(params, xs, prod):
    """Unrolled LSTM over ``xs`` (T x B x D) from a zero state; returns all h (T x B x H)."""
    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    H = params["W_hi"].shape[0]
    h = np.zeros((xs.shape[1], H))
    c = np.zeros_like(h)
    hs = []
    for x in xs:
        z = {g: prod(params[f"W_i{g}"], x) + prod(params[f"W_h{g}"], h) + params[f"b_{g}"]
             for g in GATES}
        c = sig(z["f"]) * c + sig(z["i"]) * np.tanh(z["g"])
        h = sig(z["o"]) * np.tanh(c)
        hs.append(h)
    return np.stack(hs)


def layer_oracle(ref_fn, params, inputs, mode, readout, eps=ORACLE_EPS):
    """Numerical gradient of ``sum(readout * ref_fn(...))`` w.r.t. every parameter."""
    prod = FrozenProducts(mode)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    inputs = np.asarray(inputs, dtype=np.float64)
    ref_fn(params, inputs, prod)
    prod.replay()

    def loss():
        prod.calls = 0
        return float((ref_fn(params, inputs, prod) * readout).sum())

    grads = {}
    for name, value in params.items():
        def f(v, name=name, orig=value):
            params[name] = v
            try:
                return loss()
            finally:
                params[name] = orig
        grads[name] = finite_diff(f, value, eps)
    return grads


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    case: str
    parameter: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _tape_product_grads(w, x, mode):
    with T.shadow_precision():
        wt = T.Tensor(w, requires_grad=True)
        xt = T.Tensor(x, requires_grad=True)
        T.zero_grad()
        out = product_forward(wt, xt, mode)
        T.backward(out)
        T.zero_grad()
    return wt.grad, xt.grad


def _random_pair(rng, d):
    while True:
        w, x = rng.standard_normal(d), rng.standard_normal(d)
        _, _, _, sin = _geometry(w, x)
        if sin >= MIN_ABS_SIN:
            return w, x


def check_products(rng, dims, modes, pairs=8, tol=1e-4):
    reports = []
    for mode in modes:
        mode = ProductMode.parse(mode)
        for d in dims:
            err_w = err_x = 0.0
            for _ in range(pairs):
                w, x = _random_pair(rng, d)
                gw, gx = _tape_product_grads(w, x, mode)
                if mode is ProductMode.PR:
                    ow = frozen_coeff_oracle(w, x, "w")
                    ox = frozen_coeff_oracle(w, x, "x")
                elif mode in (ProductMode.P, ProductMode.R):
                    ow = finite_diff(lambda v: product_value(v, x, mode), w)
                    ox = finite_diff(lambda v: product_value(w, v, mode), x)
                else:
                    ow, ox = surrogate_gradients(mode, w, x)
                err_w = max(err_w, relative_error(gw, ow))
                err_x = max(err_x, relative_error(gx, ox))
            case = f"product/{mode.value}/d{d}"
            reports.append(GradCheckReport(case, "w", err_w, tol))
            reports.append(GradCheckReport(case, "x", err_x, tol))
    return reports


def _tape_grads(forward, params, readout):
    T.zero_grad()
    tensors = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
    out = forward(tensors)
    loss = (out * T.Tensor(readout, dtype=out.dtype)).sum()
    T.backward(loss)
    grads = {k: t.grad for k, t in tensors.items()}
    T.zero_grad()
    return grads


def check_layers(rng, modes, tol=1e-2, shadow=False):
    """Linear, 3x3 conv on 1x4x4 and a 3-step LSTM, tape vs frozen oracle."""
    reports = []
    linear = {"weight": rng.standard_normal((3, 5)), "bias": rng.standard_normal(3)}
    X = rng.standard_normal((4, 5))
    conv = {"weight": rng.standard_normal((2, 1, 3, 3)), "bias": rng.standard_normal(2)}
    img = rng.standard_normal((1, 1, 4, 4))
    D, H, steps = 3, 4, 3
    lstm = {}
    for g in GATES:
        lstm[f"W_i{g}"] = rng.uniform(-0.8, 0.8, (H, D))
        lstm[f"W_h{g}"] = rng.uniform(-0.8, 0.8, (H, H))
    for g in GATES:
        lstm[f"b_{g}"] = rng.uniform(-0.5, 0.5, H)
    seq = rng.standard_normal((steps, 2, D))

    for mode in modes:
        mode = ProductMode.parse(mode)
        cases = [
            ("linear", linear, X, lambda p, inp, prod: ref_linear(p, inp, prod),
             lambda t: linear_forward(LinearSpec(t["weight"], t["bias"], mode), X)),
            ("conv3x3", conv, img, lambda p, inp, prod: ref_conv(p, inp, prod, 1, 1),
             lambda t: conv2d_forward(Conv2dSpec(t["weight"], t["bias"], 1, 1, mode), img)),
            ("lstm3", lstm, seq, ref_lstm,
             lambda t: lstm_sequence(
                 LstmParams({k: v for k, v in t.items() if k.startswith("W")},
                            {k: v for k, v in t.items() if k.startswith("b")}, mode),
                 seq, LstmState.zeros(H, seq.shape[1]))[0]),
        ]
        for name, params, inputs, ref_fn, tape_fn in cases:
            prod = FrozenProducts(mode)
            probe = ref_fn({k: np.asarray(v) for k, v in params.items()}, inputs, prod)
            readout = np.random.default_rng(7).standard_normal(probe.shape)
            oracle = layer_oracle(ref_fn, params, inputs, mode, readout)
            if shadow:
                with T.shadow_precision():
                    got = _tape_grads(tape_fn, params, readout)
            else:
                got = _tape_grads(tape_fn, params, readout)
            precision = "f64" if shadow else "f32"
            for pname in params:
                reports.append(GradCheckReport(f"layer/{name}/{mode.value}/{precision}", pname,
                                               relative_error(got[pname], oracle[pname]), tol))
    return reports


def gradcheck_suite(seed=0, sizes=(2, 3, 16, 256), modes=tuple(ProductMode)):
    """Per-product and per-layer checks; sorted by case id."""
    rng = np.random.default_rng(seed)
    reports = check_products(rng, sizes, modes)
    reports += check_layers(rng, modes, tol=1e-2, shadow=False)
    reports += check_layers(rng, modes, tol=1e-4, shadow=True)
    return sorted(reports, key=lambda r: (r.case, r.parameter))


REPORT_COLUMNS = ("case", "parameter", "max_rel_error", "tolerance", "passed")


def write_report(reports, path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow([r.case, r.parameter, f"{r.max_rel_error:.6e}", f"{r.tolerance:g}",
                         int(r.passed)])
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)
