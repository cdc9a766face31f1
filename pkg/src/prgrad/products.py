"""P, R and PR products of a weight vector ``w`` and a data vector ``x``.

All modes except ``R`` return the plain inner product ``w.x`` in the forward
pass; they differ only in the gradient they send back.  PR keeps the length
gradient of ``w`` (the projection ``P_x``) but rescales its direction
gradient to ``|x| * E_rx``, which does not shrink as ``w`` and ``x`` become
parallel.

Norms and dot products are accumulated in float64 and the results cast back
to the storage dtype.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import EPS_NORM, Tensor, as_tensor, record

EPS_PAR = 1e-6


class ProductMode(str, enum.Enum):
    P = "P"
    R = "R"
    PR = "PR"
    P_LENGTH_ONLY = "P_LENGTH_ONLY"
    P_DIRECTION_ONLY = "P_DIRECTION_ONLY"

    @classmethod
    def parse(cls, value) -> "ProductMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown product mode {value!r}; expected one of {names}") from None


class DegeneratePair(ValueError):
    """Raised when a check needs a non-parallel (w, x) pair."""


def _sign(v):
    # sign(0) := +1
    return np.where(np.asarray(v) >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class ProductTerms:
    """Geometry of one (w, x) pair, in float64."""

    norm_w: float
    norm_x: float
    cos_theta: float
    abs_sin_theta: float
    p_x: np.ndarray
    r_x: np.ndarray
    e_rx: np.ndarray
    e_x: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.abs_sin_theta < EPS_PAR


def _vec(v) -> np.ndarray:
    if isinstance(v, Tensor):
        v = v.data
    return np.asarray(v, dtype=np.float64).reshape(-1)


def _check_pair(w, x):
    if w.shape != x.shape or w.size == 0:
        raise ValueError(f"product: dimension mismatch, w has shape {w.shape} and x {x.shape}")


def compute_terms(w, x) -> ProductTerms:
    w, x = _vec(w), _vec(x)
    _check_pair(w, x)
    norm_w = float(np.sqrt(w @ w))
    norm_x = float(np.sqrt(x @ x))
    cos = float(np.clip((w @ x) / max(norm_w * norm_x, EPS_NORM), -1.0, 1.0))
    sin = float(np.sqrt(1.0 - cos * cos))
    p_x = (cos * norm_x) * (w / max(norm_w, EPS_NORM))
    r_x = x - p_x
    len_rx = np.sqrt(r_x @ r_x)
    if sin < EPS_PAR or len_rx < EPS_NORM:
        e_rx = np.zeros_like(x)
    else:
        e_rx = r_x / len_rx
    e_x = x / norm_x if norm_x >= EPS_NORM else np.zeros_like(x)
    return ProductTerms(norm_w, norm_x, cos, sin, p_x, r_x, e_rx, e_x)


def product_value(w, x, mode) -> float:
    """Forward value of one product as a float64 scalar."""
    mode = ProductMode.parse(mode)
    w, x = _vec(w), _vec(x)
    _check_pair(w, x)
    if mode is not ProductMode.R:
        return float(w @ x)
    t = compute_terms(w, x)
    return float(_sign(t.cos_theta) * t.norm_w * (t.norm_x - np.sqrt(t.r_x @ t.r_x)))


def product_backward(terms: ProductTerms, w, x, mode, upstream=1.0):
    """Gradients ``(grad_w, grad_x)`` of one product, scaled by ``upstream``."""
    mode = ProductMode.parse(mode)
    w, x = _vec(w), _vec(x)
    t = terms
    if mode is ProductMode.P:
        gw, gx = x, w
    elif mode is ProductMode.PR:
        gw = t.p_x + t.norm_x * t.e_rx
        gx = t.abs_sin_theta * w + t.cos_theta * t.norm_w * (t.e_x - t.e_rx)
    elif mode is ProductMode.R:
        sg = _sign(t.cos_theta)
        w_hat = w / max(t.norm_w, EPS_NORM)
        len_rx = np.sqrt(t.r_x @ t.r_x)
        gw = sg * (t.norm_x - len_rx) * w_hat + abs(t.cos_theta) * t.norm_x * t.e_rx
        gx = sg * t.norm_w * (t.e_x - t.e_rx)
    elif mode is ProductMode.P_LENGTH_ONLY:
        gw, gx = t.p_x, w
    else:
        gw, gx = t.r_x, w
    return upstream * np.asarray(gw), upstream * np.asarray(gx)


def product_forward(w, x, mode) -> Tensor:
    """Product of two 1-D tensors, recorded with the mode's backward rule."""
    mode = ProductMode.parse(mode)
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 1:
        raise ValueError(f"product: expected 1-D vectors, got shape {w.shape}")
    _check_pair(w.data, x.data)
    dtype = np.result_type(w.dtype, x.dtype)
    out = np.asarray(product_value(w.data, x.data, mode), dtype=dtype)
    terms = compute_terms(w.data, x.data)

    def back(g):
        gw, gx = product_backward(terms, w.data, x.data, mode, float(g))
        return gw.astype(w.dtype), gx.astype(x.dtype)

    return record(f"product_{mode.value}", (w, x), out, back)


def closed_form_grads(w, x, mode):
    """Analytic gradients via the angle chain rule, independent of the tape.

    Works from ``d cos / dw`` and ``d cos / dx`` rather than from the
    projection/rejection vectors used by :func:`product_backward`.
    """
    mode = ProductMode.parse(mode)
    w, x = _vec(w), _vec(x)
    _check_pair(w, x)
    nw, nx = np.sqrt(w @ w), np.sqrt(x @ x)
    w_hat = w / max(nw, EPS_NORM)
    x_hat = x / max(nx, EPS_NORM)
    cos = float(np.clip(w_hat @ x_hat, -1.0, 1.0))
    sin = np.sqrt(1.0 - cos * cos)
    dcos_dw = (x_hat - cos * w_hat) / max(nw, EPS_NORM)
    dcos_dx = (w_hat - cos * x_hat) / max(nx, EPS_NORM)
    len_part_w = nx * cos * w_hat

    if mode is ProductMode.P:
        return x.copy(), w.copy()
    if mode is ProductMode.P_LENGTH_ONLY:
        return len_part_w, w.copy()
    if mode is ProductMode.P_DIRECTION_ONLY:
        return x - len_part_w, w.copy()

    degenerate = sin < EPS_PAR
    if mode is ProductMode.PR:
        # d PR / d theta = -|w||x| on [0, pi); d theta = -d cos / |sin theta|
        if degenerate:
            return len_part_w, sin * w + cos * nw * x_hat
        gw = len_part_w + nw * nx * dcos_dw / sin
        gx = nw * cos * x_hat + nw * nx * dcos_dx / sin
        return gw, gx

    # R = sign(cos) |w| |x| (1 - |sin|), d(1 - |sin|)/d cos = cos / |sin|
    sg = float(_sign(cos))
    if degenerate:
        return sg * nx * (1.0 - sin) * w_hat, sg * nw * x_hat
    gw = sg * (nx * (1.0 - sin) * w_hat + nw * nx * (cos / sin) * dcos_dw)
    gx = sg * (nw * (1.0 - sin) * x_hat + nw * nx * (cos / sin) * dcos_dx)
    return gw, gx


def frozen_forward(w, x, coeffs):
    """PR's forward with its detached coefficients ``(|sin|, cos)`` held fixed."""
    w, x = _vec(w), _vec(x)
    c_sin, c_cos = coeffs
    nw, nx = np.sqrt(w @ w), np.sqrt(x @ x)
    cos = np.clip((w @ x) / max(nw * nx, EPS_NORM), -1.0, 1.0)
    sin = np.sqrt(1.0 - cos * cos)
    return nw * nx * (c_sin * cos + c_cos * (1.0 - sin))


def rotation_derivative_check(w, x, mode, delta=1e-5) -> float:
    """d(forward)/d(phi) for ``w`` rotated by ``phi`` toward ``x`` in their plane.

    Rotating toward ``x`` gives ``d theta / d phi = -1``.  PR is evaluated with
    its coefficients frozen at ``phi = 0``; P and R use their true forward.
    """
    mode = ProductMode.parse(mode)
    if mode in (ProductMode.P_LENGTH_ONLY, ProductMode.P_DIRECTION_ONLY):
        raise ValueError(f"rotation check is not defined for mode {mode.value}")
    w, x = _vec(w), _vec(x)
    t = compute_terms(w, x)
    if t.degenerate:
        raise DegeneratePair(f"|sin theta| = {t.abs_sin_theta:.3g} is below {EPS_PAR}")
    u = w / t.norm_w
    v = t.e_rx
    coeffs = (t.abs_sin_theta, t.cos_theta)

    def f(phi):
        w_rot = t.norm_w * (np.cos(phi) * u + np.sin(phi) * v)
        if mode is ProductMode.PR:
            return frozen_forward(w_rot, x, coeffs)
        return product_value(w_rot, x, mode)

    return float((f(delta) - f(-delta)) / (2.0 * delta))


# ---------------------------------------------------------------------------
# batched form: out[b, o] = product(W[o], X[b])
# ---------------------------------------------------------------------------


def pair_geometry(W, X):
    """Norms and cosines of every (row of W, row of X) pair, in float64.

    Returns ``(norm_w[O], norm_x[B], dot[B, O], cos[B, O], abs_sin[B, O])``.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    nw = np.sqrt(np.einsum("ij,ij->i", W, W))
    nx = np.sqrt(np.einsum("ij,ij->i", X, X))
    dot = X @ W.T
    cos = np.clip(dot / np.maximum(np.outer(nx, nw), EPS_NORM), -1.0, 1.0)
    sin = np.sqrt(1.0 - cos * cos)
    return nw, nx, dot, cos, sin


def _batched_value(W, X, mode):
    if mode is not ProductMode.R:
        return np.asarray(X, dtype=np.float64) @ np.asarray(W, dtype=np.float64).T
    nw, nx, _, cos, sin = pair_geometry(W, X)
    return _sign(cos) * np.outer(nx, nw) * (1.0 - sin)


def _batched_grads(W, X, G, mode):
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if mode is ProductMode.P:
        return G.T @ X, G @ W

    nw, nx, dot, cos, sin = pair_geometry(W, X)
    a = dot / np.maximum(nw * nw, EPS_NORM * EPS_NORM)  # P_x = a * w
    if mode is ProductMode.P_LENGTH_ONLY:
        return W * (G * a).sum(axis=0)[:, None], G @ W
    if mode is ProductMode.P_DIRECTION_ONLY:
        return G.T @ X - W * (G * a).sum(axis=0)[:, None], G @ W

    # |x| E_rx = (x - a w) * inv_sin, zero for (near-)parallel pairs
    inv_sin = np.where(sin >= EPS_PAR, 1.0 / np.maximum(sin, EPS_PAR), 0.0)
    inv_nx = (1.0 / np.maximum(nx, EPS_NORM))[:, None]

    if mode is ProductMode.PR:
        c = G * inv_sin
        gW = W * (G * a * (1.0 - inv_sin)).sum(axis=0)[:, None] + c.T @ X
        k = G * cos * nw
        gX = (G * sin + k * a * inv_sin * inv_nx) @ W \
            + X * ((k * (1.0 - inv_sin)).sum(axis=1)[:, None] * inv_nx)
        return gW, gX

    # R
    sg = _sign(cos)
    c = G * np.abs(cos) * inv_sin
    coef_w = G * sg * nx[:, None] * (1.0 - sin) / np.maximum(nw, EPS_NORM) - c * a
    gW = W * coef_w.sum(axis=0)[:, None] + c.T @ X
    k = G * sg * nw
    gX = (k * a * inv_sin * inv_nx) @ W + X * ((k * (1.0 - inv_sin)).sum(axis=1)[:, None] * inv_nx)
    return gW, gX


def batched_product(W, X, mode) -> Tensor:
    """``out[b, o] = product(W[o], X[b])`` for W (out x in) and X (batch x in)."""
    mode = ProductMode.parse(mode)
    W, X = as_tensor(W), as_tensor(X)
    if W.ndim != 2 or X.ndim != 2 or W.shape[1] != X.shape[1]:
        raise ValueError(f"batched_product: incompatible shapes W {W.shape} and X {X.shape}")
    dtype = np.result_type(W.dtype, X.dtype)
    out = _batched_value(W.data, X.data, mode).astype(dtype)

    def back(g):
        gW, gX = _batched_grads(W.data, X.data, g, mode)
        return gW.astype(W.dtype), gX.astype(X.dtype)

    return record(f"batched_product_{mode.value}", (W, X), out, back)
