import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from prgrad import tensor as T
from prgrad.products import (DegeneratePair, ProductMode, batched_product, closed_form_grads,
                             compute_terms, frozen_forward, product_backward, product_forward,
                             product_value, rotation_derivative_check)
from prgrad.verify import frozen_coeff_oracle, relative_error

MODES = list(ProductMode)
S2 = np.sqrt(2.0)


def tape_grads(w, x, mode, dtype=np.float64):
    wt = T.Tensor(w, requires_grad=True, dtype=dtype)
    xt = T.Tensor(x, requires_grad=True, dtype=dtype)
    out = product_forward(wt, xt, mode)
    T.backward(out)
    gw, gx = wt.grad, xt.grad
    T.zero_grad()
    return out.item(), gw, gx


def test_mode_parse():
    assert ProductMode.parse("pr") is ProductMode.PR
    with pytest.raises(ValueError, match="P_LENGTH_ONLY"):
        ProductMode.parse("Q")


# ---- compute_terms ---------------------------------------------------------

def test_terms_diagonal():
    t = compute_terms([1, 0], [1, 1])
    assert t.cos_theta == pytest.approx(0.70711, abs=1e-5)
    assert t.abs_sin_theta == pytest.approx(0.70711, abs=1e-5)
    np.testing.assert_allclose(t.p_x, [1, 0], atol=1e-12)
    np.testing.assert_allclose(t.r_x, [0, 1], atol=1e-12)
    np.testing.assert_allclose(t.e_rx, [0, 1], atol=1e-12)


def test_terms_orthogonal():
    t = compute_terms([1, 0], [0, 2])
    assert t.cos_theta == 0
    np.testing.assert_allclose(t.p_x, [0, 0])
    np.testing.assert_allclose(t.e_rx, [0, 1])


def test_terms_parallel_convention():
    t = compute_terms([2, 0], [3, 0])
    assert t.cos_theta == 1
    np.testing.assert_allclose(t.r_x, [0, 0])
    np.testing.assert_array_equal(t.e_rx, [0, 0])
    assert t.degenerate


def test_terms_zero_vectors_are_finite():
    t = compute_terms([0, 0, 0], [1, 2, 3])
    assert np.isfinite(t.cos_theta)
    t = compute_terms([1, 2, 3], [0, 0, 0])
    np.testing.assert_array_equal(t.e_x, 0)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        compute_terms([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="dimension mismatch"):
        product_forward(T.Tensor([1.0, 2.0]), T.Tensor([1.0]), "PR")


vectors = st.integers(1, 12).flatmap(lambda d: st.tuples(
    arrays(np.float64, d, elements=st.floats(-100, 100)),
    arrays(np.float64, d, elements=st.floats(-100, 100))))


@settings(max_examples=300, deadline=None)
@given(vectors)
def test_terms_invariants(pair):
    w, x = pair
    t = compute_terms(w, x)
    nx = np.linalg.norm(x)
    scale = max(nx, 1e-12)
    assert np.abs(t.p_x + t.r_x - x).max() <= 1e-5 * scale + 1e-12
    if np.linalg.norm(w) > 1e-6 and nx > 1e-6:
        assert abs(t.p_x @ t.r_x) <= 1e-5 * nx ** 2 + 1e-12
        # lengths agree to 1e-5 of |x|
        assert abs(np.linalg.norm(t.p_x) - nx * abs(t.cos_theta)) <= 1e-5 * nx
        assert abs(np.linalg.norm(t.r_x) - nx * t.abs_sin_theta) <= 1e-5 * nx
    assert -1 <= t.cos_theta <= 1 and 0 <= t.abs_sin_theta <= 1
    assert t.cos_theta ** 2 + t.abs_sin_theta ** 2 == pytest.approx(1.0, abs=1e-15)
    n = np.linalg.norm(t.e_rx)
    assert n == 0 or abs(n - 1) <= 1e-5


# ---- forward -----------------------------------------------------------------

def test_forward_examples():
    assert product_forward([1.0, 0.0], [1.0, 1.0], "PR").item() == 1.0
    assert product_forward([1.0, 0.0], [1.0, 1.0], "R").item() == pytest.approx(S2 - 1, abs=1e-6)
    for mode in ("P", "PR", "P_LENGTH_ONLY", "P_DIRECTION_ONLY"):
        out = product_forward([0.3, -0.7, 0.2], [1.0, 1.0, 1.0], mode)
        assert out.item() == pytest.approx(-0.2, abs=1e-6)


@pytest.mark.parametrize("mode", MODES)
def test_scale_covariance(mode, rng):
    for _ in range(50):
        d = rng.integers(2, 20)
        w, x = rng.standard_normal(d), rng.standard_normal(d)
        alpha = rng.uniform(0.1, 10)
        assert product_value(alpha * w, x, mode) == pytest.approx(
            alpha * product_value(w, x, mode), rel=1e-9, abs=1e-12)


# ---- backward ----------------------------------------------------------------

def test_pr_backward_diagonal():
    _, gw, gx = tape_grads([1, 0], [1, 1], "PR")
    np.testing.assert_allclose(gw, [1, S2], atol=1e-5)
    np.testing.assert_allclose(gx, [1.20711, -0.20711], atol=1e-5)


def test_pr_backward_orthogonal_equals_x():
    _, gw, _ = tape_grads([1, 0], [0, 2], "PR")
    np.testing.assert_allclose(gw, [0, 2], atol=1e-12)


def test_pr_backward_parallel_equals_x():
    _, gw, gx = tape_grads([2, 0], [3, 0], "PR")
    np.testing.assert_allclose(gw, [3, 0], atol=1e-12)
    np.testing.assert_allclose(gx, [2, 0], atol=1e-12)


def test_r_backward_diagonal():
    _, gw, _ = tape_grads([1, 0], [1, 1], "R")
    np.testing.assert_allclose(gw, [S2 - 1, 1.0], atol=1e-5)


def test_r_gradient_vanishes_at_orthogonality():
    _, gw, gx = tape_grads([1, 0], [0, 2], "R")
    np.testing.assert_allclose(gw, 0, atol=1e-12)
    np.testing.assert_allclose(gx, 0, atol=1e-12)


def test_ablation_backward():
    _, gw, gx = tape_grads([1, 0], [1, 1], "P_LENGTH_ONLY")
    np.testing.assert_allclose(gw, [1, 0])
    np.testing.assert_allclose(gx, [1, 0])
    _, gw, gx = tape_grads([1, 0], [1, 1], "P_DIRECTION_ONLY")
    np.testing.assert_allclose(gw, [0, 1])
    np.testing.assert_allclose(gx, [1, 0])


def test_upstream_scales_gradients():
    t = compute_terms([1, 2, 3], [-1, 0.5, 2])
    gw, gx = product_backward(t, [1, 2, 3], [-1, 0.5, 2], "PR", 1.0)
    gw3, gx3 = product_backward(t, [1, 2, 3], [-1, 0.5, 2], "PR", -3.0)
    np.testing.assert_allclose(gw3, -3 * gw)
    np.testing.assert_allclose(gx3, -3 * gx)


@pytest.mark.parametrize("mode", MODES)
def test_closed_form_agrees_with_backward(mode):
    rng = np.random.default_rng(hash(mode.value) % 2**32)
    dims = (2, 3, 16, 256)
    for k in range(2500):
        d = dims[k % 4]
        w, x = rng.standard_normal(d), rng.standard_normal(d)
        t = compute_terms(w, x)
        gw, gx = product_backward(t, w, x, mode)
        cw, cx = closed_form_grads(w, x, mode)
        assert relative_error(gw, cw) <= 1e-5
        assert relative_error(gx, cx) <= 1e-5


def test_closed_form_degenerate_conventions():
    for mode in MODES:
        gw, gx = closed_form_grads([2, 0], [3, 0], mode)
        t = compute_terms([2, 0], [3, 0])
        bw, bx = product_backward(t, [2, 0], [3, 0], mode)
        np.testing.assert_allclose(gw, bw, atol=1e-12)
        np.testing.assert_allclose(gx, bx, atol=1e-12)


def test_pr_direction_component_has_length_norm_x(rng):
    for _ in range(500):
        d = rng.integers(2, 64)
        w, x = rng.standard_normal(d), rng.standard_normal(d)
        t = compute_terms(w, x)
        if t.abs_sin_theta <= 1e-3:
            continue
        gw, _ = product_backward(t, w, x, "PR")
        w_hat = w / np.linalg.norm(w)
        along = (gw @ w_hat) * w_hat
        np.testing.assert_allclose(along, t.p_x, atol=1e-9 * t.norm_x)
        assert np.linalg.norm(gw - along) == pytest.approx(t.norm_x, rel=1e-5)
        gp, _ = product_backward(t, w, x, "P")
        p_dir = gp - (gp @ w_hat) * w_hat
        assert np.linalg.norm(p_dir) == pytest.approx(t.norm_x * t.abs_sin_theta, rel=1e-5)
        assert np.linalg.norm(gw - along) >= np.linalg.norm(p_dir) - 1e-12


def test_pr_matches_frozen_oracle(rng):
    for d in (2, 3, 16, 64):
        for _ in range(10):
            w, x = rng.standard_normal(d), rng.standard_normal(d)
            _, gw, gx = tape_grads(w, x, "PR")
            assert relative_error(gw, frozen_coeff_oracle(w, x, "w")) <= 1e-4
            assert relative_error(gx, frozen_coeff_oracle(w, x, "x")) <= 1e-4


def test_frozen_forward_equals_inner_product(rng):
    w, x = rng.standard_normal(7), rng.standard_normal(7)
    t = compute_terms(w, x)
    assert frozen_forward(w, x, (t.abs_sin_theta, t.cos_theta)) == pytest.approx(w @ x, rel=1e-12)


def test_decomposition_identity(rng):
    for _ in range(1000):
        d = rng.integers(2, 32)
        w, x = rng.standard_normal(d), rng.standard_normal(d)
        t = compute_terms(w, x)
        pr = product_value(w, x, "PR")
        mix = t.abs_sin_theta * product_value(w, x, "P") + abs(t.cos_theta) * product_value(w, x, "R")
        assert abs(pr - mix) <= 1e-5 * max(abs(pr), 1e-8)
        gp, _ = product_backward(t, w, x, "P")
        gr, _ = product_backward(t, w, x, "R")
        gpr, _ = product_backward(t, w, x, "PR")
        assert relative_error(t.abs_sin_theta * gp + abs(t.cos_theta) * gr, gpr) <= 1e-5


# ---- rotation check ------------------------------------------------------------

def test_rotation_examples():
    assert rotation_derivative_check([1, 0], [1, 1], "PR") == pytest.approx(S2, rel=1e-6)
    assert abs(rotation_derivative_check([1, 0], [1, 1], "P")) == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("theta", [0.1, 0.5, 1.0, 2.0, 3.0])
def test_rotation_magnitude(theta):
    w = np.array([1.5, 0.0])
    x = 0.8 * np.array([np.cos(theta), np.sin(theta)])
    scale = 1.5 * 0.8
    assert abs(rotation_derivative_check(w, x, "PR")) == pytest.approx(scale, rel=1e-3)
    assert abs(rotation_derivative_check(w, x, "P")) == pytest.approx(scale * np.sin(theta), rel=1e-3)


def test_rotation_degenerate_and_ablation():
    with pytest.raises(DegeneratePair):
        rotation_derivative_check([1, 0], [2, 0], "PR")
    with pytest.raises(ValueError):
        rotation_derivative_check([1, 0], [1, 1], "P_LENGTH_ONLY")


# ---- batched -------------------------------------------------------------------

def test_batched_identity():
    out = batched_product(np.eye(2), [[3.0, 4.0]], "P")
    np.testing.assert_array_equal(out.data, [[3, 4]])


def test_batched_pr_forward_equals_p(rng):
    W, X = rng.standard_normal((32, 128)), rng.standard_normal((64, 128))
    p = batched_product(W, X, "P").data
    pr = batched_product(W, X, "PR").data
    assert np.abs(p - pr).max() <= 1e-5


def test_batched_shape_error():
    with pytest.raises(ValueError, match="incompatible"):
        batched_product(np.ones((3, 4)), np.ones((2, 5)), "P")


@pytest.mark.parametrize("mode", MODES)
def test_batched_backward_matches_pairs(mode, rng):
    W0, X0 = rng.standard_normal((5, 6)), rng.standard_normal((4, 6))
    X0[1] = 2.5 * W0[2]  # one parallel pair
    G = rng.standard_normal((4, 5))
    with T.shadow_precision():
        W, X = T.Tensor(W0, True), T.Tensor(X0, True)
        out = batched_product(W, X, mode)
        T.backward((out * T.Tensor(G)).sum())
    ref_w, ref_x = np.zeros_like(W0), np.zeros_like(X0)
    ref_out = np.zeros((4, 5))
    for b in range(4):
        for o in range(5):
            t = compute_terms(W0[o], X0[b])
            gw, gx = product_backward(t, W0[o], X0[b], mode, G[b, o])
            ref_w[o] += gw
            ref_x[b] += gx
            ref_out[b, o] = product_value(W0[o], X0[b], mode)
    assert relative_error(out.data, ref_out) <= 1e-10
    assert relative_error(W.grad, ref_w) <= 1e-5
    assert relative_error(X.grad, ref_x) <= 1e-5
