"""
Geometry of the P, R and PR products
====================================

A weight vector w and a data vector x.  The inner product only sees the
angle through cos(theta), so its gradient along the direction of w shrinks
like |sin(theta)| as the two vectors line up.  PR keeps the same forward
value but rescales that direction gradient to |x|.
"""
import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

import prgrad as pg

w = np.array([1.0, 0.0])
x = np.array([1.0, 1.0])

# projection, rejection and the unit rejection
t = pg.compute_terms(w, x)
print("cos", round(t.cos_theta, 5), "|sin|", round(t.abs_sin_theta, 5))
print("P_x", t.p_x, "R_x", t.r_x, "E_rx", t.e_rx)

# same forward value for every mode except R
for mode in pg.ProductMode:
    print(f"{mode.value:<17} forward {pg.product_value(w, x, mode):.5f}")

# gradients through the tape
for mode in ("P", "PR", "R"):
    wt, xt = pg.Tensor(w, requires_grad=True), pg.Tensor(x, requires_grad=True)
    pg.backward(pg.product_forward(wt, xt, mode))
    print(f"{mode:<3} grad_w {np.round(wt.grad, 5)}  grad_x {np.round(xt.grad, 5)}")
    pg.zero_grad()

# rotate w toward x: the P slope is |w||x|sin(theta), PR's is |w||x| for every angle
thetas = np.linspace(0.05, np.pi - 0.05, 60)
slopes = {m: [] for m in ("P", "PR")}
for theta in thetas:
    x_theta = np.array([np.cos(theta), np.sin(theta)])
    for m in slopes:
        slopes[m].append(abs(pg.rotation_derivative_check(w, x_theta, m)))

fig, ax = plt.subplots(figsize=(5, 3))
for m, ys in slopes.items():
    ax.plot(thetas, ys, label=m)
ax.set_xlabel("theta")
ax.set_ylabel("|d forward / d rotation|")
ax.legend()
fig.tight_layout()
fig.savefig("product_geometry.png", dpi=120)
print("saved product_geometry.png")
