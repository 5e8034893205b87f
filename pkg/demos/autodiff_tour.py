"""A short tour of the autodiff engine.

Shows first and second derivatives of a scalar function, then the
meta-gradient that trajectory matching relies on: how one SGD step's
result changes with the data that produced it.

    python3 demos/autodiff_tour.py
"""
import numpy as np

from padistill import autodiff as ad
from padistill.autodiff import Tensor, grad


def derivatives():
    x = Tensor(1.5, requires_grad=True)
    f = ad.mul(ad.square(x), ad.exp(x))  # x^2 e^x
    (df,) = grad(f, [x], create_graph=True)
    (d2f,) = grad(df, [x])
    e = np.exp(1.5)
    print(f"f'(1.5)  = {df.item():.6f}   closed form {(2 * 1.5 + 1.5 ** 2) * e:.6f}")
    print(f"f''(1.5) = {d2f.item():.6f}   closed form {(2 + 4 * 1.5 + 1.5 ** 2) * e:.6f}")


def meta_gradient():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 2))
    target = rng.normal(size=(3, 2))
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)  # the "synthetic data"
    y = Tensor(np.eye(2)[[0, 1, 0, 1]])

    # one SGD step on the data, kept differentiable with create_graph
    w = Tensor(w0, requires_grad=True)
    loss = ad.softmax_cross_entropy(ad.matmul(x, w), y)
    (gw,) = grad(loss, [w], create_graph=True)
    w1 = ad.sub(w, ad.mul(gw, 0.5))

    # distance of the stepped weights to a target, differentiated w.r.t. the data
    dist = ad.sum_(ad.square(ad.sub(w1, Tensor(target))))
    (gx,) = grad(dist, [x])
    print(f"distance after one step: {dist.item():.4f}")
    print("d distance / d data:\n", np.round(gx.data, 4))


if __name__ == "__main__":
    derivatives()
    meta_gradient()
