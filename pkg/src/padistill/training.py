"""Plain minibatch SGD (optionally with momentum) over flat parameters."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .nets import NetworkSpec, forward


def sgd_train(spec: NetworkSpec, theta: np.ndarray, images: np.ndarray, targets: np.ndarray,
              epochs: int, lr: float, batch_size: int, rng: np.random.Generator,
              momentum: float = 0.0,
              epoch_indices: Callable[[int], np.ndarray] | None = None,
              on_epoch: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Train for ``epochs`` passes and return the final parameter vector.

    ``epoch_indices(e)`` restricts epoch ``e`` to a subset of samples.  The
    momentum buffer follows ``v = momentum * v + g; theta -= lr * v``.
    ``on_epoch(e, theta)`` is called after every epoch.
    """
    theta = np.array(theta, dtype=np.float64)
    velocity = np.zeros_like(theta)
    n = len(images)
    for epoch in range(epochs):
        idx = np.arange(n) if epoch_indices is None else np.asarray(epoch_indices(epoch))
        if len(idx) == 0:
            raise ValueError(f"epoch {epoch} has an empty training set")
        order = rng.permutation(idx)
        for start in range(0, len(order), batch_size):
            b = order[start:start + batch_size]
            th = ad.Tensor(theta, requires_grad=True)
            loss = ad.softmax_cross_entropy(forward(spec, th, images[b]), targets[b])
            (g,) = ad.grad(loss, [th])
            if momentum:
                velocity = momentum * velocity + g.data
                theta = theta - lr * velocity
            else:
                theta = theta - lr * g.data
        if on_epoch is not None:
            on_epoch(epoch, theta)
    return theta


def dataset_loss(spec: NetworkSpec, theta, images: np.ndarray, targets: np.ndarray) -> float:
    return ad.softmax_cross_entropy(forward(spec, theta, images), targets).item()
