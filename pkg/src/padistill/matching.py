"""Trajectory, gradient and distribution matching with parameter masking.

The mask operates on the flat parameter vector (shallow to deep).  The
default ``shallow_prefix`` mode drops the first ``floor(L * ratio)``
parameters from the matching metric, ``deep_suffix`` drops the last ones and
``loss_ranked`` keeps the parameters with the largest matching residuals.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabeledDataset, SyntheticDataset, project_soft_labels
from .nets import NetworkSpec, forward, forward_features, init_params, layer_depth_map
from .scheduler import floor_count
from .scoring import DifficultyScores
from .training import sgd_train
from .trajectory import MatchRange, TrajectoryBuffer, current_max_start, sample_segment

MASK_MODES = ("shallow_prefix", "deep_suffix", "loss_ranked")


@dataclass(frozen=True)
class MaskSpec:
    ratio: float = 0.0
    mode: str = "shallow_prefix"

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"mask ratio {self.ratio} outside [0, 1]")
        if self.mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}; choose from {MASK_MODES}")


def mask_indices(L: int, m: MaskSpec, per_param_losses=None) -> np.ndarray:
    """Sorted indices of the parameters that take part in matching."""
    k = floor_count(m.ratio, L)
    if m.mode == "shallow_prefix":
        return np.arange(k, L)
    if m.mode == "deep_suffix":
        return np.arange(0, L - k)
    if per_param_losses is None:
        raise ValueError("loss_ranked masking needs per-parameter losses")
    losses = np.asarray(per_param_losses, dtype=np.float64)
    if losses.shape != (L,):
        raise ValueError(f"expected {L} per-parameter losses, got shape {losses.shape}")
    order = np.lexsort((np.arange(L), -losses))
    return np.sort(order[:L - k])


def _layer_keys(spec: NetworkSpec, mask: np.ndarray | None):
    """Per-layer index keys (slice when the layer is fully kept, None when empty)."""
    keys = []
    for _, (lo, hi) in layer_depth_map(spec):
        if mask is None:
            keys.append(slice(lo, hi))
            continue
        sel = mask[(mask >= lo) & (mask < hi)]
        if len(sel) == 0:
            keys.append(None)
        elif len(sel) == hi - lo:
            keys.append(slice(lo, hi))
        else:
            keys.append(sel)
    return keys


# ------------------------------------------------------- trajectory matching

@dataclass(frozen=True)
class TMConfig:
    syn_steps: int = 20  # N
    student_lr: float = 0.1
    learnable_student_lr: bool = False
    student_lr_lr: float = 1e-5
    pixel_lr: float = 10.0
    label_lr: float = 2.0
    learn_labels: bool = True
    batch_syn: int = 100
    iterations: int = 500
    momentum: float = 0.9
    match: MatchRange = field(default_factory=lambda: MatchRange(0, 10, 20, 100, 2))
    loss_rank_warmup: int = 50

    @property
    def expert_epochs(self) -> int:
        return self.match.expert_epochs

    def problems(self) -> list[str]:
        out = []
        if self.syn_steps < 1:
            out.append(f"syn_steps={self.syn_steps} must be >= 1")
        if self.batch_syn < 1:
            out.append(f"batch_syn={self.batch_syn} must be >= 1")
        if self.iterations < 0:
            out.append(f"iterations={self.iterations} must be >= 0")
        return out + self.match.problems()


class _Batches:
    """Successive chunks of fresh random permutations of ``range(n)``."""

    def __init__(self, n: int, size: int, rng: np.random.Generator | None):
        self.n, self.size, self.rng = n, min(size, n), rng
        self.pool = np.empty(0, dtype=np.int64)

    def next(self):
        if self.rng is None or self.size >= self.n:
            return slice(None)
        if len(self.pool) < self.size:
            self.pool = np.concatenate([self.pool, self.rng.permutation(self.n)])
        idx, self.pool = self.pool[:self.size], self.pool[self.size:]
        return idx


def unroll_student(spec: NetworkSpec, start, images, labels, steps: int, student_lr,
                   batch_syn: int = 0, rng: np.random.Generator | None = None) -> Tensor:
    """``steps`` differentiable SGD steps on the synthetic set from ``start``."""
    images, labels = ad.as_tensor(images), ad.as_tensor(labels)
    theta = Tensor(np.asarray(start, dtype=np.float64), requires_grad=True)
    batches = _Batches(len(images.data), batch_syn or len(images.data), rng)
    for _ in range(steps):
        b = batches.next()
        full = isinstance(b, slice)
        xb = images if full else images[b]
        yb = labels if full else labels[b]
        loss = ad.softmax_cross_entropy(forward(spec, theta, xb), yb)
        (g,) = ad.grad(loss, [theta], create_graph=True)
        theta = ad.sub(theta, ad.mul(g, student_lr))
    return theta


def trajectory_distance(student: Tensor, start: np.ndarray, target: np.ndarray,
                        mask: np.ndarray | None = None) -> Tensor:
    """``||(student - target)[mask]||^2 / ||(target - start)[mask]||^2``."""
    start, target = np.asarray(start), np.asarray(target)
    if mask is not None and len(mask) == 0:
        raise ValueError("mask selects no parameters")
    full = mask is None or len(mask) == len(target)
    expert = target - start if full else (target - start)[mask]
    den = float(np.dot(expert, expert))
    if den == 0.0:
        raise ValueError("degenerate segment: the expert does not move on the masked "
                         "parameters (check the buffer, or lower the mask ratio)")
    resid = ad.sub(student, Tensor(target))
    if not full:
        resid = resid[mask]
    return ad.mul(ad.sum_(ad.square(resid)), 1.0 / den)


def tm_loss(spec: NetworkSpec, images, labels, start, target, cfg: TMConfig,
            mask: np.ndarray | None = None, rng: np.random.Generator | None = None,
            student_lr=None, return_student: bool = False):
    """Normalised trajectory-matching loss of one expert segment.

    ``images``, ``labels`` and ``student_lr`` may be tracked tensors; the
    result is differentiable in all of them.  ``rng`` draws the synthetic
    minibatch of each student step (None: full batch every step).
    """
    lr = cfg.student_lr if student_lr is None else student_lr
    student = unroll_student(spec, start, images, labels, cfg.syn_steps, lr,
                             cfg.batch_syn, rng)
    loss = trajectory_distance(student, start, target, mask)
    return (loss, student) if return_student else loss


def per_layer_losses(spec: NetworkSpec, student: np.ndarray, start: np.ndarray,
                     target: np.ndarray) -> list[float]:
    """Normalised matching loss restricted to each layer's parameters."""
    out = []
    for _, (lo, hi) in layer_depth_map(spec):
        den = float(np.sum((target[lo:hi] - start[lo:hi]) ** 2))
        num = float(np.sum((student[lo:hi] - target[lo:hi]) ** 2))
        out.append(num / den if den > 0 else 0.0)
    return out


def _momentum_step(x, v, g, lr, momentum):
    v = momentum * v + g
    return x - lr * v, v


def distill_tm(synthetic: SyntheticDataset, buf: TrajectoryBuffer, spec: NetworkSpec,
               cfg: TMConfig, mask_spec: MaskSpec = MaskSpec(), seed: int = 0,
               log: Callable[[dict], None] | None = None):
    """Optimise images and soft labels so students track expert segments.

    Returns ``(distilled, metrics)`` where ``metrics`` holds one record per
    iteration (also passed to ``log`` as it is produced).
    """
    buf.check()
    if buf.spec_hash != spec.hash:
        raise ValueError(f"buffer spec {buf.spec_hash[:12]} does not match network "
                         f"{spec.arch} ({spec.hash[:12]})")
    problems = cfg.problems() + cfg.match.problems(buf.epochs)
    if problems:
        raise ValueError("; ".join(problems))
    syn = synthetic.copy()
    L = spec.n_params
    rng = np.random.default_rng(seed)
    student_lr = syn.student_lr if syn.student_lr is not None else cfg.student_lr
    v_img = np.zeros_like(syn.images)
    v_lab = np.zeros_like(syn.soft_labels)
    v_lr = 0.0

    ranked = mask_spec.mode == "loss_ranked"
    fixed_mask = None if ranked else mask_indices(L, mask_spec)
    residual_sum = np.zeros(L)
    ranked_mask = None
    metrics = []

    for it in range(cfg.iterations):
        if ranked:
            if it < cfg.loss_rank_warmup:
                mask = None
            else:
                if ranked_mask is None:
                    avg = residual_sum / max(1, min(it, cfg.loss_rank_warmup))
                    ranked_mask = mask_indices(L, mask_spec, avg)
                mask = ranked_mask
        else:
            mask = fixed_mask
        start, target, t = sample_segment(buf, cfg.match, it, rng)
        X = Tensor(syn.images, requires_grad=True)
        Y = Tensor(syn.soft_labels, requires_grad=cfg.learn_labels)
        lr_t = Tensor(student_lr, requires_grad=cfg.learnable_student_lr)
        loss, student = tm_loss(spec, X, Y, start, target, cfg, mask, rng, lr_t,
                                return_student=True)
        g_img, g_lab, g_lr = ad.grad(loss, [X, Y, lr_t])

        s = student.data
        if ranked and it < cfg.loss_rank_warmup:
            residual_sum += (s - target) ** 2
        syn.images, v_img = _momentum_step(syn.images, v_img, g_img.data, cfg.pixel_lr,
                                           cfg.momentum)
        if cfg.learn_labels:
            labels, v_lab = _momentum_step(syn.soft_labels, v_lab, g_lab.data, cfg.label_lr,
                                           cfg.momentum)
            syn.soft_labels = project_soft_labels(labels)
        if cfg.learnable_student_lr:
            new_lr, v_lr = _momentum_step(student_lr, v_lr, g_lr.item(), cfg.student_lr_lr, 0.5)
            student_lr = max(float(new_lr), 1e-8)

        record = {"iter": it, "loss": loss.item(),
                  "layer_losses": per_layer_losses(spec, s, start, target),
                  "t": t, "max_start": current_max_start(cfg.match, it),
                  "student_lr": float(student_lr)}
        metrics.append(record)
        if log is not None:
            log(record)
    syn.student_lr = float(student_lr)
    return syn, metrics


# --------------------------------------------------------- gradient matching

def _class_gradient(spec, theta, images, targets, create_graph):
    loss = ad.softmax_cross_entropy(forward(spec, theta, images), targets)
    return ad.grad(loss, [theta], create_graph=create_graph)[0]


def gm_loss(spec: NetworkSpec, params, syn_images, syn_labels, syn_classes,
            real_batches, mask: np.ndarray | None = None, distance: str = "cosine") -> Tensor:
    """Sum over classes and layers of the distance between real and synthetic gradients.

    ``real_batches[c]`` holds real images of class ``c``; ``syn_classes``
    gives the class of every synthetic row.  The per-layer distance is
    ``1 - cos`` on the masked slice (``distance="l2"``: squared L2).  A slice
    whose real or synthetic gradient is exactly zero contributes nothing.
    """
    if distance not in ("cosine", "l2"):
        raise ValueError(f"unknown gradient distance {distance!r}")
    values = params.values if hasattr(params, "values") else np.asarray(params)
    syn_images, syn_labels = ad.as_tensor(syn_images), ad.as_tensor(syn_labels)
    syn_classes = np.asarray(syn_classes)
    C = syn_labels.shape[1]
    keys = _layer_keys(spec, mask)
    total = Tensor(0.0)
    for c in range(C):
        idx = np.flatnonzero(syn_classes == c)
        real = np.asarray(real_batches[c])
        if len(idx) == 0:
            continue
        if len(real) == 0:
            raise ValueError(f"real batch for class {c} is empty")
        onehot = np.zeros((len(real), C))
        onehot[:, c] = 1.0
        g_real = _class_gradient(spec, Tensor(values, requires_grad=True), real, onehot, False)
        theta = Tensor(values, requires_grad=True)
        g_syn = _class_gradient(spec, theta, syn_images[idx], syn_labels[idx], True)
        for key in keys:
            if key is None:
                continue
            b = g_real.data[key]
            a = g_syn[key]
            if distance == "l2":
                total = ad.add(total, ad.sum_(ad.square(ad.sub(a, Tensor(b)))))
                continue
            nb = float(np.sqrt(np.dot(b, b)))
            if nb == 0.0 or not np.any(a.data):
                continue
            dot = ad.sum_(ad.mul(a, Tensor(b)))
            na = ad.sqrt(ad.sum_(ad.square(a)))
            total = ad.add(total, ad.sub(1.0, ad.div(dot, ad.mul(na, nb))))
    return total


# ----------------------------------------------------- distribution matching

def dm_layers_from_ratio(spec: NetworkSpec, ratio: float) -> list[int]:
    """Layers not entirely inside the masked shallow prefix."""
    k = floor_count(ratio, spec.n_params)
    kept = [i for i, (lo, hi) in layer_depth_map(spec) if hi > k]
    return kept or [len(spec.layers) - 1]


def dm_loss(spec: NetworkSpec, params, syn_images, syn_classes, real_batches,
            layer_mask) -> Tensor:
    """Sum over classes and selected layers of squared mean-embedding distances."""
    layer_mask = sorted(set(layer_mask))
    if not layer_mask:
        raise ValueError("dm_loss needs at least one layer")
    if layer_mask[0] < 0 or layer_mask[-1] >= len(spec.layers):
        raise ValueError(f"layer indices {layer_mask} outside [0, {len(spec.layers)})")
    values = params.values if hasattr(params, "values") else np.asarray(params)
    syn_images = ad.as_tensor(syn_images)
    syn_classes = np.asarray(syn_classes)
    total = Tensor(0.0)
    for c in sorted(set(syn_classes.tolist())):
        idx = np.flatnonzero(syn_classes == c)
        real = np.asarray(real_batches[c])
        real_feats = forward_features(spec, values, real)
        syn_feats = forward_features(spec, values, syn_images[idx])
        for layer in layer_mask:
            r = real_feats[layer].data.reshape(len(real), -1).mean(axis=0)
            s = ad.mean(ad.reshape(syn_feats[layer], (len(idx), -1)), axis=0)
            total = ad.add(total, ad.sum_(ad.square(ad.sub(s, Tensor(r)))))
    return total


# ------------------------------------------------------ DC / DM outer loops

@dataclass(frozen=True)
class SurrogateConfig:
    """Settings shared by the gradient- and distribution-matching loops."""

    iterations: int = 200
    pixel_lr: float = 1.0
    momentum: float = 0.5
    batch_real: int = 64
    reinit: bool = True  # fresh random network every iteration
    inner_loops: int = 1  # gradient matching: synthetic updates per network
    net_steps: int = 1  # gradient matching: network SGD steps on the synthetic set
    net_lr: float = 0.01
    distance: str = "cosine"


def _real_batches(ds: LabeledDataset, batch: int, rng) -> list[np.ndarray]:
    out = []
    for c in range(ds.num_classes):
        idx = ds.class_indices(c)
        take = idx if len(idx) <= batch else rng.choice(idx, batch, replace=False)
        out.append(ds.images[np.sort(take)])
    return out


def distill_dc(synthetic: SyntheticDataset, real: LabeledDataset, spec: NetworkSpec,
               cfg: SurrogateConfig, mask_spec: MaskSpec = MaskSpec(), seed: int = 0,
               params=None, log=None):
    """Gradient matching; ``params`` fixes the network when ``cfg.reinit`` is off."""
    syn = synthetic.copy()
    rng = np.random.default_rng(seed)
    mask = mask_indices(spec.n_params, mask_spec)
    classes = syn.class_of
    velocity = np.zeros_like(syn.images)
    theta = init_params(spec, seed).values if params is None else np.array(
        getattr(params, "values", params))
    metrics = []
    for it in range(cfg.iterations):
        if cfg.reinit:
            theta = init_params(spec, int(rng.integers(2 ** 31))).values
        for _ in range(cfg.inner_loops):
            batches = _real_batches(real, cfg.batch_real, rng)
            X = Tensor(syn.images, requires_grad=True)
            loss = gm_loss(spec, theta, X, syn.soft_labels, classes, batches, mask,
                           cfg.distance)
            (g,) = ad.grad(loss, [X])
            syn.images, velocity = _momentum_step(syn.images, velocity, g.data,
                                                  cfg.pixel_lr, cfg.momentum)
            if cfg.reinit and cfg.net_steps:
                theta = sgd_train(spec, theta, syn.images, syn.soft_labels, cfg.net_steps,
                                  cfg.net_lr, len(syn), rng)
        record = {"iter": it, "loss": loss.item()}
        metrics.append(record)
        if log is not None:
            log(record)
    return syn, metrics


def distill_dm(synthetic: SyntheticDataset, real: LabeledDataset, spec: NetworkSpec,
               cfg: SurrogateConfig, layer_mask=None, seed: int = 0, params=None, log=None):
    """Distribution matching over the selected layers' embeddings."""
    syn = synthetic.copy()
    rng = np.random.default_rng(seed)
    layers = list(range(len(spec.layers))) if layer_mask is None else list(layer_mask)
    classes = syn.class_of
    velocity = np.zeros_like(syn.images)
    theta = init_params(spec, seed).values if params is None else np.array(
        getattr(params, "values", params))
    metrics = []
    for it in range(cfg.iterations):
        if cfg.reinit:
            theta = init_params(spec, int(rng.integers(2 ** 31))).values
        batches = _real_batches(real, cfg.batch_real, rng)
        X = Tensor(syn.images, requires_grad=True)
        loss = dm_loss(spec, theta, X, classes, batches, layers)
        (g,) = ad.grad(loss, [X])
        syn.images, velocity = _momentum_step(syn.images, velocity, g.data, cfg.pixel_lr,
                                              cfg.momentum)
        record = {"iter": it, "loss": loss.item()}
        metrics.append(record)
        if log is not None:
            log(record)
    return syn, metrics


def fiex_prune_for_dc_dm(ds: LabeledDataset, scores: DifficultyScores | np.ndarray,
                         ipc_regime: str, ratio: float) -> tuple[LabeledDataset, np.ndarray]:
    """Drop the hardest (``small`` regime) or easiest (``large``) ``floor(ratio * n)`` samples.

    Returns the pruned dataset and the kept indices in original order.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"prune ratio {ratio} outside [0, 1)")
    if ipc_regime not in ("small", "large"):
        raise ValueError(f"ipc_regime must be 'small' or 'large', got {ipc_regime!r}")
    ranking = np.asarray(getattr(scores, "ranking", None)
                         if hasattr(scores, "ranking") else np.argsort(scores, kind="stable"))
    n = len(ds)
    if len(ranking) != n:
        raise ValueError(f"{len(ranking)} scores for {n} samples")
    k = floor_count(ratio, n)
    dropped = ranking[n - k:] if ipc_regime == "small" else ranking[:k]
    keep = np.setdiff1d(np.arange(n), dropped)
    counts = np.bincount(ds.labels[keep], minlength=ds.num_classes)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"pruning {k} of {n} samples would empty classes {empty}")
    return ds.subset(keep), keep
