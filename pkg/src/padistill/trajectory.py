"""Expert trajectories: training, the binary buffer file, segment sampling.

Buffer file layout (little-endian)::

    b"PADTRAJ\\0" | u32 version | 64-byte spec hash | u32 epochs E |
    u32 expert count | u64 parameter count L
    per expert:  u64 seed | f64 lr | 64-byte plan hash |
                 tensor(train acc, E) | tensor(train loss, E) |
                 E + 1 snapshot tensors (epoch 0 = initialisation)
"""
from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .nets import FlatParams, NetworkSpec, forward, init_params, layer_depth_map
from .scheduler import SchedulerPlan, full_plan, training_set
from .tensorio import FormatError, read_tensor, write_tensor
from .training import sgd_train
from . import autodiff as ad

MAGIC = b"PADTRAJ\0"
VERSION = 1
_HEADER = struct.Struct("<8sI64sIIQ")
_EXPERT = struct.Struct("<Qd64s")


@dataclass
class Trajectory:
    snapshots: np.ndarray  # [E + 1, L]
    spec_hash: str
    plan_hash: str
    lr: float
    seed: int
    train_acc: np.ndarray
    train_loss: np.ndarray

    @property
    def epochs(self) -> int:
        return len(self.snapshots) - 1

    def params(self, epoch: int, spec: NetworkSpec | None = None) -> FlatParams:
        offsets = tuple(r for _, r in layer_depth_map(spec)) if spec else ()
        return FlatParams(self.snapshots[epoch], offsets, self.spec_hash)


@dataclass
class TrajectoryBuffer:
    trajectories: list
    version: int = VERSION

    def __len__(self):
        return len(self.trajectories)

    @property
    def epochs(self) -> int:
        return self.trajectories[0].epochs

    @property
    def spec_hash(self) -> str:
        return self.trajectories[0].spec_hash

    def check(self) -> None:
        if not self.trajectories:
            raise ValueError("empty trajectory buffer")
        for t in self.trajectories:
            if t.spec_hash != self.spec_hash or t.epochs != self.epochs:
                raise ValueError("all trajectories in a buffer must share spec and epoch count")


@dataclass(frozen=True)
class MatchRange:
    min_start: int = 0  # T-
    start: int = 0  # T, initial upper bound
    max_start: int = 0  # T+, final upper bound
    interval: int = 0  # iterations per upper-bound increment; 0 keeps it fixed at T
    expert_epochs: int = 2  # M

    def problems(self, epochs: int | None = None) -> list[str]:
        out = []
        if not 0 <= self.min_start <= self.start <= self.max_start:
            out.append(f"need 0 <= min_start ({self.min_start}) <= start ({self.start}) "
                       f"<= max_start ({self.max_start})")
        if self.expert_epochs < 1:
            out.append(f"expert_epochs={self.expert_epochs} must be >= 1")
        if self.interval < 0:
            out.append(f"interval={self.interval} must be >= 0")
        if epochs is not None and self.max_start + self.expert_epochs > epochs:
            out.append(f"max_start + expert_epochs = {self.max_start} + {self.expert_epochs} "
                       f"exceeds buffer epochs {epochs}")
        return out


def current_max_start(rng_: MatchRange, iteration: int) -> int:
    if rng_.interval <= 0:
        return rng_.start
    return min(rng_.max_start, rng_.start + iteration // rng_.interval)


def sample_segment(buf: TrajectoryBuffer, match: MatchRange, iteration: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Start and target snapshots ``M`` epochs apart, plus the start epoch."""
    if len(buf) == 0:
        raise ValueError("empty trajectory buffer")
    problems = match.problems(buf.epochs)
    if problems:
        raise ValueError("; ".join(problems))
    traj = buf.trajectories[int(rng.integers(len(buf)))]
    hi = current_max_start(match, iteration)
    t = int(rng.integers(match.min_start, hi + 1))
    return traj.snapshots[t], traj.snapshots[t + match.expert_epochs], t


# --------------------------------------------------------------- training

def train_expert(ds: LabeledDataset, plan: SchedulerPlan | None, spec: NetworkSpec,
                 epochs: int, lr: float, batch_size: int, seed: int,
                 momentum: float = 0.9) -> Trajectory:
    """SGD-momentum expert; epoch ``e`` draws minibatches from the plan's set."""
    if plan is None:
        plan = full_plan(len(ds), epochs)
    if plan.epochs != epochs or plan.n != len(ds):
        raise ValueError(f"plan covers {plan.epochs} epochs over {plan.n} samples, "
                         f"expected {epochs} over {len(ds)}")
    theta0 = init_params(spec, seed).values
    snaps = [theta0.copy()]
    accs, losses = [], []
    targets = ds.one_hot()

    def record(epoch, theta):
        snaps.append(theta.copy())
        logits = forward(spec, theta, ds.images)
        accs.append(float(np.mean(np.argmax(logits.data, axis=1) == ds.labels)))
        losses.append(ad.softmax_cross_entropy(logits, targets).item())

    rng = np.random.default_rng(seed)
    sgd_train(spec, theta0, ds.images, targets, epochs, lr, batch_size, rng,
              momentum=momentum, epoch_indices=lambda e: training_set(plan, e),
              on_epoch=record)
    return Trajectory(np.stack(snaps), spec.hash, plan.hash, float(lr), int(seed),
                      np.array(accs), np.array(losses))


def _train_one(args):
    return train_expert(*args)


def train_buffer(ds: LabeledDataset, plan: SchedulerPlan | None, spec: NetworkSpec,
                 n_experts: int, epochs: int, lr: float, batch_size: int,
                 seed_base: int = 0, workers: int = 1) -> TrajectoryBuffer:
    """``n_experts`` experts seeded ``seed_base + i``, merged in seed order."""
    jobs = [(ds, plan, spec, epochs, lr, batch_size, seed_base + i) for i in range(n_experts)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            trajs = list(pool.map(_train_one, jobs))
    else:
        trajs = [_train_one(job) for job in jobs]
    return TrajectoryBuffer(trajs)


# ------------------------------------------------------------ persistence

def _hash_bytes(h: str) -> bytes:
    raw = h.encode("ascii")
    if len(raw) != 64:
        raise ValueError(f"hash must be 64 hex characters, got {len(raw)}")
    return raw


def save_buffer(buf: TrajectoryBuffer, path) -> None:
    buf.check()
    L = buf.trajectories[0].snapshots.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, buf.version, _hash_bytes(buf.spec_hash), buf.epochs,
                              len(buf), L))
        for t in buf.trajectories:
            fh.write(_EXPERT.pack(t.seed, t.lr, _hash_bytes(t.plan_hash)))
            write_tensor(fh, t.train_acc)
            write_tensor(fh, t.train_loss)
            for snap in t.snapshots:
                write_tensor(fh, snap)


def load_buffer(path, spec_hash: str | None = None) -> TrajectoryBuffer:
    """Read a buffer file; ``spec_hash`` (if given) must match the recorded one."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FormatError(f"{path}: truncated header, expected {_HEADER.size} bytes, "
                              f"got {len(head)}")
        magic, version, h, epochs, count, L = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a trajectory buffer (magic {magic!r})")
        if version != VERSION:
            raise FormatError(f"{path}: buffer format version {version}, "
                              f"this reader supports {VERSION}")
        h = h.decode("ascii")
        if spec_hash is not None and h != spec_hash:
            raise FormatError(f"{path}: buffer was recorded for network spec {h[:12]}, "
                              f"expected {spec_hash[:12]}")
        trajs = []
        for _ in range(count):
            meta = fh.read(_EXPERT.size)
            if len(meta) != _EXPERT.size:
                raise FormatError(f"{path}: truncated expert record")
            seed, lr, plan_hash = _EXPERT.unpack(meta)
            acc, loss = read_tensor(fh), read_tensor(fh)
            snaps = np.stack([read_tensor(fh) for _ in range(epochs + 1)])
            if snaps.shape != (epochs + 1, L):
                raise FormatError(f"{path}: snapshot shape {snaps.shape}, "
                                  f"expected {(epochs + 1, L)}")
            trajs.append(Trajectory(snaps, h, plan_hash.decode("ascii"), lr, seed, acc, loss))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} experts")
    return TrajectoryBuffer(trajs, version)
