"""Difficulty-aware data scheduling for expert training.

Training starts on the easiest fraction of the data, admits harder samples
in ranking order until the addition end epoch, and can later drop the
easiest samples, either at once or gradually.  Every epoch's training set is
a contiguous window ``ranking[lo:hi]`` of the easy-to-hard ranking.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

_EPS = 1e-9


def ceil_count(ratio: float, n: int) -> int:
    return min(n, math.ceil(ratio * n - _EPS))


def floor_count(ratio: float, n: int) -> int:
    return max(0, math.floor(ratio * n + _EPS))


@dataclass(frozen=True)
class SchedulerConfig:
    initial_ratio: float = 1.0
    addition_end_epoch: int = 0
    removal_ratio: float = 0.0
    removal_epoch: int | None = None  # None: defaults to addition_end_epoch
    removal_mode: str = "direct"  # "direct" or "gradual"
    total_epochs: int = 1
    addition: str = "linear"  # "linear" or "step"
    step_epochs: int = 1

    @property
    def removal_active(self) -> bool:
        return self.removal_ratio > 0

    @property
    def effective_removal_epoch(self) -> int | None:
        if not self.removal_active:
            return None
        return self.addition_end_epoch if self.removal_epoch is None else self.removal_epoch

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.initial_ratio <= 1:
            out.append(f"initial_ratio={self.initial_ratio} must lie in (0, 1]")
        if self.total_epochs < 1:
            out.append(f"total_epochs={self.total_epochs} must be >= 1")
        if not 0 <= self.addition_end_epoch <= self.total_epochs:
            out.append(f"addition_end_epoch={self.addition_end_epoch} must lie in "
                       f"[0, total_epochs={self.total_epochs}]")
        if self.addition_end_epoch == 0 and self.initial_ratio < 1:
            out.append("addition_end_epoch=0 leaves no epochs for adding samples; "
                       "use initial_ratio=1 or a positive addition_end_epoch")
        if not 0 <= self.removal_ratio < 1:
            out.append(f"removal_ratio={self.removal_ratio} must lie in [0, 1)")
        rm = self.effective_removal_epoch
        if rm is not None and rm < self.addition_end_epoch:
            out.append(f"removal_epoch={rm} precedes addition_end_epoch="
                       f"{self.addition_end_epoch}")
        if self.removal_mode not in ("direct", "gradual"):
            out.append(f"removal_mode={self.removal_mode!r} must be 'direct' or 'gradual'")
        if self.addition not in ("linear", "step"):
            out.append(f"addition={self.addition!r} must be 'linear' or 'step'")
        if self.step_epochs < 1:
            out.append(f"step_epochs={self.step_epochs} must be >= 1")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class SchedulerPlan:
    ranking: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    config: SchedulerConfig

    @property
    def n(self) -> int:
        return len(self.ranking)

    @property
    def epochs(self) -> int:
        return len(self.lo)

    def set_size(self, epoch: int) -> int:
        return int(self.hi[epoch] - self.lo[epoch])

    @property
    def hash(self) -> str:
        h = hashlib.sha256(repr(sorted(asdict(self.config).items())).encode())
        h.update(np.ascontiguousarray(self.ranking, dtype="<i8").tobytes())
        return h.hexdigest()

    def table(self) -> str:
        rows = ["epoch,set_size,prefix_lo,prefix_hi"]
        for e in range(self.epochs):
            rows.append(f"{e},{self.set_size(e)},{self.lo[e]},{self.hi[e]}")
        return "\n".join(rows) + "\n"


def _added(e: int, aee: int, n0: int, n: int) -> int:
    # linear interpolation of the set size, rounded half up
    return n0 + (2 * e * (n - n0) + aee) // (2 * aee)


def build_plan(ranking, cfg: SchedulerConfig) -> SchedulerPlan:
    """Per-epoch ranking windows.  ``ranking`` may be a DifficultyScores."""
    cfg.validate()
    ranking = np.asarray(getattr(ranking, "ranking", ranking), dtype=np.int64)
    n = len(ranking)
    if n < 1:
        raise ValueError("cannot schedule an empty dataset")
    E, aee = cfg.total_epochs, cfg.addition_end_epoch
    n0 = ceil_count(cfg.initial_ratio, n)
    k = floor_count(cfg.removal_ratio, n)
    rm = cfg.effective_removal_epoch
    lo = np.zeros(E, dtype=np.int64)
    hi = np.full(E, n, dtype=np.int64)
    for e in range(E):
        if e < aee:
            at = e if cfg.addition == "linear" else (e // cfg.step_epochs) * cfg.step_epochs
            hi[e] = _added(at, aee, n0, n)
        if rm is not None and e >= rm:
            if cfg.removal_mode == "direct":
                lo[e] = k
            else:
                lo[e] = (2 * (e - rm) * k + (E - rm)) // (2 * (E - rm))
    return SchedulerPlan(ranking, lo, hi, cfg)


def training_set(plan: SchedulerPlan, epoch: int) -> np.ndarray:
    if not 0 <= epoch < plan.epochs:
        raise IndexError(f"epoch {epoch} outside [0, {plan.epochs})")
    return plan.ranking[plan.lo[epoch]:plan.hi[epoch]]


def full_plan(n: int, epochs: int) -> SchedulerPlan:
    """The no-op schedule: every epoch sees every sample."""
    return build_plan(np.arange(n), SchedulerConfig(total_epochs=epochs))
