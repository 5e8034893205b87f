"""Train fresh networks on a distilled (or coreset) set and measure test accuracy."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .data import LabeledDataset, SyntheticDataset, sample_per_class
from .nets import NetworkSpec, accuracy, init_params
from .training import sgd_train


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 200
    lr: float = 0.01
    batch_size: int = 256
    momentum: float = 0.9

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class EvalReport:
    arch: str
    seeds: tuple
    accuracies: tuple
    mean: float
    std: float
    config_hash: str
    label: str = ""

    @classmethod
    def from_accuracies(cls, arch, seeds, accs, config_hash, label=""):
        accs = np.asarray(accs, dtype=np.float64)
        return cls(arch, tuple(int(s) for s in seeds), tuple(float(a) for a in accs),
                   float(accs.mean()), float(accs.std()), config_hash, label)

    def to_record(self) -> dict:
        d = asdict(self)
        d["type"] = "eval"
        d["seeds"], d["accuracies"] = list(self.seeds), list(self.accuracies)
        return d

    def summary(self) -> str:
        return f"{self.arch}: {100 * self.mean:.2f} ± {100 * self.std:.2f} ({len(self.seeds)} seeds)"


def _eval_one(args) -> float:
    dsyn, test, spec, cfg, seed = args
    theta = init_params(spec, seed).values
    rng = np.random.default_rng(seed)
    theta = sgd_train(spec, theta, dsyn.images, dsyn.soft_labels, cfg.epochs, cfg.lr,
                      cfg.batch_size, rng, momentum=cfg.momentum)
    return accuracy(spec, theta, test.images, test.labels)


def evaluate(dsyn: SyntheticDataset, test: LabeledDataset, spec: NetworkSpec,
             cfg: EvalConfig = EvalConfig(), seeds=(0, 1, 2, 3, 4), workers: int = 1,
             label: str = "") -> EvalReport:
    """Accuracy on ``test`` of one network per seed trained on ``dsyn``."""
    if tuple(dsyn.images.shape[1:]) != spec.input_shape:
        raise ValueError(f"{spec.arch} expects inputs {spec.input_shape}, data has "
                         f"{tuple(dsyn.images.shape[1:])}")
    jobs = [(dsyn, test, spec, cfg, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            accs = list(pool.map(_eval_one, jobs))
    else:
        accs = [_eval_one(j) for j in jobs]
    return EvalReport.from_accuracies(spec.arch, seeds, accs, cfg.hash, label)


def random_coreset(ds: LabeledDataset, ipc: int, seed: int) -> SyntheticDataset:
    """``ipc`` uniformly chosen real samples per class with one-hot labels."""
    idx = sample_per_class(ds, ipc, np.random.default_rng(seed))
    return SyntheticDataset(ds.images[idx].copy(), ds.one_hot()[idx], ipc, ds.num_classes,
                            source_indices=idx)


def cross_arch_sweep(dsyn: SyntheticDataset, test: LabeledDataset, specs, cfg=EvalConfig(),
                     seeds=(0, 1, 2, 3, 4), workers: int = 1) -> list[EvalReport]:
    return [evaluate(dsyn, test, spec, cfg, seeds, workers) for spec in specs]
