"""Per-sample difficulty scores; higher means harder."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .nets import FlatParams, NetworkSpec, check_params, init_params, predict_proba
from .training import sgd_train


@dataclass(frozen=True)
class DifficultyScores:
    scores: np.ndarray
    scorer: str
    epoch: int = 0
    seeds: tuple = ()
    dataset_hash: str = ""

    @property
    def ranking(self) -> np.ndarray:
        """Indices from easiest to hardest; ties go to the smaller index."""
        return np.argsort(self.scores, kind="stable")

    def __len__(self):
        return len(self.scores)


def rank(scores: np.ndarray) -> np.ndarray:
    return np.argsort(np.asarray(scores), kind="stable")


def el2n_from_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    onehot = np.eye(probs.shape[1])[labels]
    return np.linalg.norm(probs - onehot, axis=1)


def _el2n_one(args) -> np.ndarray:
    ds, spec, epochs, seed, lr, batch_size = args
    theta = init_params(spec, seed).values
    rng = np.random.default_rng(seed)
    theta = sgd_train(spec, theta, ds.images, ds.one_hot(), epochs, lr, batch_size, rng)
    return el2n_from_probs(predict_proba(spec, theta, ds.images), ds.labels)


def el2n(ds: LabeledDataset, spec: NetworkSpec, t: int, S: int = 5, base_seed: int = 0,
         lr: float = 0.05, batch_size: int = 128, workers: int = 1) -> DifficultyScores:
    """Error L2-norm after ``t`` epochs, averaged over ``S`` seeded models.

    Model ``s`` is initialised and shuffled with seed ``base_seed + s``; the
    average runs in seed order so results do not depend on ``workers``.
    """
    if t < 1 or S < 1:
        raise ValueError(f"el2n needs t >= 1 and S >= 1, got t={t}, S={S}")
    seeds = tuple(base_seed + s for s in range(S))
    jobs = [(ds, spec, t, seed, lr, batch_size) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_model = list(pool.map(_el2n_one, jobs))
    else:
        per_model = [_el2n_one(job) for job in jobs]
    total = np.zeros(len(ds))
    for s in per_model:
        total += s
    return DifficultyScores(total / S, "el2n", t, seeds, ds.hash)


def loss_score(ds: LabeledDataset, pretrained: FlatParams, spec: NetworkSpec) -> DifficultyScores:
    """Cross-entropy of each sample under a fixed model."""
    check_params(spec, pretrained)
    p = predict_proba(spec, pretrained, ds.images)
    picked = p[np.arange(len(ds)), ds.labels]
    return DifficultyScores(-np.log(np.maximum(picked, np.finfo(float).tiny)), "loss",
                            dataset_hash=ds.hash)


def uncertainty_score(ds: LabeledDataset, pretrained: FlatParams,
                      spec: NetworkSpec) -> DifficultyScores:
    """Least confidence, ``1 - max_c p(c | x)``."""
    check_params(spec, pretrained)
    p = predict_proba(spec, pretrained, ds.images)
    return DifficultyScores(1.0 - p.max(axis=1), "uncertainty", dataset_hash=ds.hash)


def save_scores(scores: DifficultyScores, path) -> None:
    seeds = ";".join(str(s) for s in scores.seeds)
    with open(path, "w") as fh:
        fh.write(f"# scorer={scores.scorer} t={scores.epoch} S={len(scores.seeds)} "
                 f"seeds={seeds or '-'} dataset={scores.dataset_hash or '-'}\n")
        fh.write("index,score\n")
        for i, s in enumerate(scores.scores):
            fh.write(f"{i},{float(s)!r}\n")


def load_scores(path) -> DifficultyScores:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# "):
            raise ValueError(f"{path}: missing score header line")
        meta = dict(item.split("=", 1) for item in header[2:].split(" ") if "=" in item)
        if fh.readline().strip() != "index,score":
            raise ValueError(f"{path}: expected 'index,score' column line")
        rows = [line.split(",") for line in fh if line.strip()]
    index = np.array([int(r[0]) for r in rows])
    if not np.array_equal(index, np.arange(len(rows))):
        raise ValueError(f"{path}: indices are not 0..n-1 in order")
    seeds = meta.get("seeds", "-").strip()
    return DifficultyScores(np.array([float(r[1]) for r in rows]), meta["scorer"],
                            int(meta.get("t", 0)),
                            tuple(int(s) for s in seeds.split(";")) if seeds != "-" else (),
                            "" if meta.get("dataset", "-").strip() == "-"
                            else meta["dataset"].strip())
