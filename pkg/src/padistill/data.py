"""Real datasets, ZCA whitening and the learnable synthetic set."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensorio import FormatError, load_tensor, save_tensor


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # [n, c, h, w]
    labels: np.ndarray  # int class indices
    num_classes: int
    name: str = "dataset"
    note: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.images)):
            raise ValueError(f"dataset {self.name!r} contains non-finite pixels")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if len(counts) > self.num_classes or np.any(counts == 0):
            raise ValueError(f"dataset {self.name!r}: every class in [0, {self.num_classes}) "
                             f"needs at least one sample, counts={counts.tolist()}")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes,
                              name or self.name, self.note)

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass
class SyntheticDataset:
    """Learnable images and soft labels, stored class by class (``ipc`` each)."""

    images: np.ndarray  # [ipc * C, c, h, w]
    soft_labels: np.ndarray  # [ipc * C, C]
    ipc: int
    num_classes: int
    student_lr: float | None = None
    source_indices: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.images)

    @property
    def class_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_classes), self.ipc)

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.images.copy(), self.soft_labels.copy(), self.ipc,
                                self.num_classes, self.student_lr,
                                None if self.source_indices is None else self.source_indices.copy())

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.soft_labels, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ZCAStats:
    mean: np.ndarray
    matrix: np.ndarray
    inverse: np.ndarray
    eps: float

    def apply(self, images: np.ndarray) -> np.ndarray:
        flat = images.reshape(len(images), -1)
        return ((flat - self.mean) @ self.matrix).reshape(images.shape)

    def unapply(self, images: np.ndarray) -> np.ndarray:
        flat = images.reshape(len(images), -1)
        return (flat @ self.inverse + self.mean).reshape(images.shape)


# ------------------------------------------------------------------ sources

def gen_blobs(num_classes: int, n_per_class: int, shape=(1, 8, 8), spread: float = 1.0,
              seed: int = 0, separation: float = 3.0, split: str = "train") -> LabeledDataset:
    """Gaussian class clusters.

    Class means are drawn once per ``seed`` with per-coordinate scale
    ``separation / sqrt(dim)``, so typical distances between means are about
    ``separation * sqrt(2)`` whatever the dimension.  Samples add isotropic
    noise of std ``spread``.  ``split`` selects an independent sample stream
    around the same means (use "test" for a held-out set).
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    shape = tuple(int(s) for s in shape)
    dim = int(np.prod(shape))
    mean_rng, train_rng, test_rng = (np.random.default_rng(s)
                                     for s in np.random.SeedSequence(seed).spawn(3))
    means = mean_rng.normal(0.0, separation / np.sqrt(dim), (num_classes, dim))
    rng = {"train": train_rng, "test": test_rng}[split]
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.normal(0.0, 1.0, (len(labels), dim))
    images = means[labels] + spread * noise
    return LabeledDataset(images.reshape(len(labels), *shape), labels, num_classes,
                          f"blobs-{split}",
                          f"gen_blobs(C={num_classes}, n={n_per_class}, spread={spread}, "
                          f"separation={separation}, seed={seed})")


_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def write_idx(images_u8: np.ndarray, labels, images_path, labels_path) -> None:
    """Write the classic big-endian IDX pair (u8 images [n, h, w], u8 labels)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES, n, h, w))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS, len(labels)))
        fh.write(labels.tobytes())


def _read_idx(path, magic: int, ndims: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header, expected {head} bytes, got {len(raw)}")
    found, *dims = struct.unpack(f">{1 + ndims}I", raw[:head])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, "
                          f"got {len(raw)}")
    return np.frombuffer(raw[head:], dtype=np.uint8).reshape(dims)


def load_idx_images(images_path, labels_path=None, name: str | None = None) -> LabeledDataset:
    """Load an IDX image file and its label companion; pixels scaled to [0, 1].

    Without ``labels_path`` the companion is found by replacing ``images``
    with ``labels`` and ``idx3`` with ``idx1`` in the file name.
    """
    images_path = str(images_path)
    if labels_path is None:
        labels_path = images_path.replace("images", "labels").replace("idx3", "idx1")
    images = _read_idx(images_path, _IDX_IMAGES, 3)
    labels = _read_idx(labels_path, _IDX_LABELS, 1).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels "
                          f"({images_path}, {labels_path})")
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(pixels, labels, int(labels.max()) + 1,
                          name or os.path.basename(images_path), f"idx:{images_path}")


# --------------------------------------------------------------- whitening

def zca_fit(images: np.ndarray, eps: float = 1e-2) -> ZCAStats:
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = images.reshape(len(images), -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / len(flat)
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance is not finite")
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None) + eps
    matrix = (evecs / np.sqrt(evals)) @ evecs.T
    inverse = (evecs * np.sqrt(evals)) @ evecs.T
    # eigh output is symmetric only up to rounding
    return ZCAStats(mean, (matrix + matrix.T) / 2, (inverse + inverse.T) / 2, eps)


def zca_fit_apply(ds: LabeledDataset, eps: float = 1e-2) -> tuple[LabeledDataset, ZCAStats]:
    stats = zca_fit(ds.images, eps)
    return apply_zca(ds, stats), stats


def apply_zca(ds: LabeledDataset, stats: ZCAStats) -> LabeledDataset:
    return LabeledDataset(stats.apply(ds.images), ds.labels, ds.num_classes, ds.name,
                          (ds.note + " +zca").strip())


# --------------------------------------------------------------- synthetic

def project_soft_labels(sl: np.ndarray) -> np.ndarray:
    """Clip rows at zero and renormalise; rows with no mass become uniform."""
    sl = np.clip(np.asarray(sl, dtype=np.float64), 0.0, None)
    totals = sl.sum(axis=1, keepdims=True)
    uniform = np.full_like(sl, 1.0 / sl.shape[1])
    return np.where(totals > 0, sl / np.where(totals > 0, totals, 1.0), uniform)


def sample_per_class(ds: LabeledDataset, ipc: int, rng: np.random.Generator) -> np.ndarray:
    picks = []
    for c in range(ds.num_classes):
        idx = ds.class_indices(c)
        if len(idx) < ipc:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than ipc={ipc}")
        picks.append(np.sort(rng.choice(idx, ipc, replace=False)))
    return np.concatenate(picks)


def init_synthetic(ds: LabeledDataset, ipc: int, seed: int, label_init: str = "one_hot",
                   expert=None) -> SyntheticDataset:
    """Copy ``ipc`` random real samples per class.

    ``label_init="expert_soft"`` needs ``expert=(spec, params)`` and uses the
    expert's softmax predictions as the initial soft labels.
    """
    rng = np.random.default_rng(seed)
    idx = sample_per_class(ds, ipc, rng)
    images = ds.images[idx].copy()
    if label_init == "one_hot":
        labels = ds.one_hot()[idx]
    elif label_init == "expert_soft":
        if expert is None:
            raise ValueError("expert_soft label init needs an expert (spec, params)")
        from .nets import predict_proba
        spec, params = expert
        labels = project_soft_labels(predict_proba(spec, params, images))
    else:
        raise ValueError(f"unknown label_init {label_init!r}")
    return SyntheticDataset(images, labels, ipc, ds.num_classes, source_indices=idx)


# ------------------------------------------------------------- persistence

def save_dataset(ds: LabeledDataset, directory, seed=None) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {"kind": "labeled", "name": ds.name, "num_classes": ds.num_classes,
                "shape": list(ds.image_shape), "n": len(ds), "seed": seed,
                "note": ds.note, "hash": ds.hash}
    save_tensor(os.path.join(directory, "images.f64"), ds.images)
    save_tensor(os.path.join(directory, "labels.f64"), ds.labels.astype(np.float64))
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_dataset(directory) -> LabeledDataset:
    m = _manifest(directory)
    images = load_tensor(os.path.join(directory, "images.f64"))
    labels = load_tensor(os.path.join(directory, "labels.f64")).astype(np.int64)
    return LabeledDataset(images, labels, m["num_classes"], m["name"], m.get("note", ""))


def save_synthetic(syn: SyntheticDataset, directory, config_text: str = "") -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {"kind": "synthetic", "ipc": syn.ipc, "num_classes": syn.num_classes,
                "shape": list(syn.images.shape[1:]), "student_lr": syn.student_lr,
                "hash": syn.hash}
    save_tensor(os.path.join(directory, "images.f64"), syn.images)
    save_tensor(os.path.join(directory, "soft_labels.f64"), syn.soft_labels)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(directory, "config.ini"), "w") as fh:
        fh.write(config_text)


def load_synthetic(directory) -> SyntheticDataset:
    m = _manifest(directory)
    return SyntheticDataset(load_tensor(os.path.join(directory, "images.f64")),
                            load_tensor(os.path.join(directory, "soft_labels.f64")),
                            m["ipc"], m["num_classes"], m.get("student_lr"))
