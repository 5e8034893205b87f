"""Agent networks over a single flat parameter vector.

All parameters of a network live in one 1-d array ordered shallow to deep.
Within a layer the weight comes first (row-major), then the bias.  Dense
weights have shape ``(in, out)``; conv weights ``(out, in, 3, 3)``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tensorio import FormatError, tensor_from_bytes, tensor_to_bytes


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "conv"
    in_size: int
    out_size: int
    activation: str = "relu"
    stride: int = 1
    pool: int = 0

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.out_size, self.in_size, 3, 3)
        return (self.in_size, self.out_size)

    @property
    def fan_in(self) -> int:
        return self.in_size * 9 if self.kind == "conv" else self.in_size

    @property
    def n_weights(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def n_params(self) -> int:
        return self.n_weights + self.out_size


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    layers: tuple
    input_shape: tuple
    num_classes: int

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [vars(layer).copy() for layer in self.layers],
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        return cls(d["arch"], tuple(LayerSpec(**l) for l in d["layers"]),
                   tuple(d["input_shape"]), d["num_classes"])

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


ARCHITECTURES = ("tiny-mlp", "mlp-small", "mlp-wide", "convnet-2", "convnet-3")

_MLP_HIDDEN = {"tiny-mlp": (32,), "mlp-small": (64,), "mlp-wide": (128,)}


def mlp_spec(input_shape, num_classes: int, hidden=(32,), arch: str = "mlp") -> NetworkSpec:
    dims = [int(np.prod(input_shape)), *hidden, num_classes]
    layers = tuple(
        LayerSpec("dense", dims[i], dims[i + 1],
                  "relu" if i < len(dims) - 2 else "none")
        for i in range(len(dims) - 1))
    return NetworkSpec(arch, layers, tuple(input_shape), num_classes)


def convnet_spec(input_shape, num_classes: int, depth: int = 3, width: int = 16,
                 arch: str | None = None) -> NetworkSpec:
    c, h, w = input_shape
    if h % 2 ** depth or w % 2 ** depth:
        raise ValueError(f"convnet-{depth} needs spatial extents divisible by "
                         f"{2 ** depth}, got {(h, w)}")
    layers = []
    ch = c
    for _ in range(depth):
        layers.append(LayerSpec("conv", ch, width, "relu", 1, 2))
        ch = width
    flat = width * (h // 2 ** depth) * (w // 2 ** depth)
    layers.append(LayerSpec("dense", flat, num_classes, "none"))
    return NetworkSpec(arch or f"convnet-{depth}", tuple(layers), tuple(input_shape), num_classes)


def make_spec(arch: str, input_shape, num_classes: int) -> NetworkSpec:
    """Spec for one of the named desk-scale architectures."""
    input_shape = tuple(int(s) for s in input_shape)
    if arch in _MLP_HIDDEN:
        return mlp_spec(input_shape, num_classes, _MLP_HIDDEN[arch], arch)
    if arch.startswith("convnet-"):
        return convnet_spec(input_shape, num_classes, int(arch.split("-")[1]))
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def layer_depth_map(spec: NetworkSpec) -> list[tuple[int, tuple[int, int]]]:
    """``(layer index, (lo, hi))`` ranges of each layer in the flat vector."""
    out, lo = [], 0
    for i, layer in enumerate(spec.layers):
        out.append((i, (lo, lo + layer.n_params)))
        lo += layer.n_params
    return out


@dataclass(frozen=True)
class FlatParams:
    values: np.ndarray
    offsets: tuple
    spec_hash: str

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        return (isinstance(other, FlatParams) and self.spec_hash == other.spec_hash
                and self.offsets == other.offsets
                and np.array_equal(self.values, other.values))

    def to_bytes(self) -> bytes:
        head = self.spec_hash.encode("ascii")
        head += struct.pack("<I", len(self.offsets))
        for lo, hi in self.offsets:
            head += struct.pack("<QQ", lo, hi)
        return head + tensor_to_bytes(self.values)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FlatParams":
        if len(data) < 68:
            raise FormatError(f"truncated parameter record: {len(data)} bytes")
        spec_hash = data[:64].decode("ascii")
        (n,) = struct.unpack_from("<I", data, 64)
        pos = 68
        offsets = []
        for _ in range(n):
            offsets.append(struct.unpack_from("<QQ", data, pos))
            pos += 16
        return cls(tensor_from_bytes(data[pos:]), tuple(offsets), spec_hash)


def flatten(spec: NetworkSpec, layers: list[tuple[np.ndarray, np.ndarray]]) -> FlatParams:
    parts = []
    for layer, (w, b) in zip(spec.layers, layers):
        if w.shape != layer.weight_shape or b.shape != (layer.out_size,):
            raise ValueError(f"layer arrays {w.shape}, {b.shape} do not match {layer}")
        parts += [np.ravel(w), np.ravel(b)]
    offsets = tuple(r for _, r in layer_depth_map(spec))
    return FlatParams(np.concatenate(parts).astype(np.float64), offsets, spec.hash)


def unflatten(spec: NetworkSpec, params) -> list[tuple[np.ndarray, np.ndarray]]:
    values = params.values if isinstance(params, FlatParams) else np.asarray(params)
    out = []
    for layer, (_, (lo, hi)) in zip(spec.layers, layer_depth_map(spec)):
        mid = lo + layer.n_weights
        out.append((values[lo:mid].reshape(layer.weight_shape), values[mid:hi].copy()))
    return out


def init_params(spec: NetworkSpec, seed: int) -> FlatParams:
    """Fan-in scaled uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer in spec.layers:
        bound = 1.0 / np.sqrt(layer.fan_in)
        layers.append((rng.uniform(-bound, bound, layer.weight_shape),
                       np.zeros(layer.out_size)))
    return flatten(spec, layers)


def check_params(spec: NetworkSpec, params: FlatParams) -> None:
    if params.spec_hash != spec.hash:
        raise ValueError(f"parameters were recorded for spec {params.spec_hash[:12]}, "
                         f"not {spec.hash[:12]} ({spec.arch})")


def _as_param_tensor(spec: NetworkSpec, params) -> Tensor:
    if isinstance(params, FlatParams):
        check_params(spec, params)
        params = params.values
    params = ad.as_tensor(params)
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
    return params


def forward_features(spec: NetworkSpec, params, batch) -> list[Tensor]:
    """Output of every layer (after activation and pooling); the last is the logits."""
    theta = _as_param_tensor(spec, params)
    x = ad.as_tensor(batch)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match network input "
                         f"{spec.input_shape}")
    n = x.shape[0]
    feats = []
    for layer, (_, (lo, hi)) in zip(spec.layers, layer_depth_map(spec)):
        mid = lo + layer.n_weights
        w = ad.reshape(theta[lo:mid], layer.weight_shape)
        b = theta[mid:hi]
        if layer.kind == "conv":
            x = ad.conv2d(x, w, layer.stride)
            bias = ad.reshape(b, (1, layer.out_size, 1, 1))
            x = ad.add(x, ad.broadcast_to(bias, x.shape))
        else:
            if x.ndim != 2:
                x = ad.reshape(x, (n, -1))
            x = ad.matmul(x, w)
            x = ad.add(x, ad.broadcast_to(ad.reshape(b, (1, -1)), x.shape))
        if layer.activation == "relu":
            x = ad.relu(x)
        if layer.pool:
            x = ad.avgpool2d(x, layer.pool)
        feats.append(x)
    return feats


def forward(spec: NetworkSpec, params, batch) -> Tensor:
    """Logits of shape ``[b, C]``; differentiable in both params and batch."""
    return forward_features(spec, params, batch)[-1]


def predict_proba(spec: NetworkSpec, params, images: np.ndarray) -> np.ndarray:
    logits = forward(spec, params, images).data
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def accuracy(spec: NetworkSpec, params, images: np.ndarray, labels: np.ndarray) -> float:
    logits = forward(spec, params, images).data
    return float(np.mean(np.argmax(logits, axis=1) == labels))
