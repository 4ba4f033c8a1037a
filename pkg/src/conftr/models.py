"""Linear and ReLU-MLP classifiers producing logits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_sizes: tuple[int, ...] = ()
    activation: str = field(default="relu")

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.kind not in ("linear", "mlp"):
            raise ContractError(f"unknown model kind {self.kind!r}")
        if (self.kind == "linear") != (len(self.hidden_sizes) == 0):
            raise ContractError("a linear model has no hidden layers and an mlp has at least one")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ContractError("need input_dim >= 1 and num_classes >= 2")
        if any(h < 1 for h in self.hidden_sizes):
            raise ContractError("hidden sizes must be positive")
        if self.activation != "relu":
            raise ContractError("only the relu activation is supported")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, self.num_classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class ModelParams:
    spec: ModelSpec
    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> ModelParams:
        return ModelParams(
            self.spec,
            [Tensor(w.data, requires_grad=True) for w in self.weights],
            [Tensor(b.data, requires_grad=True) for b in self.biases],
        )


# standard deviation of a unit normal truncated to [-2, 2]
_TRUNCATED_STD = 0.8796256610342398


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Samples with standard deviation ``std`` from a normal truncated at two of its sigmas."""
    n = int(np.prod(shape))
    out = rng.standard_normal(n)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * (std / _TRUNCATED_STD)).reshape(shape)


def init(spec: ModelSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = truncated_normal(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return ModelParams(spec, weights, biases)


def forward(params: ModelParams, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ShapeError(f"expected inputs [b, {params.spec.input_dim}], got {x.shape}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.matmul(h, w) + b
        if i < last:
            h = ad.relu(h)
    return h


def predict_logits(params: ModelParams, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Tape-free forward pass for evaluation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ShapeError(f"expected inputs [b, {params.spec.input_dim}], got {x.shape}")
    outs = []
    last = len(params.weights) - 1
    for start in range(0, len(x), chunk):
        h = x[start:start + chunk]
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.maximum(h, 0.0)
        outs.append(h)
    if not outs:
        return np.zeros((0, params.spec.num_classes))
    return np.concatenate(outs)


def accuracy(logits, labels) -> float:
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("accuracy of an empty batch")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def to_checkpoint(params: ModelParams) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "layers": [
            {"weights": w.data.tolist(), "bias": b.data.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def from_checkpoint(doc: dict) -> ModelParams:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    try:
        spec = ModelSpec(**doc["spec"])
        layers = doc["layers"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    sizes = spec.layer_sizes
    if len(layers) != len(sizes) - 1:
        raise FormatError("layer count does not match the model spec")
    weights, biases = [], []
    for layer, fan_in, fan_out in zip(layers, sizes[:-1], sizes[1:]):
        w = np.asarray(layer["weights"], dtype=np.float64)
        b = np.asarray(layer["bias"], dtype=np.float64)
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise FormatError(f"layer shapes {w.shape}/{b.shape} do not match the model spec")
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
    return ModelParams(spec, weights, biases)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(params)))


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON checkpoint ({exc})") from exc
    return from_checkpoint(doc)
