"""
Small differentiable classifiers with analytic gradients, plus the datasets they
train on.

Two model kinds share one flat parameter vector convention:

    logreg  [W: C*F, b: C]                       softmax(x W^T + b)
    mlp     [W1: h*F, b1: h, W2: C*h, b2: C]     softmax(relu(x W1^T + b1) W2^T + b2)

Weight matrices are stored row-major, one row per output unit.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from .exceptions import ContractViolationError, DatasetFormatError, LayoutMismatchError
from .tensor import LayerLayout, ParamVector, substream
from .types import FloatArray, IndexArray, LabelArray, ModelKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with one integer class label per row"""
    features: FloatArray
    labels: LabelArray
    num_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if features.ndim != 2:
            raise ContractViolationError("features must be a 2-D matrix")
        if features.shape[0] != labels.size:
            raise ContractViolationError(f"{features.shape[0]} feature rows but {labels.size} labels")
        if self.num_classes < 2:
            raise ContractViolationError("a dataset needs at least two classes")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractViolationError(f"labels must lie in [0, {self.num_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return int(self.labels.size)

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: IndexArray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def class_counts(self) -> IndexArray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def __len__(self) -> int:
        return self.n_samples


def model_layout(kind: ModelKind, num_classes: int, num_features: int, hidden_units: int = 0) -> LayerLayout:
    """Layer layout of a model kind at the given dimensions"""
    if kind == "logreg":
        return LayerLayout((num_classes * num_features, num_classes), ("W", "b"))
    if kind == "mlp":
        if hidden_units < 1:
            raise ContractViolationError("an mlp needs hidden_units >= 1")
        h = hidden_units
        return LayerLayout((h * num_features, h, num_classes * h, num_classes), ("W1", "b1", "W2", "b2"))
    raise ContractViolationError(f"unknown model kind {kind!r}")


@dataclass(frozen=True)
class Model:
    """A model kind, its dimensions and its parameters"""
    kind: ModelKind
    num_classes: int
    num_features: int
    params: ParamVector
    hidden_units: int = 0

    def __post_init__(self):
        expected = model_layout(self.kind, self.num_classes, self.num_features, self.hidden_units)
        if self.params.layout != expected:
            raise LayoutMismatchError(
                f"{self.kind} parameters need layout {expected.layer_sizes}, got {self.params.layout.layer_sizes}"
            )

    @property
    def layout(self) -> LayerLayout:
        return self.params.layout

    def with_params(self, params: ParamVector) -> "Model":
        return Model(self.kind, self.num_classes, self.num_features, params, self.hidden_units)

    def _tensors(self) -> List[np.ndarray]:
        layout = self.layout
        flat = self.params.values
        c, f, h = self.num_classes, self.num_features, self.hidden_units
        shapes = [(c, f), (c,)] if self.kind == "logreg" else [(h, f), (h,), (c, h), (c,)]
        return [flat[layout.layer_slice(i)].reshape(shape) for i, shape in enumerate(shapes)]


def init_model(
    kind: ModelKind, num_classes: int, num_features: int, hidden_units: int = 0, seed: int = 0
) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for every layer"""
    layout = model_layout(kind, num_classes, num_features, hidden_units)
    fan_ins = [num_features, num_features] if kind == "logreg" else [num_features] * 2 + [hidden_units] * 2
    rng = substream(seed, "init", 0, 0).generator()
    chunks = [
        rng.uniform(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), size)
        for fan_in, size in zip(fan_ins, layout.layer_sizes)
    ]
    return Model(kind, num_classes, num_features, ParamVector(np.concatenate(chunks), layout), hidden_units)


def _check_batch(model: Model, batch: Dataset) -> None:
    if batch.n_samples == 0:
        raise ContractViolationError("batch is empty")
    if batch.n_features != model.num_features:
        raise ContractViolationError(f"batch has {batch.n_features} features, model expects {model.num_features}")
    if batch.num_classes != model.num_classes:
        raise ContractViolationError(f"batch has {batch.num_classes} classes, model expects {model.num_classes}")


def _forward(model: Model, x: FloatArray) -> Tuple[FloatArray, Optional[FloatArray]]:
    """Logits, plus the hidden pre-activation for mlp"""
    if model.kind == "logreg":
        w, b = model._tensors()
        return x @ w.T + b, None
    w1, b1, w2, b2 = model._tensors()
    pre = x @ w1.T + b1
    return np.maximum(pre, 0.0) @ w2.T + b2, pre


def loss(model: Model, batch: Dataset, weight_decay: float = 0.0) -> float:
    """Mean softmax cross-entropy plus (weight_decay/2)*||theta||^2"""
    _check_batch(model, batch)
    logits, _ = _forward(model, batch.features)
    picked = logits[np.arange(batch.n_samples), batch.labels]
    value = float(np.mean(logsumexp(logits, axis=1) - picked))
    if weight_decay > 0:
        theta = model.params.values
        value += 0.5 * weight_decay * float(theta @ theta)
    return value


def gradient(model: Model, batch: Dataset, weight_decay: float = 0.0) -> ParamVector:
    """
    Analytic gradient of ``loss``.

    Args:
        model: Model to differentiate at
        batch: Non-empty batch
        weight_decay: lambda; adds lambda*theta

    Returns:
        ParamVector in the model's layout
    """
    _check_batch(model, batch)
    x = batch.features
    n = batch.n_samples
    logits, pre = _forward(model, x)
    d_logits = softmax(logits, axis=1)
    d_logits[np.arange(n), batch.labels] -= 1.0
    d_logits /= n

    if model.kind == "logreg":
        parts = [d_logits.T @ x, d_logits.sum(axis=0)]
    else:
        _, _, w2, _ = model._tensors()
        hidden = np.maximum(pre, 0.0)
        d_pre = (d_logits @ w2) * (pre > 0)
        parts = [d_pre.T @ x, d_pre.sum(axis=0), d_logits.T @ hidden, d_logits.sum(axis=0)]

    grad = np.concatenate([p.reshape(-1) for p in parts])
    if weight_decay > 0:
        grad = grad + weight_decay * model.params.values
    return ParamVector(grad, model.layout)


def predict(model: Model, features: FloatArray) -> LabelArray:
    logits, _ = _forward(model, np.asarray(features, dtype=np.float64))
    return np.argmax(logits, axis=1).astype(np.int64)


def accuracy(model: Model, ds: Dataset) -> float:
    """Fraction of correctly classified samples"""
    if ds.n_samples == 0:
        raise ContractViolationError("cannot score an empty dataset")
    return float(np.mean(predict(model, ds.features) == ds.labels))


# Datasets

def synth_dataset(
    num_classes: int,
    num_features: int,
    num_samples: int,
    cluster_spread: float,
    seed: int,
    center_radius: float = 2.0,
) -> Dataset:
    """
    Gaussian blobs, one per class.

    Centers are orthonormal directions scaled by ``center_radius`` when there are no
    more classes than features (random unit directions otherwise). Labels cycle
    through the classes, so class counts differ by at most one.
    """
    if num_classes < 2 or num_features < 1 or num_samples < num_classes:
        raise ContractViolationError("need C >= 2, F >= 1 and n >= C")
    if cluster_spread < 0:
        raise ContractViolationError("cluster_spread must be non-negative")
    rng = substream(seed, "dataset", 0, 0).generator()
    if num_classes <= num_features:
        q, _ = np.linalg.qr(rng.standard_normal((num_features, num_classes)))
        directions = q.T
    else:
        directions = rng.standard_normal((num_classes, num_features))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = center_radius * directions

    labels = (np.arange(num_samples) % num_classes)[rng.permutation(num_samples)]
    features = centers[labels] + cluster_spread * rng.standard_normal((num_samples, num_features))
    return Dataset(features, labels, num_classes)


def partition_iid(ds: Dataset, num_clients: int, seed: int) -> List[Dataset]:
    """Random permutation split into ``num_clients`` shards whose sizes differ by at most one"""
    if not 1 <= num_clients <= ds.n_samples:
        raise ContractViolationError(f"cannot split {ds.n_samples} samples across {num_clients} clients")
    order = substream(seed, "partition", 0, 0).generator().permutation(ds.n_samples)
    return [ds.subset(part) for part in np.array_split(order, num_clients)]


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Random held-out split; both sides keep at least one sample"""
    if not 0.0 < test_fraction < 1.0:
        raise ContractViolationError("test_fraction must be in (0, 1)")
    if ds.n_samples < 2:
        raise ContractViolationError("need at least two samples to split")
    order = substream(seed, "split", 0, 0).generator().permutation(ds.n_samples)
    n_test = min(ds.n_samples - 1, max(1, int(round(ds.n_samples * test_fraction))))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def save_dataset_csv(ds: Dataset, path: Union[str, Path]) -> None:
    """Write ``f0,...,f{F-1},label`` rows; floats use shortest round-trip text"""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.n_features)] + ["label"])
        for row, label in zip(ds.features.tolist(), ds.labels.tolist()):
            writer.writerow([repr(v) for v in row] + [str(label)])


def load_dataset_csv(path: Union[str, Path], num_classes: Optional[int] = None) -> Dataset:
    """
    Read a dataset CSV written by ``save_dataset_csv`` (or by hand).

    Args:
        path: CSV file with a ``f0,...,label`` header
        num_classes: Class count; defaults to max(label) + 1

    Raises:
        DatasetFormatError: On a bad header, ragged rows or unparsable values
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DatasetFormatError(f"cannot read dataset {path}: {e}") from e
    if not rows:
        raise DatasetFormatError(f"{path}: empty file")

    header = rows[0]
    expected = [f"f{i}" for i in range(len(header) - 1)] + ["label"]
    if len(header) < 2 or header != expected:
        raise DatasetFormatError(f"{path}: header must be f0,...,f{{F-1}},label")
    width = len(header)

    features = []
    labels = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DatasetFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            features.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
        except ValueError as e:
            raise DatasetFormatError(f"{path}:{lineno}: {e}") from e
    if not labels:
        raise DatasetFormatError(f"{path}: no samples")
    if min(labels) < 0:
        raise DatasetFormatError(f"{path}: negative label")

    classes = num_classes if num_classes is not None else max(2, max(labels) + 1)
    if max(labels) >= classes:
        raise DatasetFormatError(f"{path}: label {max(labels)} outside [0, {classes})")
    features_array = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features_array)):
        raise DatasetFormatError(f"{path}: non-finite feature value")
    logger.info(f"Loaded {len(labels)} samples with {width - 1} features from {path}")
    return Dataset(features_array, np.asarray(labels, dtype=np.int64), classes)


class BatchSampler:
    """
    Mini-batches for one client shard.

    Each pass over the shard is a fresh permutation drawn from the stream keyed by
    (seed, client, pass), so the batch sequence does not depend on which thread runs
    the client. The last batch of a pass may be short.
    """

    def __init__(self, shard_size: int, batch_size: int, seed: int, client_id: int):
        if shard_size < 1:
            raise ContractViolationError(f"client {client_id} has an empty shard")
        if batch_size < 1:
            raise ContractViolationError("batch_size must be positive")
        self.shard_size = shard_size
        self.batch_size = batch_size
        self.seed = seed
        self.client_id = client_id
        self._pass = -1
        self._order: IndexArray = np.empty(0, dtype=np.int64)
        self._cursor = 0

    @property
    def batches_per_pass(self) -> int:
        return -(-self.shard_size // self.batch_size)

    def next_batch(self) -> IndexArray:
        """Shard-relative indices of the next batch"""
        if self._cursor >= self._order.size:
            self._pass += 1
            self._order = substream(self.seed, "batches", self.client_id, self._pass).generator().permutation(
                self.shard_size
            )
            self._cursor = 0
        batch = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += batch.size
        return batch
