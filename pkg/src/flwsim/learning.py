"""Local training, aggregation and data partitioning for the FL task.

The model is a small fully connected network (ReLU hidden layers, softmax
output, cross-entropy loss) trained with plain mini-batch SGD. Aggregation
is the data-size weighted average of device models. The partition generator
reproduces the skewed per-device recipe: one dominant label per device, the
remainder spread over the other labels, a random size factor, a bounded
per-device rotation, and a 75/25 train/test split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class ModelParams:
    """Per-layer weight matrices and bias vectors of the network."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def as_vector(self) -> np.ndarray:
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts)


@dataclass
class LocalDataset:
    """Feature matrix and integer class labels held by one device."""

    features: np.ndarray  # (samples, features)
    labels: np.ndarray  # (samples,) int class ids
    dominant_label: int = -1

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels must have the same length")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class DevicePartition:
    """A device's local data: skewed train and test splits."""

    train: LocalDataset
    test: LocalDataset


@dataclass
class TrainConfig:
    """Local SGD settings for one client update."""

    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


def init_model(layer_sizes: tuple[int, ...], seed: int) -> ModelParams:
    """Seeded fan-in scaled uniform initialization; biases start at zero."""
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs at least an input and an output layer")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


def predict_logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Forward pass up to the output layer (no softmax)."""
    activation = np.asarray(features, dtype=float)
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        activation = activation @ w + b
        if layer < last:
            activation = np.maximum(activation, 0.0)
    return activation


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def loss_and_gradients(
    params: ModelParams, features: np.ndarray, labels: np.ndarray
) -> tuple[float, ModelParams]:
    """Mean cross-entropy over the batch and its gradients by backprop."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]

    pre: list[np.ndarray] = []  # pre-activations per layer
    activations = [features]
    value = features
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = value @ w + b
        pre.append(z)
        value = np.maximum(z, 0.0) if layer < last else z
        activations.append(value)

    probs = _softmax(activations[-1])
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))

    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grad_w = [np.empty(0)] * len(params.weights)
    grad_b = [np.empty(0)] * len(params.biases)
    for layer in range(last, -1, -1):
        grad_w[layer] = activations[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (pre[layer - 1] > 0)
    return loss, ModelParams(grad_w, grad_b)


def local_train(
    params: ModelParams,
    data: LocalDataset,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Mini-batch SGD over seeded shuffles; the input model is not modified.

    The shuffle stream chains across epochs, so two epochs equal two
    successive one-epoch calls sharing one generator.
    """
    if data.n == 0:
        raise ValueError("local dataset is empty")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    model = params.copy()
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(data.n)
        for start in range(0, data.n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(model, data.features[batch], data.labels[batch])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}"
                )
            for layer in range(len(model.weights)):
                model.weights[layer] -= cfg.learning_rate * grads.weights[layer]
                model.biases[layer] -= cfg.learning_rate * grads.biases[layer]
    return model


def aggregate(models: list[ModelParams], weights: list[float]) -> ModelParams | None:
    """Element-wise average of models weighted by local data sizes.

    Computed as a weighted sum of deltas from the first model, so aggregating
    identical models returns them bit for bit. Returns None for an empty
    model list (the round keeps the previous global model).
    """
    if not models:
        return None
    if len(models) != len(weights):
        raise ValueError("models and weights must align")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be > 0")
    base = models[0]
    for other in models[1:]:
        if other.layer_sizes != base.layer_sizes:
            raise ValueError("all models must share one architecture")
    total = float(sum(weights))
    merged = base.copy()
    for model, weight in zip(models[1:], weights[1:]):
        coeff = weight / total
        for layer in range(len(merged.weights)):
            merged.weights[layer] += coeff * (model.weights[layer] - base.weights[layer])
            merged.biases[layer] += coeff * (model.biases[layer] - base.biases[layer])
    return merged


def evaluate(params: ModelParams, data: LocalDataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of the model on a dataset."""
    if data.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(params, data.features)
    probs = _softmax(logits)
    loss = float(-np.mean(np.log(probs[np.arange(data.n), data.labels] + 1e-300)))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return loss, accuracy


def global_loss(params: ModelParams, datasets: list[LocalDataset]) -> float:
    """Data-size weighted mean of per-device losses (the global objective)."""
    total = sum(d.n for d in datasets)
    if total == 0:
        raise ValueError("no data to evaluate")
    return sum(evaluate(params, d)[0] * d.n for d in datasets) / total


def _plane_rotation(n_features: int, angle_rad: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by a bounded angle within one random 2-D plane of the space."""
    basis, _ = np.linalg.qr(rng.standard_normal((n_features, 2)))
    u, v = basis[:, 0], basis[:, 1]
    cos, sin = np.cos(angle_rad), np.sin(angle_rad)
    eye = np.eye(n_features)
    return (
        eye
        + (cos - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + sin * (np.outer(u, v) - np.outer(v, u))
    )


def partition_dataset(
    features: np.ndarray,
    labels: np.ndarray,
    n_devices: int,
    seed: int,
    dominant_fraction: float = 0.9,
    size_factor_range: tuple[float, float] = (0.25, 1.0),
    rotation_limit_deg: float = 45.0,
    train_fraction: float = 0.75,
    image_shape: tuple[int, ...] | None = None,
) -> list[DevicePartition]:
    """Skewed per-device partitions of a labeled dataset.

    Device i gets dominant label i mod n_classes with dominant_fraction of
    its samples; the remainder is split as evenly as possible over the other
    labels, extra samples going to the labels cyclically following the
    dominant one (which balances demand across class pools). Partition size
    is floor(base * u) with u uniform in size_factor_range and base the fair
    share of the dataset. Heterogeneity: image data (image_shape given) is
    rotated by a per-device angle within +/- rotation_limit_deg; flat feature
    data is rotated by the same bounded angle in a random feature plane.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("need at least two classes to build skewed partitions")

    root = np.random.SeedSequence(seed)
    pool_rng = np.random.default_rng(root.spawn(1)[0])
    pools = {
        int(c): list(pool_rng.permutation(np.flatnonzero(labels == c))) for c in classes
    }
    base = features.shape[0] // n_devices

    partitions: list[DevicePartition] = []
    for device in range(n_devices):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(device + 1,)))
        pos = device % classes.size
        dominant = int(classes[pos])
        factor = rng.uniform(*size_factor_range)
        size = max(int(base * factor), 8)
        n_dominant = int(round(dominant_fraction * size))
        others = [int(classes[(pos + step) % classes.size]) for step in range(1, classes.size)]
        per_other, extra = divmod(size - n_dominant, len(others))
        counts = {dominant: n_dominant}
        for rank, label in enumerate(others):
            counts[label] = per_other + (1 if rank < extra else 0)

        indices: list[int] = []
        for label, count in counts.items():
            if len(pools[label]) < count:
                raise ValueError(
                    f"not enough samples of class {label} for device {device}"
                )
            take, pools[label] = pools[label][:count], pools[label][count:]
            indices.extend(int(i) for i in take)

        local_x = features[indices].copy()
        local_y = labels[indices].copy()
        angle = rng.uniform(-rotation_limit_deg, rotation_limit_deg)
        if image_shape is not None:
            imgs = local_x.reshape((-1,) + tuple(image_shape))
            imgs = ndimage.rotate(imgs, angle, axes=(2, 1), reshape=False, order=1)
            local_x = imgs.reshape(local_x.shape[0], -1)
        else:
            rotation = _plane_rotation(local_x.shape[1], np.deg2rad(angle), rng)
            local_x = local_x @ rotation.T

        order = rng.permutation(size)
        n_train = int(round(train_fraction * size))
        train_idx, test_idx = order[:n_train], order[n_train:]
        partitions.append(
            DevicePartition(
                train=LocalDataset(local_x[train_idx], local_y[train_idx], dominant),
                test=LocalDataset(local_x[test_idx], local_y[test_idx], dominant),
            )
        )
    return partitions


def make_synthetic_dataset(
    n_samples: int,
    n_features: int = 64,
    n_classes: int = 10,
    seed: int = 0,
    center_scale: float = 1.0,
    noise_scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced Gaussian-blob classification data with one blob per class."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_classes, n_features))
    per_class, extra = divmod(n_samples, n_classes)
    counts = [per_class + (1 if c < extra else 0) for c in range(n_classes)]
    labels = np.repeat(np.arange(n_classes), counts)
    features = centers[labels] + rng.normal(0.0, noise_scale, size=(n_samples, n_features))
    order = rng.permutation(n_samples)
    return features[order], labels[order]


_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def load_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file (big-endian magic, dims, raw values) into an array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file (bad magic)")
    dtype = _IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise ValueError(f"{path}: unknown IDX type code 0x{raw[2]:02x}")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    dims = tuple(
        int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)
    )
    expected = header_end + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: size mismatch, expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def load_idx_dataset(
    images_path: str | Path, labels_path: str | Path
) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Load an IDX image/label pair as flat unit-scaled features and labels."""
    images = load_idx(images_path)
    labels = load_idx(labels_path).astype(np.int64)
    if images.ndim < 2:
        raise ValueError("image file must have at least two dimensions")
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label files disagree on the sample count")
    image_shape = images.shape[1:]
    features = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return features, labels, image_shape
