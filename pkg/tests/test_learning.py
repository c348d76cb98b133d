"""Learning core tests: gradients against central finite differences,
aggregation identities, evaluation constants and the partition recipe."""

import math
import struct

import numpy as np
import pytest

from flwsim.learning import (
    DivergenceError,
    LocalDataset,
    ModelParams,
    TrainConfig,
    aggregate,
    evaluate,
    global_loss,
    init_model,
    load_idx,
    load_idx_dataset,
    local_train,
    loss_and_gradients,
    make_synthetic_dataset,
    partition_dataset,
    predict_logits,
)


def random_batch(rng, n=12, features=6, classes=4):
    x = rng.normal(size=(n, features))
    y = rng.integers(0, classes, size=n)
    return x, y


def numeric_gradients(params, x, y, eps=1e-5):
    """Central finite differences of the batch loss, one parameter at a time."""
    grads = params.copy()
    for arrays in (grads.weights, grads.biases):
        for layer, array in enumerate(arrays):
            source = (
                params.weights[layer] if arrays is grads.weights else params.biases[layer]
            )
            flat = array.ravel()
            src = source.ravel()
            for idx in range(src.size):
                original = src[idx]
                src[idx] = original + eps
                up = loss_and_gradients(params, x, y)[0]
                src[idx] = original - eps
                down = loss_and_gradients(params, x, y)[0]
                src[idx] = original
                flat[idx] = (up - down) / (2.0 * eps)
    return grads


def gradient_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(
        analytic.weights + analytic.biases, numeric.weights + numeric.biases
    ):
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, np.linalg.norm(a - n) / denom)
    return worst


class TestInitModel:
    def test_deterministic(self):
        a = init_model((64, 16, 10), seed=3)
        b = init_model((64, 16, 10), seed=3)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        c = init_model((64, 16, 10), seed=4)
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_parameter_count(self):
        assert init_model((64, 16, 10), 0).parameter_count == 64 * 16 + 16 + 16 * 10 + 10
        assert init_model((64, 16, 10), 0).parameter_count == 1210

    def test_reference_mlp_parameter_count(self):
        assert init_model((784, 128, 10), 0).parameter_count == 101_770

    def test_rejects_trivial_architecture(self):
        with pytest.raises(ValueError):
            init_model((10,), 0)


class TestGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(6):
            params = init_model((6, 5, 4), seed=int(rng.integers(1 << 30)))
            x, y = random_batch(rng)
            _, analytic = loss_and_gradients(params, x, y)
            numeric = numeric_gradients(params, x, y)
            worst = max(worst, gradient_error(analytic, numeric))
        assert worst <= 1e-4

    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(0)
        params = init_model((6, 4), seed=1)
        x, _ = random_batch(rng, classes=4)
        logits = predict_logits(params, x)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = shifted / shifted.sum(axis=1, keepdims=True)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-9)


class TestLocalTrain:
    def make_data(self, rng, n=24):
        x, y = random_batch(rng, n=n, features=6, classes=4)
        return LocalDataset(x, y)

    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(5)
        params = init_model((6, 5, 4), seed=2)
        data = self.make_data(rng)
        out = local_train(params, data, TrainConfig(learning_rate=0.0, seed=9))
        assert all(np.array_equal(a, b) for a, b in zip(out.weights, params.weights))
        assert all(np.array_equal(a, b) for a, b in zip(out.biases, params.biases))

    def test_input_model_unmodified(self):
        rng = np.random.default_rng(6)
        params = init_model((6, 5, 4), seed=2)
        snapshot = params.copy()
        local_train(params, self.make_data(rng), TrainConfig(learning_rate=0.5, seed=1))
        assert all(np.array_equal(a, b) for a, b in zip(params.weights, snapshot.weights))

    def test_single_full_batch_step_matches_gradient(self):
        rng = np.random.default_rng(7)
        params = init_model((6, 5, 4), seed=3)
        data = self.make_data(rng, n=10)
        lr = 0.25
        cfg = TrainConfig(local_epochs=1, batch_size=100, learning_rate=lr, seed=0)
        out = local_train(params, data, cfg)
        implied = params.copy()
        for layer in range(len(params.weights)):
            implied.weights[layer] = (params.weights[layer] - out.weights[layer]) / lr
            implied.biases[layer] = (params.biases[layer] - out.biases[layer]) / lr
        numeric = numeric_gradients(params, data.features, data.labels)
        assert gradient_error(implied, numeric) <= 1e-4

    def test_epochs_compose_with_chained_rng(self):
        rng_data = np.random.default_rng(8)
        params = init_model((6, 5, 4), seed=4)
        data = self.make_data(rng_data)
        cfg_two = TrainConfig(local_epochs=2, batch_size=8, learning_rate=0.1, seed=21)
        combined = local_train(params, data, cfg_two)
        cfg_one = TrainConfig(local_epochs=1, batch_size=8, learning_rate=0.1, seed=21)
        rng = np.random.default_rng(21)
        step1 = local_train(params, data, cfg_one, rng=rng)
        step2 = local_train(step1, data, cfg_one, rng=rng)
        assert all(np.array_equal(a, b) for a, b in zip(combined.weights, step2.weights))
        assert all(np.array_equal(a, b) for a, b in zip(combined.biases, step2.biases))

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_raises(self):
        params = init_model((4, 3), seed=0)
        data = LocalDataset(np.full((4, 4), 1e308), np.array([0, 1, 2, 0]))
        with pytest.raises(DivergenceError):
            local_train(
                params, data, TrainConfig(local_epochs=3, learning_rate=1.0, seed=0)
            )

    def test_empty_dataset_rejected(self):
        params = init_model((4, 3), seed=0)
        data = LocalDataset(np.empty((0, 4)), np.empty(0, dtype=int))
        with pytest.raises(ValueError):
            local_train(params, data, TrainConfig())


class TestAggregate:
    def test_equal_weights_mean(self):
        a = init_model((4, 3), seed=1)
        b = init_model((4, 3), seed=2)
        merged = aggregate([a, b], [10, 10])
        for m, wa, wb in zip(merged.weights, a.weights, b.weights):
            assert np.allclose(m, (wa + wb) / 2.0, rtol=0, atol=1e-15)

    def test_single_model_identity(self):
        a = init_model((4, 3), seed=1)
        merged = aggregate([a], [5])
        assert all(np.array_equal(m, w) for m, w in zip(merged.weights, a.weights))

    def test_unequal_weights_match_normalized_mean(self):
        models = [init_model((5, 4), seed=s) for s in (1, 2, 3)]
        weights = [2.0, 3.0, 5.0]
        coeffs = np.array(weights) / sum(weights)
        assert coeffs.sum() == pytest.approx(1.0, abs=1e-12)
        merged = aggregate(models, weights)
        for layer in range(len(merged.weights)):
            manual = sum(c * m.weights[layer] for c, m in zip(coeffs, models))
            assert np.allclose(merged.weights[layer], manual, rtol=0, atol=1e-15)

    def test_scalar_example(self):
        a = ModelParams([np.array([[0.0]])], [np.array([0.0])])
        b = ModelParams([np.array([[4.0]])], [np.array([0.0])])
        merged = aggregate([a, b], [1, 3])
        assert merged.weights[0][0, 0] == 3.0

    def test_identical_models_bitwise(self):
        a = init_model((8, 6, 4), seed=5)
        merged = aggregate([a.copy(), a.copy(), a.copy()], [1, 2, 7])
        assert all(np.array_equal(m, w) for m, w in zip(merged.weights, a.weights))
        assert all(np.array_equal(m, b) for m, b in zip(merged.biases, a.biases))

    def test_empty_list_signals_no_update(self):
        assert aggregate([], []) is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aggregate([init_model((4, 3), 0), init_model((4, 5), 0)], [1, 1])

    def test_nonpositive_weight(self):
        with pytest.raises(ValueError):
            aggregate([init_model((4, 3), 0)], [0])


class TestEvaluate:
    def test_uniform_model_loss_is_log_classes(self):
        params = ModelParams([np.zeros((6, 10))], [np.zeros(10)])
        rng = np.random.default_rng(3)
        data = LocalDataset(rng.normal(size=(50, 6)), rng.integers(0, 10, 50))
        loss, _ = evaluate(params, data)
        assert loss == pytest.approx(math.log(10.0), abs=1e-6)

    def test_perfect_predictions(self):
        # A one-hot readout of the label feature drives loss toward zero.
        params = ModelParams([np.eye(4) * 200.0], [np.zeros(4)])
        labels = np.array([0, 1, 2, 3, 1])
        data = LocalDataset(np.eye(4)[labels], labels)
        loss, accuracy = evaluate(params, data)
        assert accuracy == 1.0
        assert loss < 1e-12

    def test_global_loss_weighted(self):
        params = init_model((4, 3), seed=0)
        rng = np.random.default_rng(4)
        sets = [
            LocalDataset(rng.normal(size=(n, 4)), rng.integers(0, 3, n)) for n in (5, 15)
        ]
        expected = (
            evaluate(params, sets[0])[0] * 5 + evaluate(params, sets[1])[0] * 15
        ) / 20
        assert global_loss(params, sets) == pytest.approx(expected, rel=1e-12)


class TestPartitionDataset:
    def make_data(self, per_class=300, classes=10, features=8, seed=0):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(classes), per_class)
        return rng.normal(size=(per_class * classes, features)), labels

    def test_recipe_arithmetic(self):
        features, labels = self.make_data(per_class=200)
        parts = partition_dataset(
            features, labels, n_devices=10, seed=1, size_factor_range=(1.0, 1.0)
        )
        for device, part in enumerate(parts):
            merged = np.concatenate([part.train.labels, part.test.labels])
            assert merged.size == 200  # full base size under the degenerate factor
            counts = np.bincount(merged, minlength=10)
            assert counts[device % 10] == 180
            others = np.delete(counts, device % 10)
            # 20 leftover samples over 9 labels: the rule hands the extra
            # samples to the lowest label ids.
            assert sorted(others, reverse=True) == [3, 3] + [2] * 7

    def test_dominant_share_bounds(self):
        features, labels = self.make_data()
        parts = partition_dataset(features, labels, n_devices=10, seed=7)
        for part in parts:
            merged = np.concatenate([part.train.labels, part.test.labels])
            n = merged.size
            share = np.mean(merged == part.train.dominant_label)
            assert 0.9 - 1.0 / n <= share <= 0.9 + 1.0 / n

    def test_train_test_split_sizes(self):
        features, labels = self.make_data()
        for part in partition_dataset(features, labels, n_devices=10, seed=3):
            n = part.train.n + part.test.n
            assert abs(part.train.n - 0.75 * n) <= 1.0

    def test_deterministic_rerun(self):
        features, labels = self.make_data()
        first = partition_dataset(features, labels, n_devices=10, seed=11)
        second = partition_dataset(features, labels, n_devices=10, seed=11)
        for a, b in zip(first, second):
            assert np.array_equal(a.train.labels, b.train.labels)
            assert np.array_equal(a.train.features, b.train.features)
            assert np.array_equal(a.test.labels, b.test.labels)

    def test_rotation_preserves_norms(self):
        # The feature-plane rotation is orthogonal, so sample norms survive.
        features, labels = self.make_data(per_class=150)
        parts = partition_dataset(
            features, labels, n_devices=10, seed=2, size_factor_range=(0.8, 0.8)
        )
        total = sum(p.train.n + p.test.n for p in parts)
        norms = np.sort(
            np.concatenate(
                [np.linalg.norm(np.vstack([p.train.features, p.test.features]), axis=1) for p in parts]
            )
        )
        original = np.sort(np.linalg.norm(features, axis=1))[: total * 0 + norms.size]
        # Same multiset of norms up to selection: check each partition's norms
        # appear among the originals.
        all_original = np.sort(np.linalg.norm(features, axis=1))
        for value in norms[:50]:
            idx = np.searchsorted(all_original, value)
            nearest = all_original[np.clip(idx, 0, all_original.size - 1)]
            prev = all_original[np.clip(idx - 1, 0, all_original.size - 1)]
            assert min(abs(nearest - value), abs(prev - value)) < 1e-9

    def test_image_rotation_path(self):
        rng = np.random.default_rng(9)
        images = rng.uniform(0, 1, size=(1000, 36))
        labels = np.tile(np.arange(10), 100)
        parts = partition_dataset(
            images, labels, n_devices=10, seed=5,
            size_factor_range=(0.25, 0.9), image_shape=(6, 6)
        )
        assert parts[0].train.features.shape[1] == 36

    def test_insufficient_samples(self):
        features, labels = self.make_data(per_class=10)
        with pytest.raises(ValueError):
            partition_dataset(
                features, labels, n_devices=40, seed=0, size_factor_range=(1.0, 1.0)
            )  # 40 devices need more than the tiny class pools hold


class TestSyntheticDataset:
    def test_balanced_and_deterministic(self):
        x, y = make_synthetic_dataset(1000, n_features=16, n_classes=10, seed=4)
        assert x.shape == (1000, 16)
        assert np.bincount(y, minlength=10).tolist() == [100] * 10
        x2, y2 = make_synthetic_dataset(1000, n_features=16, n_classes=10, seed=4)
        assert np.array_equal(x, x2) and np.array_equal(y, y2)

    def test_learnable(self):
        x, y = make_synthetic_dataset(600, n_features=16, n_classes=4, seed=1)
        params = init_model((16, 16, 4), seed=0)
        data = LocalDataset(x[:450], y[:450])
        cfg = TrainConfig(local_epochs=20, batch_size=32, learning_rate=0.2, seed=2)
        trained = local_train(params, data, cfg)
        _, accuracy = evaluate(trained, LocalDataset(x[450:], y[450:]))
        assert accuracy > 0.9


def write_idx(path, array, type_code):
    dims = array.shape
    header = bytes([0, 0, type_code, len(dims)]) + b"".join(
        struct.pack(">I", d) for d in dims
    )
    path.write_bytes(header + array.tobytes())


class TestIdxLoader:
    def test_round_trip_ubyte(self, tmp_path):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        path = tmp_path / "images.idx"
        write_idx(path, images, 0x08)
        assert np.array_equal(load_idx(path), images)

    def test_round_trip_int32(self, tmp_path):
        values = np.arange(12, dtype=">i4").reshape(3, 4)
        path = tmp_path / "values.idx"
        write_idx(path, values, 0x0C)
        assert np.array_equal(load_idx(path), values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x01\x00")
        with pytest.raises(ValueError):
            load_idx(path)

    def test_size_mismatch(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(bytes([0, 0, 0x08, 1]) + struct.pack(">I", 10) + b"\x00" * 3)
        with pytest.raises(ValueError):
            load_idx(path)

    def test_dataset_pair(self, tmp_path):
        rng = np.random.default_rng(2)
        images = rng.integers(0, 256, size=(6, 5, 5), dtype=np.uint8)
        labels = rng.integers(0, 10, size=6).astype(np.uint8)
        write_idx(tmp_path / "img.idx", images, 0x08)
        write_idx(tmp_path / "lbl.idx", labels, 0x08)
        features, y, shape = load_idx_dataset(tmp_path / "img.idx", tmp_path / "lbl.idx")
        assert features.shape == (6, 25)
        assert shape == (5, 5)
        assert features.max() <= 1.0
        assert np.array_equal(y, labels.astype(np.int64))
