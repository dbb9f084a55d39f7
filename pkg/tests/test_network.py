import numpy as np
import pytest

from derivwatch.errors import DataError, ModelError, TrainingError
from derivwatch.network import (
    MlpHyperparameters,
    MlpModel,
    build_stack,
    loss_and_gradients,
    train_mlp,
)
from derivwatch.nn import DenseStack, clip_by_norm, relu


class TestDenseStack:
    """Tests for the shared dense layer stack."""

    def test_relu(self):
        """Test the rectifier."""
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_widths(self):
        """Test layer width bookkeeping."""
        stack = build_stack(2, 3, [32, 24, 12], np.random.default_rng(0))

        assert stack.widths == [2, 32, 24, 12, 3]
        assert stack.activations == ["relu", "relu", "relu", "linear"]
        assert stack(np.zeros((5, 2))).shape == (5, 3)

    def test_zero_stack_outputs_zero(self):
        """Test that an all-zero stack outputs zeros."""
        stack = DenseStack.zeros([2, 4, 1], ["relu", "linear"])

        np.testing.assert_array_equal(stack(np.ones((3, 2))), np.zeros((3, 1)))

    def test_layers_must_chain(self):
        """Test that mismatched layer shapes are rejected."""
        with pytest.raises(ModelError):
            DenseStack(
                weights=[np.zeros((2, 3)), np.zeros((4, 1))],
                biases=[np.zeros(3), np.zeros(1)],
                activations=["relu", "linear"],
            )

    def test_unknown_activation(self):
        """Test that only known activations are accepted."""
        with pytest.raises(ModelError):
            DenseStack.zeros([2, 1], ["tanh"])

    def test_gradients_match_finite_differences(self):
        """Test backpropagated gradients against central differences."""
        rng = np.random.default_rng(1)
        stack = build_stack(2, 2, [5, 4], rng)
        X = rng.normal(size=(6, 2))
        Y = rng.normal(size=(6, 2))
        _, grads_w, grads_b = loss_and_gradients(stack, X, Y)

        eps = 1e-6
        for params, grads in ((stack.weights, grads_w), (stack.biases, grads_b)):
            for p, g in zip(params, grads):
                numeric = np.zeros_like(p)
                for i in np.ndindex(p.shape):
                    saved = p[i]
                    p[i] = saved + eps
                    up = loss_and_gradients(stack, X, Y)[0]
                    p[i] = saved - eps
                    down = loss_and_gradients(stack, X, Y)[0]
                    p[i] = saved
                    numeric[i] = (up - down) / (2 * eps)
                np.testing.assert_allclose(g, numeric, rtol=1e-4, atol=1e-7)

    def test_clip_by_norm(self):
        """Test joint gradient clipping."""
        grads = [np.array([3.0]), np.array([4.0])]
        clipped = clip_by_norm(grads, 1.0)

        np.testing.assert_allclose([clipped[0][0], clipped[1][0]], [0.6, 0.8])
        assert clip_by_norm(grads, 10.0) is grads
        assert clip_by_norm(grads, 0.0) is grads

    def test_dict_preserves_outputs(self):
        """Test rebuilding a stack from its dictionary form."""
        stack = build_stack(2, 1, [3], np.random.default_rng(2))
        x = np.array([[0.5, -1.0]])

        rebuilt = DenseStack.from_dict(stack.to_dict())
        np.testing.assert_array_equal(rebuilt(x), stack(x))


class TestMlp:
    """Tests for the healthy-behaviour network."""

    def test_learns_linear_map(self, linear_dataset):
        """Test that training reduces the loss on a linear target."""
        hyper = MlpHyperparameters(hidden_layers=[16], epochs=20, batch_size=1)
        model = train_mlp(linear_dataset, hyper, seed=0)

        assert model.is_trained
        assert len(model.loss_history) == 20
        assert model.loss_history[-1] < model.loss_history[0]
        assert model.loss_history[-1] < 0.05

    def test_predicts_in_raw_units(self, linear_dataset):
        """Test that predictions come back in the targets' own units."""
        hyper = MlpHyperparameters(hidden_layers=[16], epochs=20, batch_size=1)
        model = train_mlp(linear_dataset, hyper, seed=0)
        residual = model.predict(linear_dataset.X) - linear_dataset.Y

        bias = np.abs(residual.mean(axis=0))
        assert np.all(bias < 0.1 * linear_dataset.Y.std(axis=0))

    def test_memorizes_single_sample(self, linear_dataset):
        """Test that a thousand epochs on one row reproduce that row."""
        row = linear_dataset.rows(np.array([0]))
        hyper = MlpHyperparameters(epochs=1000, batch_size=1)
        model = train_mlp(row, hyper, seed=0)

        assert model.loss_history[-1] < 1e-4
        np.testing.assert_allclose(model.predict(row.X), row.Y, rtol=1e-2)

    def test_deterministic_in_seed(self, linear_dataset):
        """Test that the same seed trains the same network."""
        hyper = MlpHyperparameters(hidden_layers=[4], epochs=2, batch_size=16)
        a = train_mlp(linear_dataset, hyper, seed=3)
        b = train_mlp(linear_dataset, hyper, seed=3)

        assert a.loss_history == b.loss_history
        np.testing.assert_array_equal(
            a.predict(linear_dataset.X), b.predict(linear_dataset.X)
        )

    def test_epochs_override(self, linear_dataset):
        """Test overriding the epoch count for one call."""
        model = train_mlp(
            linear_dataset, MlpHyperparameters(hidden_layers=[4]), epochs=1
        )

        assert len(model.loss_history) == 1
        assert model.hyperparameters.epochs == 1

    def test_divergence_is_reported(self, linear_dataset):
        """Test that an exploding loss raises a training error."""
        hyper = MlpHyperparameters(
            hidden_layers=[8], learning_rate=1e6, epochs=5, batch_size=1
        )

        with pytest.raises(TrainingError, match="non-finite"):
            train_mlp(linear_dataset, hyper)

    def test_empty_dataset(self, linear_dataset):
        """Test that training needs at least one row."""
        with pytest.raises(DataError):
            train_mlp(linear_dataset.rows(np.array([], dtype=int)))

    def test_dict_preserves_predictions(self, linear_dataset):
        """Test rebuilding a network from its dictionary form."""
        hyper = MlpHyperparameters(hidden_layers=[4], epochs=1, batch_size=32)
        model = train_mlp(linear_dataset, hyper)
        rebuilt = MlpModel.from_dict(model.to_dict())

        np.testing.assert_allclose(
            rebuilt.predict(linear_dataset.X), model.predict(linear_dataset.X)
        )
        assert rebuilt.is_trained

    def test_input_width_checked(self, linear_dataset):
        """Test that the wrong number of input columns is rejected."""
        hyper = MlpHyperparameters(hidden_layers=[4], epochs=1, batch_size=32)
        model = train_mlp(linear_dataset, hyper)

        with pytest.raises(ModelError):
            model.predict(np.zeros((2, 3)))
