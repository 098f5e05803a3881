"""Unit tests for loss, backpropagation, SGD, the training loop, and the
integer export. Gradients are checked against a central finite-difference
oracle that only ever calls the forward pass."""

import numpy as np
import pytest

from qmrf.network import (
    LayerParams,
    LayerSpec,
    NetworkConfig,
    init_params,
    make_regression_network,
    network_forward,
)
from qmrf.training import (
    TrainConfig,
    TrainingDivergedError,
    backprop,
    export_integer_model,
    mse_loss,
    output_delta,
    sgd_step,
    train,
)


# ---------------------------------------------------------------------------
# mse_loss / output_delta
# ---------------------------------------------------------------------------

def test_mse_loss_examples():
    assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse_loss([1.0, 3.0], [1.0, 1.0]) == 2.0  # (0 + 4) / 2
    with pytest.raises(ValueError):
        mse_loss([1.0], [1.0, 2.0])


def test_mse_loss_non_negative():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert mse_loss(rng.normal(size=6), rng.normal(size=6)) >= 0.0


def _trace_for(outputs):
    cfg = make_regression_network(len(outputs), [len(outputs)])
    params = [LayerParams(weights=np.eye(len(outputs)), biases=np.zeros(len(outputs)))]
    return network_forward(cfg, params, outputs)


def test_output_delta_zero_at_target():
    trace = _trace_for(np.array([0.4, -0.2]))
    np.testing.assert_array_equal(output_delta(trace, trace.outputs), [0.0, 0.0])


def test_output_delta_hand_value():
    trace = _trace_for(np.array([2.0, 0.0]))
    np.testing.assert_allclose(output_delta(trace, [0.0, 0.0]), [2.0, 0.0])


def test_output_delta_linear_in_residual():
    trace = _trace_for(np.array([1.0, 3.0]))
    d1 = output_delta(trace, [0.0, 0.0])
    d2 = output_delta(trace, [-1.0, -3.0])
    np.testing.assert_allclose(d2, 2 * d1)


# ---------------------------------------------------------------------------
# backprop
# ---------------------------------------------------------------------------

def test_backprop_zero_delta_gives_zero_grads():
    cfg = make_regression_network(3, [4, 2])
    params = init_params(cfg, seed=1)
    trace = network_forward(cfg, params, [0.5, -0.3, 0.8])
    grads = backprop(cfg, params, trace, np.zeros(2))
    for g in grads.weight_grads + grads.bias_grads:
        assert not np.any(g)


def test_backprop_single_linear_layer_closed_form():
    cfg = NetworkConfig(input_dim=3, layers=(LayerSpec(3, 2, "linear"),))
    params = init_params(cfg, seed=2)
    x = np.array([0.7, -1.1, 0.4])
    trace = network_forward(cfg, params, x)
    delta = np.array([0.9, -0.3])
    grads = backprop(cfg, params, trace, delta)
    np.testing.assert_allclose(grads.weight_grads[0], np.outer(delta, x))
    np.testing.assert_allclose(grads.bias_grads[0], delta)


def finite_difference_grads(cfg, params, x, target, h=1e-5):
    """Central-difference gradient of the MSE loss w.r.t. every parameter.
    Independent of the analytic path: only calls network_forward."""

    def loss_now():
        return mse_loss(network_forward(cfg, params, x).outputs, target)

    dW, db = [], []
    for lp in params:
        gw = np.zeros_like(lp.weights)
        for idx in np.ndindex(lp.weights.shape):
            orig = lp.weights[idx]
            lp.weights[idx] = orig + h
            up = loss_now()
            lp.weights[idx] = orig - h
            down = loss_now()
            lp.weights[idx] = orig
            gw[idx] = (up - down) / (2 * h)
        gb = np.zeros_like(lp.biases)
        for idx in np.ndindex(lp.biases.shape):
            orig = lp.biases[idx]
            lp.biases[idx] = orig + h
            up = loss_now()
            lp.biases[idx] = orig - h
            down = loss_now()
            lp.biases[idx] = orig
            gb[idx] = (up - down) / (2 * h)
        dW.append(gw)
        db.append(gb)
    return dW, db


def random_small_net(rng):
    """Random net (<=4 layers, <=10 nodes/layer) with inputs kept away from
    ReLU kinks so finite differences stay valid."""
    depth = int(rng.integers(1, 5))
    sizes = [int(rng.integers(2, 11)) for _ in range(depth)]
    d = int(rng.integers(2, 11))
    cfg = make_regression_network(d, sizes)
    params = init_params(cfg, seed=int(rng.integers(0, 2**31)))
    while True:
        x = rng.uniform(-1.5, 1.5, size=d)
        trace = network_forward(cfg, params, x)
        margin = min(float(np.min(np.abs(z))) for z in trace.pre_activations)
        if margin > 1e-3:
            return cfg, params, x, trace


def assert_grads_match(analytic, numeric, rel_tol=1e-5):
    for a, f in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
        rel = np.abs(a - f) / denom
        assert np.max(rel) < rel_tol, np.max(rel)


def test_backprop_matches_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(10):
        cfg, params, x, trace = random_small_net(rng)
        target = rng.uniform(-1, 1, size=cfg.output_dim)
        grads = backprop(cfg, params, trace, output_delta(trace, target))
        dW, db = finite_difference_grads(cfg, params, x, target)
        assert_grads_match(grads.weight_grads, dW)
        assert_grads_match(grads.bias_grads, db)


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------

def _unit_grads(params, value=0.0):
    from qmrf.training import Gradients

    return Gradients(
        weight_grads=[np.full_like(lp.weights, value) for lp in params],
        bias_grads=[np.full_like(lp.biases, value) for lp in params],
        deltas=[],
    )


def test_sgd_zero_grads_leave_params():
    cfg = make_regression_network(3, [2])
    params = init_params(cfg, seed=4)
    before = [lp.weights.copy() for lp in params]
    sgd_step(params, _unit_grads(params, 0.0), 0.5)
    for lp, w in zip(params, before):
        np.testing.assert_array_equal(lp.weights, w)


def test_sgd_hand_value():
    params = [LayerParams(weights=np.array([[1.0]]), biases=np.array([0.0]))]
    grads = _unit_grads(params, 2.0)
    sgd_step(params, grads, 0.1)
    assert params[0].weights[0, 0] == pytest.approx(0.8)


def test_sgd_two_steps_equal_one_with_doubled_rate():
    cfg = make_regression_network(2, [2])
    p1 = init_params(cfg, seed=5)
    p2 = init_params(cfg, seed=5)
    g = _unit_grads(p1, 0.37)
    sgd_step(p1, g, 0.1)
    sgd_step(p1, g, 0.1)
    sgd_step(p2, g, 0.2)
    for a, b in zip(p1, p2):
        np.testing.assert_allclose(a.weights, b.weights)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_rejects_empty_dataset():
    cfg = make_regression_network(2, [2])
    with pytest.raises(ValueError):
        train(cfg, TrainConfig(epochs=1, steps_per_epoch=1), np.empty((0, 2)), np.empty((0, 2)))


def test_train_zero_learning_rate_is_inert():
    cfg = make_regression_network(3, [2])
    # single-sample dataset: every step sees the same loss
    x = np.array([[0.2, -0.4, 0.9]])
    t = np.array([[0.5, 0.1]])
    res = train(cfg, TrainConfig(learning_rate=0.0, epochs=3, steps_per_epoch=5, seed=8), x, t)
    reference = init_params(cfg, seed=8)
    for lp, ref in zip(res.params, reference):
        np.testing.assert_array_equal(lp.weights, ref.weights)
        np.testing.assert_array_equal(lp.biases, ref.biases)
    assert len(set(res.loss_history)) == 1  # flat history


def test_train_linear_regression_reaches_optimum():
    # exactly-linear data: a single linear layer must drive MSE below 1e-6
    rng = np.random.default_rng(9)
    A = np.array([[0.5, -1.0, 0.25], [1.5, 0.3, -0.7]])
    c = np.array([0.1, -0.2])
    X = rng.uniform(-1, 1, size=(200, 3))
    Y = X @ A.T + c
    cfg = NetworkConfig(input_dim=3, layers=(LayerSpec(3, 2, "linear"),))
    tcfg = TrainConfig(learning_rate=0.05, epochs=20, steps_per_epoch=100, seed=10)
    res = train(cfg, tcfg, X, Y)
    final = np.mean(
        [mse_loss(network_forward(cfg, res.params, x).outputs, y) for x, y in zip(X, Y)]
    )
    assert final < 1e-6


def test_train_progress_on_toy_task():
    rng = np.random.default_rng(12)
    X = rng.uniform(-1, 1, size=(400, 4))
    Y = np.stack([np.tanh(X @ [0.5, -1, 0.3, 0.2]), X[:, 0] * 0.5 + 0.2], axis=1)
    cfg = make_regression_network(4, [8, 8, 2])
    tcfg = TrainConfig(learning_rate=0.01, epochs=10, steps_per_epoch=100, seed=13)
    res = train(cfg, tcfg, X, Y)
    assert res.loss_history[-1] < 0.5 * res.loss_history[0]


def test_train_divergence_raises_with_location():
    rng = np.random.default_rng(14)
    X = rng.uniform(-1, 1, size=(50, 3)) * 10
    Y = rng.uniform(-1, 1, size=(50, 2)) * 10
    cfg = make_regression_network(3, [4, 2])
    with pytest.raises(TrainingDivergedError) as exc:
        train(cfg, TrainConfig(learning_rate=1e6, epochs=5, steps_per_epoch=50, seed=15), X, Y)
    assert exc.value.epoch >= 1
    assert exc.value.step >= 1


def test_train_seeded_determinism():
    rng = np.random.default_rng(16)
    X = rng.uniform(-1, 1, size=(100, 3))
    Y = rng.uniform(0, 1, size=(100, 2))
    cfg = make_regression_network(3, [4, 2])
    for mode in ("float", "qat"):
        tcfg = TrainConfig(learning_rate=1e-3, epochs=3, steps_per_epoch=30, seed=17, mode=mode)
        r1 = train(cfg, tcfg, X, Y)
        r2 = train(cfg, tcfg, X, Y)
        assert r1.loss_history == r2.loss_history
        for a, b in zip(r1.params, r2.params):
            np.testing.assert_array_equal(a.weights, b.weights)
            np.testing.assert_array_equal(a.biases, b.biases)


def test_qat_training_runs_and_learns_mean():
    rng = np.random.default_rng(18)
    X = rng.uniform(-1, 1, size=(200, 4))
    Y = np.tile([0.4, 0.6], (200, 1)) + 0.05 * rng.normal(size=(200, 2))
    cfg = make_regression_network(4, [6, 2])
    tcfg = TrainConfig(learning_rate=0.01, epochs=8, steps_per_epoch=50, seed=19, mode="qat")
    res = train(cfg, tcfg, X, Y)
    assert all(np.isfinite(res.loss_history))
    assert res.loss_history[-1] < 0.5 * res.loss_history[0]


# ---------------------------------------------------------------------------
# export_integer_model
# ---------------------------------------------------------------------------

@pytest.fixture
def trained_qat_model():
    rng = np.random.default_rng(20)
    X = rng.uniform(-1, 1, size=(150, 5))
    Y = np.stack([0.3 + 0.2 * X[:, 0], 0.5 - 0.1 * X[:, 1]], axis=1)
    cfg = make_regression_network(5, [6, 4, 2])
    tcfg = TrainConfig(learning_rate=0.01, epochs=5, steps_per_epoch=40, seed=21, mode="qat")
    res = train(cfg, tcfg, X, Y)
    return cfg, res.params, X


def test_export_requires_calibration_data(trained_qat_model):
    cfg, params, X = trained_qat_model
    with pytest.raises(ValueError):
        export_integer_model(cfg, params, np.empty((0, 5)))


def test_export_integer_matches_fake_quant_bitwise(trained_qat_model):
    cfg, params, X = trained_qat_model
    exported = export_integer_model(cfg, params, X[:64])
    for x in X[:16]:
        t_int = network_forward(cfg, exported, x, mode="integer")
        t_fq = network_forward(cfg, exported, x, mode="fake-quant")
        for a, b in zip(t_int.int_activations, t_fq.int_activations):
            np.testing.assert_array_equal(a, b)


def test_export_values_in_declared_ranges(trained_qat_model):
    cfg, params, X = trained_qat_model
    exported = export_integer_model(cfg, params, X[:64])
    for lp in exported:
        q = lp.quant
        assert q.weight_q.values.min() >= q.weight_q.qparams.qmin
        assert q.weight_q.values.max() <= q.weight_q.qparams.qmax
        assert q.bias_q.values.min() >= q.bias_q.qparams.qmin
        assert q.bias_q.values.max() <= q.bias_q.qparams.qmax


def test_export_deterministic(trained_qat_model, tmp_path):
    from qmrf.model_io import save_model

    cfg, params, X = trained_qat_model
    e1 = export_integer_model(cfg, params, X[:64])
    e2 = export_integer_model(cfg, params, X[:64])
    p1, p2 = tmp_path / "a.qnn", tmp_path / "b.qnn"
    save_model(p1, cfg, e1)
    save_model(p2, cfg, e2)
    assert p1.read_bytes() == p2.read_bytes()


def test_exported_outputs_track_float_outputs(trained_qat_model):
    # sanity: integer deployment stays close to the float shadow on
    # calibration inputs (well-scaled 8-bit pipeline)
    cfg, params, X = trained_qat_model
    exported = export_integer_model(cfg, params, X[:64])
    diffs = []
    for x in X[:32]:
        yf = network_forward(cfg, params, x, mode="real").outputs
        yi = network_forward(cfg, exported, x, mode="integer").outputs
        diffs.append(np.max(np.abs(yf - yi)))
    assert np.median(diffs) < 0.08
