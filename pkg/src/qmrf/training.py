"""Supervised training: MSE loss, backpropagation, SGD, and the
quantization-aware training (QAT) loop.

Backpropagation follows the delta recursion

    delta^l = ((w^{l+1})^T delta^{l+1}) o sigma'(z^l)
    dL/dw^l = outer(delta^l, y^{l-1})        dL/db^l = delta^l

with the output-layer boundary case for MSE + linear activation,
delta^L = (2 / n_out) * (y^L - target). The optimizer is plain
stochastic gradient descent; updates always land on the float64 shadow
parameters.

In QAT mode every forward pass quantizes weights and activations with
per-step max-abs scales and runs the exact integer datapath; gradients
flow through the quantizers with the straight-through estimator
(identity inside the clamp range, zero outside). Max-abs calibration
never clamps the tensor it was computed from, so during training the
STE masks are all-ones; they are still applied so externally fixed
scales behave correctly.

`export_integer_model` freezes the quantized views after training:
weight scales from the trained shadows, activation scales calibrated
layer by layer from the integer pipeline itself over a calibration set,
biases at the accumulator scale. The exported model reproduces the
fake-quant forward bit for bit because both run the same kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    ForwardTrace,
    LayerParams,
    LayerQuantization,
    NetworkConfig,
    activation_derivative,
    check_params,
    init_params,
    network_forward,
)
from .quantization import (
    QuantParams,
    dequantize,
    qmax,
    quantize,
    quantize_bias,
    requantize_array,
    ste_mask,
    symmetric_params,
)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the epoch/step where it happened."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(
            f"training diverged: non-finite loss {loss} at epoch {epoch}, step {step}"
        )
        self.epoch = epoch
        self.step = step


class _NonFiniteLoss(Exception):
    """Internal signal raised before backprop touches non-finite values."""

    def __init__(self, loss: float):
        self.loss = loss


@dataclass
class Gradients:
    """Per-layer dL/dW, dL/db and the backpropagated deltas."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    deltas: list[np.ndarray]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 500
    steps_per_epoch: int = 1000
    batch_size: int = 1
    seed: int = 0
    mode: str = "float"  # "float" | "qat"
    weight_bits: int = 8
    activation_bits: int = 8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in ("float", "qat"):
            raise ValueError(f"mode must be 'float' or 'qat', got {self.mode!r}")


@dataclass
class TrainResult:
    params: list[LayerParams]
    loss_history: list[float]  # per-epoch mean of the step losses


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def output_delta(trace: ForwardTrace, target) -> np.ndarray:
    """delta^L for MSE loss and a linear output layer: (2/n) * (y^L - t)."""
    if not trace.activations:
        raise ValueError("trace holds no layer activations")
    y = trace.outputs
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {target.shape}")
    return (2.0 / y.shape[0]) * (y - target)


def backprop(cfg: NetworkConfig, params, trace: ForwardTrace, delta_last) -> Gradients:
    """Run the delta recursion from the output layer back to the input.

    `params` must be the parameters actually used in the forward pass; in
    QAT mode that means the fake-quantized weights.
    """
    check_params(cfg, params)
    n_layers = len(cfg.layers)
    if len(trace.activations) != n_layers:
        raise ValueError("trace does not match the network depth")
    delta = np.asarray(delta_last, dtype=np.float64)
    if delta.shape != (cfg.layers[-1].n_outputs,):
        raise ValueError("delta_last has the wrong shape")

    weight_grads: list = [None] * n_layers
    bias_grads: list = [None] * n_layers
    deltas: list = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        deltas[l] = delta
        weight_grads[l] = np.outer(delta, trace.activation_into(l))
        bias_grads[l] = delta
        if l > 0:
            sigma_prime = activation_derivative(
                cfg.layers[l - 1].activation, trace.pre_activations[l - 1]
            )
            delta = (params[l].weights.T @ delta) * sigma_prime
    return Gradients(weight_grads=weight_grads, bias_grads=bias_grads, deltas=deltas)


def sgd_step(params, grads: Gradients, learning_rate: float):
    """w <- w - lr * dW, b <- b - lr * db, in place on the float shadows."""
    for lp, dw, db in zip(params, grads.weight_grads, grads.bias_grads):
        lp.weights -= learning_rate * dw
        lp.biases -= learning_rate * db
    return params


# ---------------------------------------------------------------------------
# QAT forward/backward
# ---------------------------------------------------------------------------

@dataclass
class _QatStep:
    """One sample's QAT forward: trace plus the fake-quant parameter view."""

    trace: ForwardTrace
    effective_params: list[LayerParams]
    weight_masks: list[np.ndarray]
    bias_masks: list[np.ndarray]


def _qat_forward(cfg: NetworkConfig, params, x: np.ndarray, tcfg: TrainConfig) -> _QatStep:
    """Integer forward with per-step max-abs scales, reported in real units."""
    w_bits, a_bits = tcfg.weight_bits, tcfg.activation_bits
    in_params = symmetric_params(x, a_bits)
    x_int = quantize(x, in_params).values

    trace = ForwardTrace(inputs=x, mode="qat", int_input=x_int, int_activations=[])
    effective, w_masks, b_masks = [], [], []
    y_int, in_scale = x_int, in_params.scale
    for i, (spec, lp) in enumerate(zip(cfg.layers, params)):
        wp = symmetric_params(lp.weights, w_bits)
        w_q = quantize(lp.weights, wp)
        b_q = quantize_bias(lp.biases, in_scale, wp.scale)
        acc = w_q.values @ y_int + b_q.values
        if acc.size and (acc.min() < -(2**31) or acc.max() >= 2**31):
            raise OverflowError(f"layer {i} accumulator exceeds the 32-bit range")
        acc_scale = in_scale * wp.scale
        acted = np.maximum(acc, 0) if spec.activation == "relu" else acc
        if i == len(cfg.layers) - 1:
            # output stays at the accumulator scale, as deployed
            y_int, out_scale = acted, acc_scale
        else:
            # activation scale from this step's own pre-quantization values
            max_abs = float(np.abs(acted).max()) * acc_scale if acted.size else 0.0
            out_params = QuantParams(
                bits=a_bits, scale=max_abs / qmax(a_bits) if max_abs > 0 else 1.0
            )
            y_int = requantize_array(acted, acc_scale, out_params)
            out_scale = out_params.scale
        trace.pre_activations.append(acc.astype(np.float64) * acc_scale)
        trace.activations.append(y_int.astype(np.float64) * out_scale)
        trace.int_activations.append(y_int)
        effective.append(LayerParams(weights=dequantize(w_q), biases=dequantize(b_q)))
        w_masks.append(ste_mask(lp.weights, wp))
        b_masks.append(ste_mask(lp.biases, b_q.qparams))
        in_scale = out_scale
    return _QatStep(trace, effective, w_masks, b_masks)


def _sample_gradients(cfg, params, x, target, tcfg: TrainConfig):
    """Forward + backward for one sample; returns (loss, Gradients)."""
    if tcfg.mode == "qat":
        if not all(
            np.all(np.isfinite(lp.weights)) and np.all(np.isfinite(lp.biases))
            for lp in params
        ):
            raise _NonFiniteLoss(float("nan"))
        step = _qat_forward(cfg, params, x, tcfg)
        loss = mse_loss(step.trace.outputs, target)
        if not np.isfinite(loss):
            raise _NonFiniteLoss(loss)
        grads = backprop(cfg, step.effective_params, step.trace, output_delta(step.trace, target))
        for g, m in zip(grads.weight_grads, step.weight_masks):
            g *= m
        for g, m in zip(grads.bias_grads, step.bias_masks):
            g *= m
        return loss, grads
    trace = network_forward(cfg, params, x, mode="real")
    loss = mse_loss(trace.outputs, target)
    if not np.isfinite(loss):
        raise _NonFiniteLoss(loss)
    grads = backprop(cfg, params, trace, output_delta(trace, target))
    return loss, grads


def train(cfg: NetworkConfig, tcfg: TrainConfig, inputs, targets) -> TrainResult:
    """SGD loop over epochs x steps_per_epoch with seeded batch sampling.

    `inputs` is (n, input_dim), `targets` (n, output_dim) with targets
    already normalized by the caller. Batch indices come from the stream
    (seed, 1), so runs are bit-reproducible given identical arguments.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (n, input_dim) array")
    if targets.shape != (inputs.shape[0], cfg.output_dim):
        raise ValueError(
            f"targets shape {targets.shape} does not match "
            f"({inputs.shape[0]}, {cfg.output_dim})"
        )
    if inputs.shape[1] != cfg.input_dim:
        raise ValueError(f"inputs have {inputs.shape[1]} features, expected {cfg.input_dim}")

    params = init_params(cfg, tcfg.seed)
    rng = np.random.default_rng([tcfg.seed, 1])
    n = inputs.shape[0]
    history = []
    for epoch in range(tcfg.epochs):
        epoch_losses = np.empty(tcfg.steps_per_epoch)
        for step in range(tcfg.steps_per_epoch):
            idx = rng.integers(0, n, size=tcfg.batch_size)
            batch_loss = 0.0
            summed: Gradients | None = None
            try:
                # divergence is detected via the loss check; let the step
                # that blows up run to it without overflow warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    for j in idx:
                        loss, grads = _sample_gradients(cfg, params, inputs[j], targets[j], tcfg)
                        batch_loss += loss
                        if summed is None:
                            summed = grads
                        else:
                            for a, b in zip(summed.weight_grads, grads.weight_grads):
                                a += b
                            for a, b in zip(summed.bias_grads, grads.bias_grads):
                                a += b
            except _NonFiniteLoss as bad:
                raise TrainingDivergedError(epoch + 1, step + 1, bad.loss) from None
            batch_loss /= tcfg.batch_size
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch + 1, step + 1, batch_loss)
            if tcfg.batch_size > 1:
                for g in summed.weight_grads:
                    g /= tcfg.batch_size
                for g in summed.bias_grads:
                    g /= tcfg.batch_size
            sgd_step(params, summed, tcfg.learning_rate)
            epoch_losses[step] = batch_loss
        history.append(float(epoch_losses.mean()))
    return TrainResult(params=params, loss_history=history)


# ---------------------------------------------------------------------------
# Integer export
# ---------------------------------------------------------------------------

def export_integer_model(
    cfg: NetworkConfig,
    params,
    calibration_inputs,
    weight_bits: int = 8,
    activation_bits: int = 8,
    acc_bits: int = 32,
) -> list[LayerParams]:
    """Freeze an integer-only parameter set from trained shadows.

    Activation scales are calibrated layer by layer by running the
    integer pipeline itself over `calibration_inputs` (max-abs rule), so
    the exported constants describe exactly the datapath they will run
    on. The final linear layer keeps its output at the accumulator scale;
    every hidden layer gets a requantization constant back to the
    `activation_bits` grid.
    """
    check_params(cfg, params)
    calib = np.asarray(calibration_inputs, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] == 0:
        raise ValueError("calibration set must be a non-empty (n, input_dim) array")
    if calib.shape[1] != cfg.input_dim:
        raise ValueError(
            f"calibration inputs have {calib.shape[1]} features, expected {cfg.input_dim}"
        )

    in_params = symmetric_params(calib, activation_bits)
    x_int = quantize(calib, in_params).values  # (n, d)
    current_in = in_params
    exported = []
    for i, (spec, lp) in enumerate(zip(cfg.layers, params)):
        wp = symmetric_params(lp.weights, weight_bits)
        w_q = quantize(lp.weights, wp)
        b_q = quantize_bias(lp.biases, current_in.scale, wp.scale, bits=acc_bits)
        acc = x_int @ w_q.values.T + b_q.values  # (n, out) exact in int64
        if acc.size and (acc.min() < -(2 ** (acc_bits - 1)) or acc.max() >= 2 ** (acc_bits - 1)):
            raise OverflowError(f"layer {i} calibration overflows the {acc_bits}-bit accumulator")
        acc_scale = current_in.scale * wp.scale
        last = i == len(cfg.layers) - 1
        if last:
            out_params = None
        else:
            acted = np.maximum(acc, 0) if spec.activation == "relu" else acc
            max_abs = float(np.abs(acted).max()) * acc_scale if acted.size else 0.0
            out_params = QuantParams(
                bits=activation_bits,
                scale=max_abs / qmax(activation_bits) if max_abs > 0 else 1.0,
            )
            x_int = requantize_array(acted, acc_scale, out_params)
        quant = LayerQuantization(
            weight_q=w_q, bias_q=b_q, input_params=current_in, output_params=out_params
        )
        exported.append(
            LayerParams(weights=lp.weights.copy(), biases=lp.biases.copy(), quant=quant)
        )
        if not last:
            current_in = out_params
    return exported
