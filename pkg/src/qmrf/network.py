"""Feedforward network description and forward execution.

The same fully connected node

    y = activation( sum_i x_i * w_i + b )

is evaluated through two datapaths:

  * a real-arithmetic (float64) path used as the training reference, and
  * a full-integer path that emulates the hardware: 8-bit inputs and
    weights, exact wide accumulation, integer ReLU on the accumulator,
    then fixed-point requantization to the next layer's 8-bit grid.

The fake-quant view used by quantization-aware training is the integer
path reported in real units, so integer-mode and fake-quant-mode outputs
agree bit for bit by construction.

The default architecture is 7 trained layers with output sizes
(32, 64, 32, 32, 32, 16, 2) on a 200-sample input (real parts then
imaginary parts of a 100-point complex signal). All sizes are
configurable; the hardware scheduling model is calibrated against this
default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantization import (
    QTensor,
    QuantParams,
    qmax,
    qmin,
    requantize,
    requantize_array,
)

ACTIVATIONS = ("relu", "linear")

DEFAULT_INPUT_DIM = 200
DEFAULT_LAYER_SIZES = (32, 64, 32, 32, 32, 16, 2)


def relu(z):
    return np.maximum(z, 0)


def relu_derivative(z):
    """Subgradient convention: derivative at exactly 0 is 0."""
    return (np.asarray(z) > 0).astype(np.float64)


def apply_activation(name: str, z):
    if name == "relu":
        return relu(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_derivative(name: str, z):
    if name == "relu":
        return relu_derivative(z)
    if name == "linear":
        return np.ones_like(np.asarray(z, dtype=np.float64))
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# Architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    n_inputs: int
    n_outputs: int
    activation: str = "relu"

    def __post_init__(self):
        if self.n_inputs < 1 or self.n_outputs < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass(frozen=True)
class NetworkConfig:
    """Ordered fully connected layers; consecutive widths must chain."""

    input_dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        layers = tuple(self.layers)
        prev = self.input_dim
        for i, spec in enumerate(layers):
            if spec.n_inputs != prev:
                raise ValueError(
                    f"layer {i} expects {spec.n_inputs} inputs but receives {prev}"
                )
            prev = spec.n_outputs
        object.__setattr__(self, "layers", layers)

    @property
    def output_dim(self) -> int:
        if not self.layers:
            return self.input_dim
        return self.layers[-1].n_outputs

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(spec.n_outputs for spec in self.layers)


def make_regression_network(input_dim: int, layer_sizes) -> NetworkConfig:
    """Standard head: ReLU on every layer except a linear output layer."""
    sizes = list(layer_sizes)
    if not sizes:
        raise ValueError("need at least one layer")
    layers = []
    prev = input_dim
    for i, n in enumerate(sizes):
        act = "linear" if i == len(sizes) - 1 else "relu"
        layers.append(LayerSpec(n_inputs=prev, n_outputs=n, activation=act))
        prev = n
    return NetworkConfig(input_dim=input_dim, layers=tuple(layers))


def default_network_config() -> NetworkConfig:
    """The T1/T2 regression network: hidden ReLU layers, 2 linear outputs."""
    return make_regression_network(DEFAULT_INPUT_DIM, DEFAULT_LAYER_SIZES)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerQuantization:
    """Integer view of one layer.

    weight_q      8-bit weights, shape (n_outputs, n_inputs)
    bias_q        32-bit bias at the accumulator scale in_scale * w_scale
    input_params  quantization of the activations feeding this layer
    output_params quantization of the layer output; None means the output
                  stays at the accumulator scale (used for the final
                  linear layer, whose values feed no further integer layer)
    """

    weight_q: QTensor
    bias_q: QTensor
    input_params: QuantParams
    output_params: QuantParams | None

    @property
    def acc_scale(self) -> float:
        return self.input_params.scale * self.weight_q.qparams.scale

    @property
    def effective_output_params(self) -> QuantParams:
        if self.output_params is not None:
            return self.output_params
        return QuantParams(bits=32, scale=self.acc_scale)


@dataclass
class LayerParams:
    """Float shadow weights/biases plus an optional quantized view."""

    weights: np.ndarray  # (n_outputs, n_inputs)
    biases: np.ndarray  # (n_outputs,)
    quant: LayerQuantization | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-D matrix")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("biases must have one entry per output node")


def init_params(cfg: NetworkConfig, seed: int = 0) -> list[LayerParams]:
    """Fan-based uniform init in +-sqrt(6 / (n_in + n_out)), zero biases.

    Draws come from a dedicated stream (seed, 0) so parameter init never
    interferes with batch sampling streams.
    """
    rng = np.random.default_rng([seed, 0])
    params = []
    for spec in cfg.layers:
        lim = np.sqrt(6.0 / (spec.n_inputs + spec.n_outputs))
        w = rng.uniform(-lim, lim, size=(spec.n_outputs, spec.n_inputs))
        params.append(LayerParams(weights=w, biases=np.zeros(spec.n_outputs)))
    return params


def check_params(cfg: NetworkConfig, params) -> None:
    if len(params) != len(cfg.layers):
        raise ValueError(
            f"config has {len(cfg.layers)} layers but got {len(params)} parameter sets"
        )
    for i, (spec, lp) in enumerate(zip(cfg.layers, params)):
        if lp.weights.shape != (spec.n_outputs, spec.n_inputs):
            raise ValueError(
                f"layer {i}: weights shape {lp.weights.shape} does not match "
                f"spec ({spec.n_outputs}, {spec.n_inputs})"
            )


# ---------------------------------------------------------------------------
# Node-level execution
# ---------------------------------------------------------------------------

def node_forward_real(x, w, b: float, activation: str = "relu") -> float:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != w.shape:
        raise ValueError(f"input/weight length mismatch: {x.shape} vs {w.shape}")
    return float(apply_activation(activation, float(x @ w) + b))


def node_forward_int(
    x,
    w,
    b: int,
    activation: str = "relu",
    in_scale: float | None = None,
    out_params: QuantParams | None = None,
    acc_bits: int = 32,
) -> tuple[int, int]:
    """Single-node integer datapath: exact accumulate, integer activation,
    optional requantization.

    Returns (acc, out): the raw accumulator sum x.w + b and the node
    output. Integer ReLU is max(0, acc), applied to the accumulator before
    requantization (the requantizer is monotone, so the order is
    equivalent and fixes one canonical datapath). Without `out_params`
    the output stays at the accumulator scale.

    The accumulation runs on Python integers; if |acc| exceeds the signed
    `acc_bits` range an OverflowError flags the misconfigured widths.
    """
    xs = [int(v) for v in np.asarray(x).reshape(-1)]
    ws = [int(v) for v in np.asarray(w).reshape(-1)]
    if len(xs) != len(ws):
        raise ValueError(f"input/weight length mismatch: {len(xs)} vs {len(ws)}")
    acc = sum(xv * wv for xv, wv in zip(xs, ws)) + int(b)
    if not (qmin(acc_bits) <= acc <= qmax(acc_bits)):
        raise OverflowError(
            f"accumulator {acc} exceeds the signed {acc_bits}-bit range"
        )
    out = max(acc, 0) if activation == "relu" else acc
    if out_params is not None:
        if in_scale is None:
            raise ValueError("requantization needs the accumulator scale in_scale")
        out = requantize(out, in_scale, out_params)
    return acc, out


# ---------------------------------------------------------------------------
# Network-level execution
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Everything backpropagation needs from one forward pass.

    pre_activations[l] holds z^l, activations[l] holds y^l = sigma(z^l);
    `inputs` is y^0. Quantized modes additionally record the integer
    activations actually produced by the hardware path.
    """

    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)
    mode: str = "real"
    int_input: np.ndarray | None = None
    int_activations: list[np.ndarray] | None = None

    @property
    def outputs(self) -> np.ndarray:
        return self.activations[-1] if self.activations else self.inputs

    def activation_into(self, layer: int) -> np.ndarray:
        """y^{layer-1}: the vector feeding `layer` (y^0 for the first)."""
        return self.inputs if layer == 0 else self.activations[layer - 1]


def integer_layer_forward(
    x_int: np.ndarray,
    in_scale: float,
    weight_int: np.ndarray,
    w_scale: float,
    bias_int: np.ndarray,
    activation: str,
    out_params: QuantParams | None,
    acc_bits: int = 32,
) -> tuple[np.ndarray, float, np.ndarray, QuantParams]:
    """Vectorized layer step of the integer datapath.

    Returns (acc, acc_scale, y_int, y_params). acc is the exact int64
    accumulator vector at scale in_scale * w_scale; y_int is the layer
    output after integer activation and (if out_params is given)
    requantization.
    """
    x_int = np.asarray(x_int, dtype=np.int64)
    weight_int = np.asarray(weight_int, dtype=np.int64)
    bias_int = np.asarray(bias_int, dtype=np.int64)
    acc = weight_int @ x_int + bias_int
    if acc.size and (acc.min() < qmin(acc_bits) or acc.max() > qmax(acc_bits)):
        raise OverflowError(
            f"layer accumulator exceeds the signed {acc_bits}-bit range"
        )
    acc_scale = in_scale * w_scale
    acted = np.maximum(acc, 0) if activation == "relu" else acc
    if out_params is None:
        y_params = QuantParams(bits=acc_bits, scale=acc_scale)
        y_int = acted
    else:
        y_params = out_params
        y_int = requantize_array(acted, acc_scale, out_params)
    return acc, acc_scale, y_int, y_params


def _forward_real(cfg: NetworkConfig, params, x: np.ndarray) -> ForwardTrace:
    trace = ForwardTrace(inputs=x, mode="real")
    y = x
    for spec, lp in zip(cfg.layers, params):
        z = lp.weights @ y + lp.biases
        y = apply_activation(spec.activation, z)
        trace.pre_activations.append(z)
        trace.activations.append(y)
    return trace


def _forward_quantized(cfg: NetworkConfig, params, x: np.ndarray, mode: str) -> ForwardTrace:
    from .quantization import quantize  # local import keeps module load light

    if not cfg.layers:
        raise ValueError("quantized execution needs at least one layer")
    for i, lp in enumerate(params):
        if lp.quant is None:
            raise ValueError(f"layer {i} has no quantized view; export the model first")
    x_q = quantize(x, params[0].quant.input_params)
    trace = ForwardTrace(inputs=x, mode=mode, int_input=x_q.values, int_activations=[])
    y_int = x_q.values
    y_params = params[0].quant.input_params
    for i, (spec, lp) in enumerate(zip(cfg.layers, params)):
        q = lp.quant
        if (q.input_params.scale, q.input_params.bits, q.input_params.zero_point) != (
            y_params.scale,
            y_params.bits,
            y_params.zero_point,
        ):
            raise ValueError(
                f"layer {i}: input quantization {q.input_params} does not match "
                f"the upstream output quantization {y_params}"
            )
        acc, acc_scale, y_int, y_params = integer_layer_forward(
            y_int,
            q.input_params.scale,
            q.weight_q.values,
            q.weight_q.qparams.scale,
            q.bias_q.values,
            spec.activation,
            q.output_params,
        )
        trace.pre_activations.append(acc.astype(np.float64) * acc_scale)
        trace.activations.append(
            (y_int - y_params.zero_point).astype(np.float64) * y_params.scale
        )
        trace.int_activations.append(y_int)
    return trace


def network_forward(cfg: NetworkConfig, params, input_vec, mode: str = "real") -> ForwardTrace:
    """Run the whole network on one input vector and return the trace.

    mode "real" uses the float64 shadow parameters; "fake-quant" and
    "integer" both execute the integer datapath (they are the same
    computation, reported in real units and integers respectively).
    """
    check_params(cfg, params)
    x = np.asarray(input_vec, dtype=np.float64).reshape(-1)
    if x.shape[0] != cfg.input_dim:
        raise ValueError(f"input length {x.shape[0]} != input_dim {cfg.input_dim}")
    mode = mode.replace("-", "_")
    if mode == "real":
        return _forward_real(cfg, params, x)
    if mode in ("fake_quant", "integer"):
        return _forward_quantized(cfg, params, x, mode)
    raise ValueError(f"unknown mode {mode!r}")
