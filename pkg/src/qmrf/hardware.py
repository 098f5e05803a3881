"""FPGA cost and scheduling model.

Scheduling: P physical node units evaluate a layer's nodes in batches of
P ("semi-parallel"), each batch taking a fixed number of clock cycles.
Forward cycles are therefore

    sum over layers of ceil(n_outputs / P) * cycles_per_node

which yields 56 cycles for the default architecture at P=16 and 4
cycles/node. The backward pass is modeled as a calibrated total (104
cycles for the default architecture, 3 cycles per backprop module); for
other architectures it extrapolates linearly in the number of node
batches, using the rational constant that makes the default architecture
land exactly on the calibrated total.

Timing and cycle math run on exact rationals (fractions.Fraction), so
the calibration points reproduce with zero tolerance: 250e6 samples at
200 MHz and 56+104 cycles/sample is exactly 200 s.

Resource accounting sums per-unit costs (node units, backprop module,
weight/bias BRAM) against the ALVEO U250 capacities (1.7M LUT, 3.4M FF,
12k DSP, 2.6k BRAM). The default unit costs are calibrated so the
default profile totals 145k LUTs / 5k DSPs / 146k FFs; the host link
adds a fixed 83k LUTs / 148k FFs / 150 BRAMs when enabled. The exact
per-unit split is a profile default, overridable from a TOML/JSON file.

`run_scheduled_forward` executes the integer forward pass through the
explicit batch schedule, node by node, and must produce bit-identical
outputs to the direct integer execution of the same model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from .network import NetworkConfig, default_network_config, node_forward_int
from .quantization import QTensor

try:  # stdlib on 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


def as_fraction(x) -> Fraction:
    """Exact rational view of a config number. Floats convert through
    their decimal repr so profile values behave as written."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(str(x))


def _normalize(f: Fraction):
    return int(f) if f.denominator == 1 else f


# ---------------------------------------------------------------------------
# Profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResourceCost:
    luts: int = 0
    dsps: int = 0
    ffs: int = 0
    brams: int = 0

    def __add__(self, other: "ResourceCost") -> "ResourceCost":
        return ResourceCost(
            self.luts + other.luts,
            self.dsps + other.dsps,
            self.ffs + other.ffs,
            self.brams + other.brams,
        )

    def __rmul__(self, k: int) -> "ResourceCost":
        return ResourceCost(k * self.luts, k * self.dsps, k * self.ffs, k * self.brams)


@dataclass(frozen=True)
class BoardCapacity:
    luts: int = 1_700_000
    ffs: int = 3_400_000
    dsps: int = 12_000
    brams: int = 2_600


ALVEO_U250 = BoardCapacity()


@dataclass(frozen=True)
class HardwareProfile:
    """Clock, parallelism, per-unit cycle and resource costs, board limits.

    The defaults describe the calibrated reference design: 16 node units
    at 4 cycles each, a 3-cycle backprop module with a 104-cycle total
    pass, 200 MHz, and unit resource costs whose totals reproduce the
    reference estimate (145k LUTs, 5k DSPs, 146k FFs).
    """

    clock_mhz: float = 200.0
    parallel_nodes: int = 16
    cycles_per_node: int = 4
    cycles_per_backprop_module: int = 3
    backward_cycles_total: int = 104
    node_unit_cost: ResourceCost = field(
        default_factory=lambda: ResourceCost(luts=6_000, dsps=250, ffs=6_500)
    )
    backprop_unit_cost: ResourceCost = field(
        default_factory=lambda: ResourceCost(luts=49_000, dsps=1_000, ffs=42_000)
    )
    pcie_cost: ResourceCost = field(
        default_factory=lambda: ResourceCost(luts=83_000, ffs=148_000, brams=150)
    )
    board: BoardCapacity = field(default_factory=BoardCapacity)
    bram_bytes: int = 4608  # one BRAM36 block holds 4.5 KiB
    weight_bytes: int = 1  # 8-bit weights
    bias_bytes: int = 4  # 32-bit biases at accumulator scale

    def __post_init__(self):
        if as_fraction(self.clock_mhz) <= 0:
            raise ValueError("clock_mhz must be positive")
        for name in (
            "parallel_nodes",
            "cycles_per_node",
            "cycles_per_backprop_module",
            "backward_cycles_total",
            "bram_bytes",
            "weight_bytes",
            "bias_bytes",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CycleReport:
    forward_cycles: int | Fraction
    backward_cycles: int | Fraction
    layer_batches: tuple[int, ...]

    @property
    def cycles_per_sample(self):
        return _normalize(as_fraction(self.forward_cycles) + as_fraction(self.backward_cycles))

    def to_dict(self) -> dict:
        def num(v):
            f = as_fraction(v)
            return int(f) if f.denominator == 1 else {"exact": str(f), "float": float(f)}

        return {
            "forward_cycles": num(self.forward_cycles),
            "backward_cycles": num(self.backward_cycles),
            "cycles_per_sample": num(self.cycles_per_sample),
            "layer_batches": list(self.layer_batches),
        }


@dataclass(frozen=True)
class ResourceReport:
    luts: int
    dsps: int
    ffs: int
    brams: int
    board: BoardCapacity = field(default_factory=BoardCapacity)

    def utilization(self) -> dict[str, float]:
        """Fraction of board capacity per resource; > 1 means overflow."""
        return {
            "luts": self.luts / self.board.luts,
            "dsps": self.dsps / self.board.dsps,
            "ffs": self.ffs / self.board.ffs,
            "brams": self.brams / self.board.brams,
        }

    def overflowing(self) -> list[str]:
        return [name for name, u in self.utilization().items() if u > 1.0]

    def to_dict(self) -> dict:
        util = self.utilization()
        return {
            "totals": {"luts": self.luts, "dsps": self.dsps, "ffs": self.ffs, "brams": self.brams},
            "utilization_percent": {k: round(100 * v, 1) for k, v in util.items()},
            "utilization_percent_rounded": {k: round(100 * v) for k, v in util.items()},
            "overflowing": self.overflowing(),
        }


def format_reports(cycles: CycleReport, resources: ResourceReport, seconds=None) -> str:
    """Human-readable summary table for the estimate workflow."""
    util = resources.utilization()
    lines = [
        "cycle model",
        f"  forward cycles          : {cycles.forward_cycles}",
        f"  backward cycles         : {cycles.backward_cycles}",
        f"  cycles per sample       : {cycles.cycles_per_sample}",
        f"  layer batches           : {list(cycles.layer_batches)}",
        "resources (vs board)",
    ]
    caps = {
        "luts": resources.board.luts,
        "dsps": resources.board.dsps,
        "ffs": resources.board.ffs,
        "brams": resources.board.brams,
    }
    totals = {"luts": resources.luts, "dsps": resources.dsps, "ffs": resources.ffs, "brams": resources.brams}
    for name in ("luts", "dsps", "ffs", "brams"):
        pct = 100 * util[name]
        lines.append(
            f"  {name.upper():5s} {totals[name]:>9,} / {caps[name]:>9,}"
            f"  ({pct:5.1f}%, ~{round(pct):d}%)"
        )
    if resources.overflowing():
        lines.append(f"  OVERFLOW: {', '.join(resources.overflowing())}")
    if seconds is not None:
        f = as_fraction(seconds)
        shown = str(_normalize(f)) if f.denominator == 1 else f"{float(f):.6g} ({f})"
        lines.append(f"training time estimate    : {shown} s")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------

def layer_batch_counts(cfg: NetworkConfig, parallel_nodes: int) -> tuple[int, ...]:
    """Node batches per layer: ceil(n_outputs / P)."""
    return tuple(math.ceil(spec.n_outputs / parallel_nodes) for spec in cfg.layers)


def schedule_forward(cfg: NetworkConfig, hp: HardwareProfile) -> CycleReport:
    batches = layer_batch_counts(cfg, hp.parallel_nodes)
    return CycleReport(
        forward_cycles=sum(batches) * hp.cycles_per_node,
        backward_cycles=0,
        layer_batches=batches,
    )


def backprop_extrapolation_constant(hp: HardwareProfile) -> Fraction:
    """Rational constant k such that the calibrated default architecture
    yields exactly `backward_cycles_total` under
    cycles_per_backprop_module * total_batches * k."""
    default_batches = sum(layer_batch_counts(default_network_config(), hp.parallel_nodes))
    return Fraction(hp.backward_cycles_total, hp.cycles_per_backprop_module * default_batches)


def schedule_backward(cfg: NetworkConfig, hp: HardwareProfile) -> CycleReport:
    """Backward-pass cycles: the calibrated total for the default
    architecture, extrapolated linearly in batch count otherwise."""
    batches = layer_batch_counts(cfg, hp.parallel_nodes)
    k = backprop_extrapolation_constant(hp)
    backward = _normalize(hp.cycles_per_backprop_module * sum(batches) * k)
    return CycleReport(forward_cycles=0, backward_cycles=backward, layer_batches=batches)


def schedule(cfg: NetworkConfig, hp: HardwareProfile) -> CycleReport:
    fwd = schedule_forward(cfg, hp)
    bwd = schedule_backward(cfg, hp)
    return CycleReport(
        forward_cycles=fwd.forward_cycles,
        backward_cycles=bwd.backward_cycles,
        layer_batches=fwd.layer_batches,
    )


def estimate_training_time(n_samples: int, cfg: NetworkConfig, hp: HardwareProfile) -> Fraction:
    """Seconds for one pass over n_samples: n * cycles_per_sample / clock.

    Exact rational arithmetic end to end; the result is a Fraction (an
    integer-valued one when the numbers divide out, e.g. exactly 200 s
    for 250e6 samples at 200 MHz and 160 cycles/sample).
    """
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    cycles = schedule(cfg, hp).cycles_per_sample
    clock_hz = as_fraction(hp.clock_mhz) * 1_000_000
    return _normalize(Fraction(n_samples) * as_fraction(cycles) / clock_hz)


# ---------------------------------------------------------------------------
# Resources
# ---------------------------------------------------------------------------

def memory_brams(cfg: NetworkConfig, hp: HardwareProfile) -> int:
    """BRAM blocks to hold every weight and bias at deployment widths."""
    n_weights = sum(s.n_inputs * s.n_outputs for s in cfg.layers)
    n_biases = sum(s.n_outputs for s in cfg.layers)
    total_bytes = n_weights * hp.weight_bytes + n_biases * hp.bias_bytes
    return math.ceil(total_bytes / hp.bram_bytes)


def estimate_resources(
    cfg: NetworkConfig, hp: HardwareProfile, include_pcie: bool = False
) -> ResourceReport:
    """Core cost = node units + backprop module + parameter memory; the
    PCIe block is added on top when requested. An empty network has an
    empty core."""
    core = ResourceCost()
    if cfg.layers:
        core = (
            hp.parallel_nodes * hp.node_unit_cost
            + hp.backprop_unit_cost
            + ResourceCost(brams=memory_brams(cfg, hp))
        )
    if include_pcie:
        core = core + hp.pcie_cost
    return ResourceReport(
        luts=core.luts, dsps=core.dsps, ffs=core.ffs, brams=core.brams, board=hp.board
    )


# ---------------------------------------------------------------------------
# Scheduled execution
# ---------------------------------------------------------------------------

def run_scheduled_forward(
    cfg: NetworkConfig, params, input_q: QTensor, hp: HardwareProfile
) -> tuple[QTensor, CycleReport]:
    """Execute the integer forward pass through the explicit semi-parallel
    schedule: at most `parallel_nodes` single-node evaluations per batch
    slot, layers in order. Returns the output tensor and the cycles the
    schedule actually incurred.

    This is a deliberately different code path from the vectorized
    integer forward (scalar node arithmetic instead of matrix ops); its
    output must be bit-identical to direct integer-mode execution.
    """
    if not cfg.layers:
        raise ValueError("scheduled execution needs at least one layer")
    if len(params) != len(cfg.layers):
        raise ValueError("parameter count does not match the network depth")
    for i, lp in enumerate(params):
        if lp.quant is None:
            raise ValueError(f"layer {i} has no quantized view; export the model first")
    first = params[0].quant.input_params
    got = input_q.qparams
    if (got.bits, got.scale, got.zero_point) != (first.bits, first.scale, first.zero_point):
        raise ValueError(
            f"input quantization {got} does not match the model input {first}"
        )
    x = input_q.values.reshape(-1)
    if x.shape[0] != cfg.input_dim:
        raise ValueError(f"input length {x.shape[0]} != input_dim {cfg.input_dim}")

    cycles = 0
    batches = []
    out_params = first
    for spec, lp in zip(cfg.layers, params):
        q = lp.quant
        out_params = q.effective_output_params
        y = np.empty(spec.n_outputs, dtype=np.int64)
        layer_batches = 0
        for start in range(0, spec.n_outputs, hp.parallel_nodes):
            for j in range(start, min(start + hp.parallel_nodes, spec.n_outputs)):
                _, out = node_forward_int(
                    x,
                    q.weight_q.values[j],
                    int(q.bias_q.values[j]),
                    spec.activation,
                    in_scale=q.acc_scale,
                    out_params=q.output_params,
                )
                y[j] = out
            layer_batches += 1
            cycles += hp.cycles_per_node
        batches.append(layer_batches)
        x = y
    report = CycleReport(forward_cycles=cycles, backward_cycles=0, layer_batches=tuple(batches))
    return QTensor(x, out_params), report


def locate_first_divergence(
    cfg: NetworkConfig, params, input_q: QTensor, hp: HardwareProfile
):
    """Compare the scheduled and direct integer paths layer by layer.

    Both paths are fed the direct path's layer inputs, so the first layer
    whose outputs differ is the layer whose node arithmetic diverges.
    Returns None when everything matches, else a dict with the layer
    index and both output vectors.
    """
    from .network import network_forward

    direct = network_forward(cfg, params, input_q.values * input_q.qparams.scale, mode="integer")
    x = direct.int_input
    for i, (spec, lp) in enumerate(zip(cfg.layers, params)):
        q = lp.quant
        y = np.empty(spec.n_outputs, dtype=np.int64)
        for j in range(spec.n_outputs):
            _, y[j] = node_forward_int(
                x,
                q.weight_q.values[j],
                int(q.bias_q.values[j]),
                spec.activation,
                in_scale=q.acc_scale,
                out_params=q.output_params,
            )
        expected = direct.int_activations[i]
        if not np.array_equal(y, expected):
            return {
                "layer": i,
                "scheduled": y.tolist(),
                "direct": expected.tolist(),
                "first_node": int(np.argmax(y != expected)),
            }
        x = expected
    return None


# ---------------------------------------------------------------------------
# Profile files
# ---------------------------------------------------------------------------

_COST_FIELDS = ("node_unit_cost", "backprop_unit_cost", "pcie_cost")


def profile_from_dict(data: dict) -> HardwareProfile:
    """Build a profile from a (possibly partial) mapping; unknown keys
    are rejected so typos in profile files fail loudly."""
    known = {f.name for f in fields(HardwareProfile)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown profile keys: {sorted(unknown)}")
    kwargs = dict(data)
    for name in _COST_FIELDS:
        if name in kwargs:
            kwargs[name] = ResourceCost(**kwargs[name])
    if "board" in kwargs:
        kwargs["board"] = BoardCapacity(**kwargs["board"])
    return HardwareProfile(**kwargs)


def load_profile(path) -> HardwareProfile:
    text = open(path, "rb").read()
    name = str(path)
    if name.endswith(".toml"):
        data = tomllib.loads(text.decode("utf-8"))
    else:
        data = json.loads(text.decode("utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: profile must be a table/object")
    return profile_from_dict(data)


def override_clock(hp: HardwareProfile, clock_mhz: float) -> HardwareProfile:
    return replace(hp, clock_mhz=clock_mhz)
