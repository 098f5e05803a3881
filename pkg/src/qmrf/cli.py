"""Command-line workflows: generate, train, eval, verify, estimate.

Every command is deterministic given its flags and seed, never mutates
its input files, and emits exactly one run manifest: written alongside
the primary output file when the command produces one, embedded in the
printed report otherwise.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .hardware import (
    HardwareProfile,
    estimate_resources,
    estimate_training_time,
    format_reports,
    load_profile,
    locate_first_divergence,
    override_clock,
    run_scheduled_forward,
    schedule,
)
from .mrf import (
    DatasetSpec,
    TargetNormalization,
    evaluate,
    format_metrics_table,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .model_io import load_model, save_model
from .network import NetworkConfig, default_network_config, make_regression_network, network_forward
from .quantization import quantize
from .training import TrainConfig, TrainingDivergedError, export_integer_model, train

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY_FAILED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want 1
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    configs: list[str]
    outputs: list[str]
    version: str
    timestamp: str

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _manifest(command, argv, seed, configs, outputs) -> RunManifest:
    return RunManifest(
        command=command,
        argv=list(argv),
        seed=seed,
        configs=[str(c) for c in configs if c],
        outputs=[str(o) for o in outputs if o],
        version=__version__,
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )


def _write_manifest(manifest: RunManifest, primary_output) -> None:
    path = Path(f"{primary_output}.manifest.json")
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def _load_config_file(path) -> dict:
    text = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        data = tomllib.loads(text.decode("utf-8"))
    else:
        data = json.loads(text.decode("utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a table/object at top level")
    return data


def _network_from_args(args) -> NetworkConfig:
    if getattr(args, "net", None):
        data = _load_config_file(args.net)
        unknown = set(data) - {"input_dim", "layer_sizes"}
        if unknown:
            raise ValueError(f"{args.net}: unknown network config keys {sorted(unknown)}")
        return make_regression_network(data["input_dim"], data["layer_sizes"])
    return default_network_config()


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _cmd_generate(args, argv) -> int:
    try:
        overrides = {}
        if args.spec:
            file_cfg = _load_config_file(args.spec)
            known = {f.name for f in fields(DatasetSpec)}
            unknown = set(file_cfg) - known
            if unknown:
                raise ValueError(f"{args.spec}: unknown dataset spec keys {sorted(unknown)}")
            for key in ("t1_range", "t2_range", "snr_range", "phase_range"):
                if key in file_cfg:
                    file_cfg[key] = tuple(file_cfg[key])
            overrides.update(file_cfg)
        for flag, key in (
            ("n", "n_samples"),
            ("seed", "seed"),
            ("length", "length"),
            ("tr", "tr_ms"),
            ("te", "te_ms"),
        ):
            value = getattr(args, flag)
            if value is not None:
                overrides[key] = value
        for lo_flag, hi_flag, key in (
            ("t1_min", "t1_max", "t1_range"),
            ("t2_min", "t2_max", "t2_range"),
            ("snr_min", "snr_max", "snr_range"),
        ):
            lo, hi = getattr(args, lo_flag), getattr(args, hi_flag)
            if lo is not None or hi is not None:
                base = overrides.get(key, getattr(DatasetSpec(n_samples=0), key))
                overrides[key] = (lo if lo is not None else base[0],
                                  hi if hi is not None else base[1])
        if "n_samples" not in overrides:
            raise ValueError("number of samples required (--n or spec file)")
        spec = DatasetSpec(**overrides)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(str(exc)) from exc

    ds = generate_dataset(spec)
    save_dataset(args.out, ds)
    _write_manifest(
        _manifest("generate", argv, spec.seed, [args.spec], [args.out]), args.out
    )
    print(f"wrote {len(ds)} samples (L={spec.length}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config_from_args(args) -> TrainConfig:
    values = {
        "learning_rate": 1e-4,
        "epochs": 20,  # desk-scale defaults; full-scale reachable via flags
        "steps_per_epoch": 200,
        "batch_size": 1,
        "seed": 0,
        "mode": "float",
    }
    if args.train_config:
        file_cfg = _load_config_file(args.train_config)
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(file_cfg) - known
        if unknown:
            raise ValueError(f"{args.train_config}: unknown train config keys {sorted(unknown)}")
        values.update(file_cfg)
    for flag, key in (
        ("lr", "learning_rate"),
        ("epochs", "epochs"),
        ("steps", "steps_per_epoch"),
        ("batch", "batch_size"),
        ("seed", "seed"),
        ("mode", "mode"),
    ):
        value = getattr(args, flag)
        if value is not None:
            values[key] = value
    return TrainConfig(**values)


def _cmd_train(args, argv) -> int:
    try:
        tcfg = _train_config_from_args(args)
        cfg = _network_from_args(args)
        norm = TargetNormalization(t1_max=args.t1_max, t2_max=args.t2_max)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(str(exc)) from exc

    ds = load_dataset(args.data)
    inputs = ds.signals.astype(np.float64)
    targets = norm.normalize(ds.t1_ms, ds.t2_ms)
    result = train(cfg, tcfg, inputs, targets)

    params = result.params
    if tcfg.mode == "qat":
        n_calib = min(args.calibration, len(ds))
        params = export_integer_model(cfg, params, inputs[:n_calib])
    save_model(args.out, cfg, params, normalization=norm.to_dict())

    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    with open(loss_csv, "w") as f:
        f.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(result.loss_history, start=1):
            f.write(f"{epoch},{loss!r}\n")

    _write_manifest(
        _manifest("train", argv, tcfg.seed,
                  [args.net, args.train_config, args.data], [args.out, loss_csv]),
        args.out,
    )
    print(
        f"trained {tcfg.mode} model: epochs={tcfg.epochs} steps={tcfg.steps_per_epoch} "
        f"lr={tcfg.learning_rate} first_loss={result.loss_history[0]:.6f} "
        f"last_loss={result.loss_history[-1]:.6f}"
    )
    print(f"model: {args.out}\nloss history: {loss_csv}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def predict_batch(cfg, params, signals: np.ndarray, mode: str) -> np.ndarray:
    return np.array(
        [network_forward(cfg, params, x, mode=mode).outputs for x in signals]
    )


def _cmd_eval(args, argv) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data)
    if ds.signals.shape[1] != model.cfg.input_dim:
        raise ValueError(
            f"dataset signals have {ds.signals.shape[1]} features but the model "
            f"expects {model.cfg.input_dim}"
        )
    mode = "integer" if model.params[0].quant is not None else "real"
    norm = TargetNormalization.from_dict(model.normalization)
    preds = predict_batch(model.cfg, model.params, ds.signals.astype(np.float64), mode)
    report = evaluate(norm.denormalize(preds), ds.targets_ms())

    label = "quantized" if mode == "integer" else "float"
    payload = {
        "model": str(args.model),
        "dataset": str(args.data),
        "mode": mode,
        "n_samples": len(ds),
        "metrics": report.to_dict(),
    }
    manifest = _manifest("eval", argv, None, [args.model, args.data],
                         [args.out] if args.out else [])
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _write_manifest(manifest, args.out)
    else:
        payload["manifest"] = manifest.to_dict()
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(format_metrics_table({label: report}))
        if not args.out:
            print(f"manifest: {json.dumps(manifest.to_dict(), sort_keys=True)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _cmd_verify(args, argv) -> int:
    model = load_model(args.model)
    if model.params[0].quant is None:
        raise ValueError("model has no integer parameters; train with --mode qat first")
    hp = HardwareProfile()
    cfg, params = model.cfg, model.params
    in_params = params[0].quant.input_params
    rng = np.random.default_rng(args.seed)

    if args.trials == 0:
        print("WARNING: 0 trials requested; vacuous pass")
        return EXIT_OK

    lo = in_params.qmin * in_params.scale
    hi = in_params.qmax * in_params.scale
    manifest = _manifest("verify", argv, args.seed, [args.model], [])
    for trial in range(args.trials):
        x = rng.uniform(lo, hi, size=cfg.input_dim)
        x_q = quantize(x, in_params)
        scheduled, _ = run_scheduled_forward(cfg, params, x_q, hp)
        direct = network_forward(cfg, params, x, mode="integer")
        if not np.array_equal(scheduled.values, direct.int_activations[-1]):
            where = locate_first_divergence(cfg, params, x_q, hp)
            print(f"FAIL: trial {trial}: scheduled != direct integer forward")
            print(f"  scheduled output: {scheduled.values.tolist()}")
            print(f"  direct output   : {direct.int_activations[-1].tolist()}")
            if where is not None:
                print(
                    f"  first divergence at layer {where['layer']}, "
                    f"node {where['first_node']}"
                )
                print(f"    scheduled: {where['scheduled']}")
                print(f"    direct   : {where['direct']}")
            print(f"manifest: {json.dumps(manifest.to_dict(), sort_keys=True)}")
            return EXIT_VERIFY_FAILED

    print(f"PASS: {args.trials} trials, zero bit mismatches")
    print(f"manifest: {json.dumps(manifest.to_dict(), sort_keys=True)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _cmd_estimate(args, argv) -> int:
    try:
        cfg = _network_from_args(args)
        hp = load_profile(args.profile) if args.profile else HardwareProfile()
        if args.clock is not None:
            hp = override_clock(hp, args.clock)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(str(exc)) from exc

    cycles = schedule(cfg, hp)
    resources = estimate_resources(cfg, hp, include_pcie=args.pcie)
    seconds = estimate_training_time(args.samples, cfg, hp)

    seconds_json = (
        int(seconds)
        if getattr(seconds, "denominator", 1) == 1
        else {"exact": str(seconds), "float": float(seconds)}
    )
    payload = {
        "clock_mhz": hp.clock_mhz,
        "samples": args.samples,
        "cycles": cycles.to_dict(),
        "resources": resources.to_dict(),
        "include_pcie": args.pcie,
        "training_time_seconds": seconds_json,
    }
    manifest = _manifest("estimate", argv, None,
                         [args.net, args.profile], [args.out] if args.out else [])
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _write_manifest(manifest, args.out)
    else:
        payload["manifest"] = manifest.to_dict()
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(format_reports(cycles, resources, seconds=seconds))
        if not args.out:
            print(f"manifest: {json.dumps(manifest.to_dict(), sort_keys=True)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="qmrf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qmrf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a surrogate signal dataset")
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="dataset spec file (TOML/JSON)")
    g.add_argument("--t1-min", dest="t1_min", type=float)
    g.add_argument("--t1-max", dest="t1_max", type=float)
    g.add_argument("--t2-min", dest="t2_min", type=float)
    g.add_argument("--t2-max", dest="t2_max", type=float)
    g.add_argument("--snr-min", dest="snr_min", type=float)
    g.add_argument("--snr-max", dest="snr_max", type=float)
    g.add_argument("--length", type=int)
    g.add_argument("--tr", type=float, help="repetition-time constant in ms")
    g.add_argument("--te", type=float, help="echo-time constant in ms")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model container path")
    t.add_argument("--net", help="network config file (TOML/JSON)")
    t.add_argument("--train-config", dest="train_config", help="train config file (TOML/JSON)")
    t.add_argument("--mode", choices=("float", "qat"), default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--steps", type=int, default=None, help="gradient steps per epoch")
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--calibration", type=int, default=1024,
                   help="calibration samples for the integer export (qat)")
    t.add_argument("--loss-csv", dest="loss_csv", default=None)
    t.add_argument("--t1-max", dest="t1_max", type=float, default=4000.0)
    t.add_argument("--t2-max", dest="t2_max", type=float, default=2000.0)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a model on a dataset file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=_cmd_eval)

    v = sub.add_parser("verify", help="scheduled vs direct integer execution check")
    v.add_argument("--model", required=True)
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=_cmd_verify)

    s = sub.add_parser("estimate", help="cycle, timing, and resource estimates")
    s.add_argument("--net", help="network config file (TOML/JSON)")
    s.add_argument("--profile", help="hardware profile file (TOML/JSON)")
    s.add_argument("--samples", type=int, default=250_000_000)
    s.add_argument("--pcie", action="store_true", help="include the host-link block")
    s.add_argument("--clock", type=float, default=None, help="clock override in MHz")
    s.add_argument("--out", help="write the JSON report here")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=_cmd_estimate)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, OverflowError, RuntimeError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
