"""Surrogate MRF signal generation, dataset persistence, and error metrics.

The generator replaces a full MR sequence simulation with a smooth
deterministic signal that preserves the shape of the inverse problem
(complex signal -> T1, T2):

    s_k = exp(i*phase) * (1 - exp(-k*TR/t1)) * exp(-k*TE/t2),  k = 1..L

with fixed constants TR and TE (defaults 10 ms and 2 ms). The first
factor rises with the longitudinal recovery rate (t1), the second decays
with the transverse rate (t2), so the map (t1, t2) -> signal is
injective over the generator ranges and the regression task is
well-posed. Circular complex Gaussian noise is added per sample with

    SNR = rms(signal) / rms(noise),

i.e. each real component gets standard deviation rms(signal)/(snr*sqrt(2)).

Every sample is a pure function of (seed, index): generation is
order-independent and parallelizable, and the same spec always produces
byte-identical dataset files.

Dataset file layout (little-endian, seekable by record index):

    header  "QMRF" | u16 version | u16 header_size | u64 n | u32 L |
            i64 seed | f64 t1_min,t1_max,t2_min,t2_max,snr_min,snr_max,
            phase_min,phase_max,tr_ms,te_ms
    records n x (2L + 2) float32: signal (real parts then imaginary
            parts), t1_ms, t2_ms
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"QMRF"
FORMAT_VERSION = 1

_HEADER_FMT = "<4sHHQIq10d"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)  # 108 bytes

_REJECTION_LIMIT = 10_000


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSample:
    signal: np.ndarray  # (2L,) float32, real parts then imaginary parts
    t1_ms: float
    t2_ms: float


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int
    t1_range: tuple[float, float] = (100.0, 4000.0)
    t2_range: tuple[float, float] = (10.0, 2000.0)
    snr_range: tuple[float, float] = (10.0, 100.0)
    phase_range: tuple[float, float] = (0.0, 2.0 * math.pi)
    length: int = 100
    seed: int = 0
    tr_ms: float = 10.0
    te_ms: float = 2.0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.length < 1:
            raise ValueError("signal length must be >= 1")
        for name in ("t1_range", "t2_range", "snr_range", "phase_range"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} must be a non-empty finite range, got ({lo}, {hi})")
        if min(self.t1_range) <= 0 or min(self.t2_range) <= 0 or min(self.snr_range) <= 0:
            raise ValueError("t1, t2 and snr ranges must be positive")
        if self.t2_range[0] > self.t1_range[1]:
            raise ValueError(
                "impossible ranges: no (t1, t2) pair can satisfy t2 <= t1 "
                f"with t2 >= {self.t2_range[0]} and t1 <= {self.t1_range[1]}"
            )
        if self.tr_ms <= 0 or self.te_ms <= 0:
            raise ValueError("tr_ms and te_ms must be positive")


@dataclass
class Dataset:
    spec: DatasetSpec
    signals: np.ndarray  # (n, 2L) float32
    t1_ms: np.ndarray  # (n,) float32
    t2_ms: np.ndarray  # (n,) float32

    def __len__(self) -> int:
        return self.signals.shape[0]

    def sample(self, i: int) -> TrainSample:
        return TrainSample(
            signal=self.signals[i], t1_ms=float(self.t1_ms[i]), t2_ms=float(self.t2_ms[i])
        )

    def targets_ms(self) -> np.ndarray:
        return np.stack([self.t1_ms, self.t2_ms], axis=1).astype(np.float64)


@dataclass(frozen=True)
class TargetNormalization:
    """Scales (t1, t2) in ms onto [0, 1] training targets and back."""

    t1_max: float = 4000.0
    t2_max: float = 2000.0

    def normalize(self, t1_ms, t2_ms) -> np.ndarray:
        return np.stack(
            [np.asarray(t1_ms, dtype=np.float64) / self.t1_max,
             np.asarray(t2_ms, dtype=np.float64) / self.t2_max],
            axis=-1,
        )

    def denormalize(self, preds) -> np.ndarray:
        preds = np.asarray(preds, dtype=np.float64)
        return preds * np.array([self.t1_max, self.t2_max])

    def to_dict(self) -> dict:
        return {"t1_max": self.t1_max, "t2_max": self.t2_max}

    @classmethod
    def from_dict(cls, d: dict | None) -> "TargetNormalization":
        if d is None:
            return cls()
        return cls(t1_max=d["t1_max"], t2_max=d["t2_max"])


# ---------------------------------------------------------------------------
# Signal model
# ---------------------------------------------------------------------------

def signal_model(
    t1_ms: float,
    t2_ms: float,
    phase: float = 0.0,
    length: int = 100,
    tr_ms: float = 10.0,
    te_ms: float = 2.0,
) -> np.ndarray:
    """Deterministic surrogate signal, complex128 of the given length."""
    if not (t1_ms > 0 and t2_ms > 0):
        raise ValueError(f"t1 and t2 must be positive, got ({t1_ms}, {t2_ms})")
    k = np.arange(1, length + 1, dtype=np.float64)
    envelope = (1.0 - np.exp(-k * tr_ms / t1_ms)) * np.exp(-k * te_ms / t2_ms)
    return np.exp(1j * phase) * envelope


def add_noise(signal: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian noise at rms(signal)/rms(noise) = snr."""
    if snr <= 0:
        raise ValueError("snr must be positive")
    rms = float(np.sqrt(np.mean(np.abs(signal) ** 2)))
    sigma = rms / (snr * math.sqrt(2.0))
    noise = rng.normal(0.0, sigma, size=(2, signal.shape[0]))
    return signal + noise[0] + 1j * noise[1]


def _interleave(signal: np.ndarray) -> np.ndarray:
    return np.concatenate([signal.real, signal.imag]).astype(np.float32)


def generate_sample(spec: DatasetSpec, i: int) -> TrainSample:
    """Sample i as a pure function of (spec.seed, i).

    Draw order is fixed: (t1, t2) pairs rejected until t2 <= t1, then
    snr, then phase, then the noise block.
    """
    rng = np.random.default_rng([spec.seed, i])
    for _ in range(_REJECTION_LIMIT):
        t1 = rng.uniform(*spec.t1_range)
        t2 = rng.uniform(*spec.t2_range)
        if t2 <= t1:
            break
    else:
        raise RuntimeError(
            f"rejection sampling failed after {_REJECTION_LIMIT} draws; "
            "t2 <= t1 is almost never satisfiable for this spec"
        )
    snr = rng.uniform(*spec.snr_range)
    phase = rng.uniform(*spec.phase_range)
    clean = signal_model(t1, t2, phase, spec.length, spec.tr_ms, spec.te_ms)
    noisy = add_noise(clean, snr, rng)
    return TrainSample(signal=_interleave(noisy), t1_ms=t1, t2_ms=t2)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    signals = np.empty((spec.n_samples, 2 * spec.length), dtype=np.float32)
    t1 = np.empty(spec.n_samples, dtype=np.float32)
    t2 = np.empty(spec.n_samples, dtype=np.float32)
    for i in range(spec.n_samples):
        s = generate_sample(spec, i)
        signals[i] = s.signal
        t1[i] = s.t1_ms
        t2[i] = s.t2_ms
    return Dataset(spec=spec, signals=signals, t1_ms=t1, t2_ms=t2)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def _pack_header(spec: DatasetSpec, n: int) -> bytes:
    return struct.pack(
        _HEADER_FMT,
        MAGIC,
        FORMAT_VERSION,
        _HEADER_SIZE,
        n,
        spec.length,
        spec.seed,
        spec.t1_range[0],
        spec.t1_range[1],
        spec.t2_range[0],
        spec.t2_range[1],
        spec.snr_range[0],
        spec.snr_range[1],
        spec.phase_range[0],
        spec.phase_range[1],
        spec.tr_ms,
        spec.te_ms,
    )


def _unpack_header(blob: bytes) -> tuple[DatasetSpec, int, int]:
    if blob[:4] != MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    if len(blob) < _HEADER_SIZE:
        raise ValueError("dataset file truncated inside the header")
    fields = struct.unpack(_HEADER_FMT, blob[:_HEADER_SIZE])
    (_, version, header_size, n, length, seed,
     t1lo, t1hi, t2lo, t2hi, snrlo, snrhi, phlo, phhi, tr, te) = fields
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {version}")
    spec = DatasetSpec(
        n_samples=n,
        t1_range=(t1lo, t1hi),
        t2_range=(t2lo, t2hi),
        snr_range=(snrlo, snrhi),
        phase_range=(phlo, phhi),
        length=length,
        seed=seed,
        tr_ms=tr,
        te_ms=te,
    )
    return spec, n, header_size


def record_size(length: int) -> int:
    return 4 * (2 * length + 2)


def save_dataset(path, ds: Dataset) -> None:
    """Write header + records atomically (temp file + rename)."""
    records = np.concatenate(
        [ds.signals, ds.t1_ms[:, None], ds.t2_ms[:, None]], axis=1
    ).astype("<f4")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_pack_header(ds.spec, len(ds)))
        f.write(records.tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    spec, n, header_size = _unpack_header(blob)
    rec = record_size(spec.length)
    body = blob[header_size:]
    if len(body) != n * rec:
        raise ValueError(
            f"{path}: expected {n} records of {rec} bytes, found {len(body)} bytes"
        )
    flat = np.frombuffer(body, dtype="<f4").reshape(n, 2 * spec.length + 2)
    return Dataset(
        spec=spec,
        signals=flat[:, : 2 * spec.length].copy(),
        t1_ms=flat[:, -2].copy(),
        t2_ms=flat[:, -1].copy(),
    )


def read_sample(path, i: int) -> TrainSample:
    """Seek one record by index without loading the whole file."""
    with open(path, "rb") as f:
        spec, n, header_size = _unpack_header(f.read(_HEADER_SIZE))
        if not (0 <= i < n):
            raise IndexError(f"sample {i} out of range for {n} records")
        rec = record_size(spec.length)
        f.seek(header_size + i * rec)
        flat = np.frombuffer(f.read(rec), dtype="<f4")
    return TrainSample(
        signal=flat[: 2 * spec.length].copy(),
        t1_ms=float(flat[-2]),
        t2_ms=float(flat[-1]),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamMetrics:
    mape_percent: float
    mpe_percent: float
    rmse_ms: float


@dataclass(frozen=True)
class MetricsReport:
    t1: ParamMetrics
    t2: ParamMetrics

    def to_dict(self) -> dict:
        return {
            "t1": {"mape_percent": self.t1.mape_percent, "mpe_percent": self.t1.mpe_percent,
                   "rmse_ms": self.t1.rmse_ms},
            "t2": {"mape_percent": self.t2.mape_percent, "mpe_percent": self.t2.mpe_percent,
                   "rmse_ms": self.t2.rmse_ms},
        }


def _column_metrics(pred: np.ndarray, target: np.ndarray) -> ParamMetrics:
    err = pred - target
    ratio = err / target
    return ParamMetrics(
        mape_percent=float(100.0 * np.mean(np.abs(ratio))),
        mpe_percent=float(100.0 * np.mean(ratio)),
        rmse_ms=float(np.sqrt(np.mean(err**2))),
    )


def evaluate(preds_ms, targets_ms) -> MetricsReport:
    """MAPE/MPE/RMSE for T1 and T2 independently. Percentage errors are
    signed as (pred - true) / true; inputs are (n, 2) arrays in ms."""
    preds = np.asarray(preds_ms, dtype=np.float64)
    targets = np.asarray(targets_ms, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2 or preds.shape[1] != 2:
        raise ValueError(f"expected matching (n, 2) arrays, got {preds.shape} vs {targets.shape}")
    if preds.shape[0] == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if np.any(targets <= 0):
        raise ValueError("targets must be strictly positive (percentage errors divide by them)")
    return MetricsReport(
        t1=_column_metrics(preds[:, 0], targets[:, 0]),
        t2=_column_metrics(preds[:, 1], targets[:, 1]),
    )


def format_metrics_table(reports: dict[str, MetricsReport]) -> str:
    """Side-by-side text table, one column pair per labeled report."""
    labels = list(reports)
    head1 = f"{'':12s}" + "".join(f"|{('T1 ' + lab):>12s}" for lab in labels)
    head1 += "".join(f"|{('T2 ' + lab):>12s}" for lab in labels)
    rows = []
    for name, getter in (
        ("MAPE (%)", lambda m: m.mape_percent),
        ("MPE (%)", lambda m: m.mpe_percent),
        ("RMSE (ms)", lambda m: m.rmse_ms),
    ):
        cells = [getter(reports[lab].t1) for lab in labels]
        cells += [getter(reports[lab].t2) for lab in labels]
        rows.append(f"{name:12s}" + "".join(f"|{c:12.2f}" for c in cells))
    return "\n".join([head1, *rows])
