"""Model container serialization.

Single-file format:

    bytes 0..3    magic b"QNNC"
    bytes 4..7    uint32 little-endian header length H
    bytes 8..8+H  UTF-8 JSON header
    remainder     raw little-endian arrays, offsets given by the header

The header lists layer sizes and activations, optional quantization
parameters, an optional target-normalization block, the format version,
and an array manifest (name, dtype, shape, byte offset). Weight matrices
are stored row-major with the output index major, biases as flat vectors,
float shadows as float64 and quantized views as int8/int16/int32 per
their declared bit width.

Serialization is fully deterministic (sorted JSON keys, no timestamps):
saving the same model twice yields byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .network import LayerParams, LayerQuantization, LayerSpec, NetworkConfig
from .quantization import QTensor, QuantParams

MAGIC = b"QNNC"
FORMAT_VERSION = 1

_INT_DTYPES = {8: "<i1", 16: "<i2", 32: "<i4"}


def _qparams_to_json(p: QuantParams) -> dict:
    return {"bits": p.bits, "scale": p.scale, "zero_point": p.zero_point}


def _qparams_from_json(d: dict) -> QuantParams:
    return QuantParams(bits=d["bits"], scale=d["scale"], zero_point=d["zero_point"])


@dataclass
class LoadedModel:
    cfg: NetworkConfig
    params: list[LayerParams]
    normalization: dict | None


def save_model(path, cfg: NetworkConfig, params, normalization: dict | None = None) -> None:
    """Write the container atomically (temp file + rename)."""
    arrays: list[tuple[str, np.ndarray, str]] = []  # (name, array, dtype code)
    quant_meta = []
    has_quant = any(lp.quant is not None for lp in params)
    if has_quant and not all(lp.quant is not None for lp in params):
        raise ValueError("either every layer or no layer may carry a quantized view")

    for i, lp in enumerate(params):
        arrays.append((f"layer{i}/weights", lp.weights, "<f8"))
        arrays.append((f"layer{i}/biases", lp.biases, "<f8"))
        if has_quant:
            q = lp.quant
            arrays.append(
                (f"layer{i}/weights_q", q.weight_q.values, _INT_DTYPES[q.weight_q.qparams.bits])
            )
            arrays.append(
                (f"layer{i}/biases_q", q.bias_q.values, _INT_DTYPES[q.bias_q.qparams.bits])
            )
            quant_meta.append(
                {
                    "weight": _qparams_to_json(q.weight_q.qparams),
                    "bias": _qparams_to_json(q.bias_q.qparams),
                    "input": _qparams_to_json(q.input_params),
                    "output": None
                    if q.output_params is None
                    else _qparams_to_json(q.output_params),
                }
            )

    manifest = []
    offset = 0
    blobs = []
    for name, arr, code in arrays:
        blob = np.ascontiguousarray(arr).astype(code).tobytes()
        manifest.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        "format_version": FORMAT_VERSION,
        "input_dim": cfg.input_dim,
        "layers": [
            {"n_inputs": s.n_inputs, "n_outputs": s.n_outputs, "activation": s.activation}
            for s in cfg.layers
        ],
        "normalization": normalization,
        "quantization": {"layers": quant_meta} if has_quant else None,
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def load_model(path) -> LoadedModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a model container (bad magic)")
    if len(data) < 8:
        raise ValueError(f"{path}: container truncated inside the header")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported format version {header['format_version']}"
        )
    payload = data[8 + hlen :]

    def read_array(name: str) -> np.ndarray:
        for entry in header["arrays"]:
            if entry["name"] == name:
                dtype = np.dtype(entry["dtype"])
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                start = entry["offset"]
                arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
                return arr.reshape(shape).copy()
        raise ValueError(f"{path}: array {name!r} missing from container")

    layers = tuple(
        LayerSpec(d["n_inputs"], d["n_outputs"], d["activation"]) for d in header["layers"]
    )
    cfg = NetworkConfig(input_dim=header["input_dim"], layers=layers)

    quant_meta = header.get("quantization")
    params = []
    for i in range(len(layers)):
        weights = read_array(f"layer{i}/weights")
        biases = read_array(f"layer{i}/biases")
        quant = None
        if quant_meta is not None:
            meta = quant_meta["layers"][i]
            wp = _qparams_from_json(meta["weight"])
            bp = _qparams_from_json(meta["bias"])
            quant = LayerQuantization(
                weight_q=QTensor(read_array(f"layer{i}/weights_q").astype(np.int64), wp),
                bias_q=QTensor(read_array(f"layer{i}/biases_q").astype(np.int64), bp),
                input_params=_qparams_from_json(meta["input"]),
                output_params=None
                if meta["output"] is None
                else _qparams_from_json(meta["output"]),
            )
        params.append(LayerParams(weights=weights, biases=biases, quant=quant))
    return LoadedModel(cfg=cfg, params=params, normalization=header.get("normalization"))
