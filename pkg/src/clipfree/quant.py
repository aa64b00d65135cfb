"""Static post-training quantization with a min/max observer.

Scheme (converter-convention compatible, not bit-exact to any product):

* activations: per-tensor asymmetric ``uint8`` (``0..255``).  The observed
  range is widened to include zero, ``scale = (max' - min') / 255`` and
  ``zero_point = round(-min' / scale)`` clamped to ``[0, 255]``;
* weights: per-output-channel symmetric ``int8`` in ``-127..127``,
  ``scale = max(|min|, |max|) / 127``, ``zero_point = 0``;
* biases: ``int32`` at scale ``s_input * s_weight[c]``.

Execution is fake-quant: every weight and every recorded activation (the
network input and each layer output) goes through
``s * (clamp(round(x / s + z), qmin, qmax) - z)`` in real arithmetic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import zoo
from .engine import ConvWeights, as_tensor
from .errors import CalibrationError, FormatError, StructuralError

ACTIVATION = "activation"
WEIGHT = "weight_channel"
INT32 = (-(2 ** 31), 2 ** 31 - 1)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    qmin: int
    qmax: int

    def __post_init__(self):
        if not self.scale > 0:
            raise StructuralError(f"scale must be positive, got {self.scale}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise StructuralError(f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]")

    def dequantize(self, q):
        return self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)

    def to_json(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point, "qmin": self.qmin, "qmax": self.qmax}


def derive_qparams(lo: float, hi: float, kind: str = ACTIVATION, bits: int = 8) -> QuantParams:
    if lo > hi:
        raise StructuralError(f"derive_qparams: min {lo} > max {hi}")
    if kind == ACTIVATION:
        qmin, qmax = 0, 2 ** bits - 1
        lo, hi = min(lo, 0.0), max(hi, 0.0)
        if hi == lo:
            return QuantParams(1.0, 0, qmin, qmax)
        scale = (hi - lo) / qmax
        zp = int(np.clip(np.round(-lo / scale), qmin, qmax))
        return QuantParams(float(scale), zp, qmin, qmax)
    if kind == WEIGHT:
        qmax = 2 ** (bits - 1) - 1
        amax = max(abs(lo), abs(hi))
        return QuantParams(float(amax / qmax) if amax > 0 else 1.0, 0, -qmax, qmax)
    raise StructuralError(f"unknown quantization kind {kind!r}")


def quantize_values(x, scale, zero_point, qmin, qmax) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.round(x / scale + zero_point), qmin, qmax)


def fake_quant(t, qp: QuantParams) -> np.ndarray:
    """``s * (clamp(round(x / s + z), qmin, qmax) - z)``, keeping the input's float dtype."""
    arr = np.asarray(t)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
    q = quantize_values(arr, qp.scale, qp.zero_point, qp.qmin, qp.qmax)
    return (qp.scale * (q - qp.zero_point)).astype(dtype)


# -- calibration --------------------------------------------------------------

@dataclass
class CalibrationRecord:
    """Running min/max of every recorded tensor, in :meth:`ModelGraph.layer_names` order."""

    names: list
    mins: np.ndarray
    maxs: np.ndarray
    n_images: int = 0

    def merge(self, other: "CalibrationRecord") -> "CalibrationRecord":
        if self.names != other.names:
            raise CalibrationError("cannot merge records of different models")
        return CalibrationRecord(list(self.names), np.minimum(self.mins, other.mins),
                                 np.maximum(self.maxs, other.maxs), self.n_images + other.n_images)

    def range_of(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.mins[i]), float(self.maxs[i])

    def to_json(self) -> dict:
        return {"schema_version": 1, "n_images": self.n_images,
                "tensors": [{"name": n, "min": float(lo), "max": float(hi)}
                            for n, lo, hi in zip(self.names, self.mins, self.maxs)]}

    @classmethod
    def from_json(cls, d: dict) -> "CalibrationRecord":
        try:
            tensors = d["tensors"]
            return cls([t["name"] for t in tensors],
                       np.array([t["min"] for t in tensors], dtype=np.float64),
                       np.array([t["max"] for t in tensors], dtype=np.float64),
                       int(d.get("n_images", 0)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed calibration record: {exc}") from None


def calibrate(m: zoo.ModelGraph, rd) -> CalibrationRecord:
    """Run every image of the representative dataset through the float model."""
    rd = list(rd)
    if not rd:
        raise CalibrationError("representative dataset is empty")
    names = m.layer_names()
    mins = np.full(len(names), np.inf)
    maxs = np.full(len(names), -np.inf)
    for img in rd:
        for i, t in enumerate(zoo.forward_trace(m, img)):
            mins[i] = min(mins[i], float(t.min()))
            maxs[i] = max(maxs[i], float(t.max()))
    return CalibrationRecord(names, mins, maxs, len(rd))


# -- quantized model ------------------------------------------------------------

@dataclass(frozen=True)
class QuantizedModel:
    source: zoo.ModelGraph
    act_params: tuple  # one QuantParams per recorded tensor
    weight_params: tuple  # per conv: tuple of QuantParams, one per output channel
    qweights: tuple  # per conv: integer array shaped like the float weights
    qbiases: tuple  # per conv: integer array, scale s_in * s_w[c]
    bits: int = 8
    _dequant: list = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.act_params) != len(self.source.layers) + 1:
            raise StructuralError(
                f"{len(self.act_params)} activation params for {len(self.source.layers) + 1} tensors")
        convs = []
        for ci, li in enumerate(self.source.conv_indices()):
            wp = self.weight_params[ci]
            if len(wp) != self.qweights[ci].shape[3]:
                raise StructuralError(f"conv {li}: {len(wp)} weight params for "
                                      f"{self.qweights[ci].shape[3]} channels")
            s_w = np.array([p.scale for p in wp])
            s_b = self.act_params[li].scale * s_w
            w = (self.qweights[ci].astype(np.float64) * s_w).astype(np.float32)
            b = (self.qbiases[ci].astype(np.float64) * s_b).astype(np.float32)
            convs.append(ConvWeights(w, b, self.source.weights[ci].groups))
        object.__setattr__(self, "_dequant", convs)

    @property
    def dequantized_weights(self) -> list:
        return self._dequant


def _int_dtype(bits: int, signed: bool):
    if bits <= 8:
        return np.int8 if signed else np.uint8
    return np.int64


def quantize_model(m: zoo.ModelGraph, cal: CalibrationRecord, bits: int = 8) -> QuantizedModel:
    names = m.layer_names()
    lookup = dict(zip(cal.names, zip(cal.mins, cal.maxs)))
    for n in names:
        if n not in lookup:
            raise CalibrationError(f"calibration record has no range for layer {n!r}")
    act = tuple(derive_qparams(float(lookup[n][0]), float(lookup[n][1]), ACTIVATION, bits)
                for n in names)
    wparams, qws, qbs = [], [], []
    for ci, li in enumerate(m.conv_indices()):
        w = m.weights[ci]
        wt = np.asarray(w.weights, dtype=np.float64)
        flat = wt.reshape(-1, wt.shape[3])
        params = tuple(derive_qparams(float(flat[:, c].min()), float(flat[:, c].max()), WEIGHT, bits)
                       for c in range(wt.shape[3]))
        s_w = np.array([p.scale for p in params])
        q = quantize_values(wt, s_w, 0, params[0].qmin, params[0].qmax)
        s_b = act[li].scale * s_w
        qb = np.clip(np.round(np.asarray(w.bias, dtype=np.float64) / s_b), *INT32) if bits <= 8 \
            else np.round(np.asarray(w.bias, dtype=np.float64) / s_b)
        wparams.append(params)
        qws.append(q.astype(_int_dtype(bits, True)))
        qbs.append(qb.astype(np.int32 if bits <= 8 else np.int64))
    return QuantizedModel(m, act, tuple(wparams), tuple(qws), tuple(qbs), bits)


def int8_forward(qm: QuantizedModel, img, raw: bool = False) -> np.ndarray:
    """Fake-quant forward pass.

    Returns the image the deployed model would emit (rounded, clamped to
    ``[0, 255]``), or with ``raw=True`` the dequantized final tensor.
    """
    x = as_tensor(img, name="model input").astype(np.float32)
    if x.shape[2] != 3:
        raise StructuralError(f"model input must have 3 channels, got {x.shape[2]}")
    x = fake_quant(x, qm.act_params[0])
    net_in = x
    convs = iter(qm.dequantized_weights)
    for i, layer in enumerate(qm.source.layers):
        w = next(convs) if layer.kind == "Conv" else None
        x = fake_quant(zoo.apply_layer(layer, x, w, net_in), qm.act_params[i + 1])
    if raw:
        return x
    return np.clip(np.round(x), 0, 255).astype(np.float32)


def elementwise_ops(m: zoo.ModelGraph, height: int, width: int, quantized: bool = True) -> int:
    """Elementwise operations in one forward pass at the given input size.

    Counts activation layers, residual/anchor adds and, when ``quantized``, the
    requantization of every recorded tensor.  Convolutions are not elementwise
    and are excluded.
    """
    shapes = [(height, width, 3)]
    ch, h, w = 3, height, width
    for layer in m.layers:
        if layer.kind == "Conv":
            ch = layer.out_channels
        elif layer.kind == "DepthToSpace":
            h, w, ch = h * layer.block, w * layer.block, ch // layer.block ** 2
        shapes.append((h, w, ch))
    ops = 0
    for layer, shape in zip(m.layers, shapes[1:]):
        n = int(np.prod(shape))
        if layer.kind in ("ReLU", "ClippedReLU", "AddAnchor") or (layer.kind == "Conv" and layer.residual):
            ops += n
    if quantized:
        ops += sum(int(np.prod(s)) for s in shapes)
    return ops


# -- serialization --------------------------------------------------------------

def save_quantized(qm: QuantizedModel, path) -> None:
    """Manifest JSON plus a blob of int weights followed by int biases per conv.

    8-bit models store weights as ``int8`` and biases as little-endian
    ``int32``; wider builds use ``int64`` for both.
    """
    path = Path(path)
    chunks, offset, convs = [], 0, []
    wdt = "<i1" if qm.bits <= 8 else "<i8"
    bdt = "<i4" if qm.bits <= 8 else "<i8"
    for ci, li in enumerate(qm.source.conv_indices()):
        wb = np.asarray(qm.qweights[ci], dtype=wdt).tobytes()
        bb = np.asarray(qm.qbiases[ci], dtype=bdt).tobytes()
        convs.append({"layer": li, "weight_offset": offset, "weight_bytes": len(wb),
                      "bias_offset": offset + len(wb), "bias_bytes": len(bb),
                      "weight_params": [p.to_json() for p in qm.weight_params[ci]]})
        chunks += [wb, bb]
        offset += len(wb) + len(bb)
    blob = b"".join(chunks)
    names = qm.source.layer_names()
    manifest = {
        "schema_version": zoo.SCHEMA_VERSION,
        "format": "clipfree-quantized",
        "name": qm.source.name,
        "scale": qm.source.scale,
        "clipped": qm.source.clipped,
        "seed": qm.source.seed,
        "bits": qm.bits,
        "weight_dtype": wdt,
        "bias_dtype": bdt,
        "blob": zoo.blob_path(path).name,
        "blob_bytes": len(blob),
        "layers": [l.to_json() for l in qm.source.layers],
        "activations": [dict(name=n, **p.to_json()) for n, p in zip(names, qm.act_params)],
        "convs": convs,
    }
    zoo.atomic_write(zoo.blob_path(path), blob)
    zoo.atomic_write(path, (json.dumps(manifest, indent=2) + "\n").encode())


def load_quantized(path) -> QuantizedModel:
    """Inverse of :func:`save_quantized`.

    The attached ``source`` graph carries the dequantized weights; only the
    integer tensors and parameters are authoritative.
    """
    path = Path(path)
    manifest = zoo.read_manifest(path)
    if manifest.get("format") != "clipfree-quantized":
        raise FormatError(f"{path}: not a quantized model manifest")
    data = zoo.read_blob(path, manifest)
    layers = tuple(zoo._layer_from_json(i, e) for i, e in enumerate(manifest["layers"]))
    acts = tuple(QuantParams(float(a["scale"]), int(a["zero_point"]), int(a["qmin"]), int(a["qmax"]))
                 for a in manifest["activations"])
    conv_idx = [i for i, l in enumerate(layers) if l.kind == "Conv"]
    if len(manifest["convs"]) != len(conv_idx):
        raise FormatError(f"{path}: {len(manifest['convs'])} conv entries for {len(conv_idx)} Conv layers")
    wparams, qws, qbs, fweights = [], [], [], []
    for entry, li in zip(manifest["convs"], conv_idx):
        layer = layers[li]
        shape = (layer.kernel, layer.kernel, layer.in_channels // layer.groups, layer.out_channels)
        end = entry["bias_offset"] + entry["bias_bytes"]
        if end > len(data):
            raise FormatError(f"layer {li}: needs {end} blob bytes, blob has {len(data)}")
        qw = np.frombuffer(data, manifest["weight_dtype"], offset=entry["weight_offset"],
                           count=int(np.prod(shape))).reshape(shape)
        qb = np.frombuffer(data, manifest["bias_dtype"], offset=entry["bias_offset"],
                           count=layer.out_channels)
        wp = tuple(QuantParams(float(p["scale"]), int(p["zero_point"]), int(p["qmin"]), int(p["qmax"]))
                   for p in entry["weight_params"])
        s_w = np.array([p.scale for p in wp])
        fweights.append(ConvWeights((qw * s_w).astype(np.float32),
                                    (qb * acts[li].scale * s_w).astype(np.float32), layer.groups))
        wparams.append(wp)
        qws.append(qw.copy())
        qbs.append(qb.copy())
    source = zoo.ModelGraph(manifest["name"], layers, tuple(fweights), bool(manifest["clipped"]),
                            int(manifest["scale"]), int(manifest.get("seed", 0)))
    return QuantizedModel(source, acts, tuple(wparams), tuple(qws), tuple(qbs), int(manifest["bits"]))
