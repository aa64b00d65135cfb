"""Desk-scale x3 super-resolution models as layer chains.

Each architecture is a small stand-in that keeps the distinguishing block of
the network it is named after; none is a faithful reconstruction.

=============  ==============================================================
espcn_tiny     conv3x3 3->16, relu, conv3x3 16->16, relu, conv3x3 16->27, d2s
fsrcnn_tiny    conv5x5 3->16 feature, 1x1 shrink to 8, 3x3 map, 1x1 expand to
               16, conv3x3 16->27, d2s
abpn_tiny      espcn_tiny body plus a nearest-neighbour anchor added before d2s
xcat_tiny      grouped 3x3 conv (4 groups) followed by a 1x1 channel mixer
rfdn_tiny      two residual 3x3 blocks (identity branch + conv branch) and a
               1x1 fusion conv
=============  ==============================================================

A clipped build appends ``ClippedReLU(0, 255)`` after depth-to-space; the
no-clip build is otherwise identical, weights included, for the same seed.

On-disk format
--------------
``save_model(m, "model.json")`` writes two files:

* ``model.json`` -- manifest: ``schema_version``, ``name``, ``scale``,
  ``clipped``, ``seed``, ``dtype`` (``"<f4"``), ``blob`` (file name),
  ``blob_bytes`` and ``layers``.  Each layer entry has ``kind`` plus its
  parameters; Conv entries also carry ``offset`` and ``count`` (in float32
  elements) of their weights followed by their bias inside the blob.
* ``model.bin`` -- every Conv layer's weights in ``(kh, kw, in/groups, out)``
  C order followed by its bias, little-endian float32, concatenated in layer
  order.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import engine
from .engine import ConvWeights
from .errors import FormatError, StructuralError

SCHEMA_VERSION = 1
SCALE = 3
ARCHS = ("espcn_tiny", "fsrcnn_tiny", "abpn_tiny", "xcat_tiny", "rfdn_tiny")
LAYER_KINDS = ("Conv", "ReLU", "ClippedReLU", "DepthToSpace", "AddAnchor")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    groups: int = 1
    residual: bool = False
    lo: float = 0.0
    hi: float = 255.0
    block: int = 0

    def to_json(self) -> dict:
        if self.kind == "Conv":
            return {"kind": "Conv", "kernel": self.kernel, "in_channels": self.in_channels,
                    "out_channels": self.out_channels, "groups": self.groups,
                    "residual": self.residual}
        if self.kind == "ClippedReLU":
            return {"kind": "ClippedReLU", "lo": self.lo, "hi": self.hi}
        if self.kind in ("DepthToSpace", "AddAnchor"):
            return {"kind": self.kind, "block": self.block}
        return {"kind": self.kind}


def conv(cin, cout, k=3, groups=1, residual=False) -> LayerSpec:
    return LayerSpec("Conv", in_channels=cin, out_channels=cout, kernel=k, groups=groups,
                     residual=residual)


RELU = LayerSpec("ReLU")


@dataclass(frozen=True)
class ModelGraph:
    """An immutable layer chain plus one :class:`ConvWeights` per Conv layer."""

    name: str
    layers: tuple
    weights: tuple
    clipped: bool
    scale: int = SCALE
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "Conv"]

    def layer_names(self) -> list[str]:
        """Names of every recorded tensor: the input then each layer output."""
        return ["input"] + [f"{i}:{layer.kind}" for i, layer in enumerate(self.layers)]


# -- seeded initialisation -------------------------------------------------

_MASK64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* generator seeded through splitmix64.

    Documented so that weight initialisation can be reproduced bit for bit
    elsewhere: ``state = splitmix64(seed)`` (forced nonzero), then each draw is
    ``x ^= x >> 12; x ^= x << 25; x ^= x >> 27; return x * 0x2545F4914F6CDD1D``
    modulo 2**64.  ``uniform()`` returns ``(draw >> 11) * 2**-53``.
    """

    def __init__(self, seed: int):
        z = (seed + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        self.state = (z ^ (z >> 31)) or 0x2545F4914F6CDD1D

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def uniform(self, n: int) -> np.ndarray:
        return np.array([(self.next() >> 11) * 2.0 ** -53 for _ in range(n)], dtype=np.float64)


def _body(arch: str) -> list[LayerSpec]:
    out = 3 * SCALE * SCALE
    if arch == "espcn_tiny":
        return [conv(3, 16), RELU, conv(16, 16), RELU, conv(16, out)]
    if arch == "fsrcnn_tiny":
        return [conv(3, 16, k=5), RELU, conv(16, 8, k=1), RELU, conv(8, 8), RELU,
                conv(8, 16, k=1), RELU, conv(16, out)]
    if arch == "abpn_tiny":
        return [conv(3, 16), RELU, conv(16, 16), RELU, conv(16, out),
                LayerSpec("AddAnchor", block=SCALE)]
    if arch == "xcat_tiny":
        return [conv(3, 16), RELU, conv(16, 16, groups=4), RELU, conv(16, 16, k=1), RELU,
                conv(16, out)]
    if arch == "rfdn_tiny":
        return [conv(3, 16), RELU, conv(16, 16, residual=True), RELU,
                conv(16, 16, residual=True), RELU, conv(16, 16, k=1), RELU, conv(16, out)]
    raise StructuralError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def _chain(arch: str, clipped: bool) -> tuple:
    layers = _body(arch) + [LayerSpec("DepthToSpace", block=SCALE)]
    if clipped:
        layers.append(LayerSpec("ClippedReLU", lo=0.0, hi=255.0))
    return tuple(layers)


def build_model(arch: str, clipped: bool, seed: int) -> ModelGraph:
    """Build ``arch`` with He-uniform weights drawn from :class:`XorShift64Star`.

    Weights are filled conv by conv in C order with bound ``sqrt(6 / fan_in)``;
    biases start at zero.  Residual convs are scaled by 0.1 so each block
    starts close to identity.  The bounds hold for pixels normalised to
    ``[0, 1]``; to accept and emit 0-255 pixels directly the first conv is then
    divided by 255 and the last conv multiplied by 255.  Models with an anchor
    additionally scale the last conv by 0.1 so they start near the anchor;
    without it the large initial residual drives the hidden ReLUs dead.
    """
    layers = _chain(arch, clipped)
    rng = XorShift64Star(seed)
    weights = []
    for layer in layers:
        if layer.kind != "Conv":
            continue
        cin_g = layer.in_channels // layer.groups
        shape = (layer.kernel, layer.kernel, cin_g, layer.out_channels)
        bound = np.sqrt(6.0 / (layer.kernel * layer.kernel * cin_g))
        w = (rng.uniform(int(np.prod(shape))) * 2.0 - 1.0) * bound
        if layer.residual:
            w *= 0.1
        if not weights:
            w /= 255.0
        weights.append(ConvWeights(w.reshape(shape).astype(np.float32),
                                   np.zeros(layer.out_channels, np.float32), layer.groups))
    last = weights[-1]
    gain = 25.5 if any(l.kind == "AddAnchor" for l in layers) else 255.0
    weights[-1] = ConvWeights((last.weights.astype(np.float64) * gain).astype(np.float32),
                              last.bias, last.groups)
    m = ModelGraph(name=arch, layers=layers, weights=tuple(weights), clipped=clipped, seed=seed)
    validate(m)
    return m


def with_clip(m: ModelGraph, clipped: bool) -> ModelGraph:
    """The same weights with the trailing ClippedReLU added or removed."""
    layers = [l for l in m.layers if l.kind != "ClippedReLU"]
    if clipped:
        layers.append(LayerSpec("ClippedReLU", lo=0.0, hi=255.0))
    return replace(m, layers=tuple(layers), clipped=clipped)


def with_weights(m: ModelGraph, weights) -> ModelGraph:
    return replace(m, weights=tuple(weights))


def diff_layers(a: ModelGraph, b: ModelGraph) -> list:
    """Positions where the two chains differ, as ``(index, layer_a, layer_b)``."""
    n = max(len(a.layers), len(b.layers))
    out = []
    for i in range(n):
        la = a.layers[i] if i < len(a.layers) else None
        lb = b.layers[i] if i < len(b.layers) else None
        if la != lb:
            out.append((i, la, lb))
    return out


def validate(m: ModelGraph) -> None:
    """Check channel flow through the chain and the clip/no-clip contract."""
    ch = 3
    convs = iter(m.weights)
    n_conv = 0
    for i, layer in enumerate(m.layers):
        if layer.kind not in LAYER_KINDS:
            raise StructuralError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.kind == "Conv":
            if layer.in_channels != ch:
                raise StructuralError(f"layer {i}: Conv expects {layer.in_channels} channels, gets {ch}")
            try:
                w = next(convs)
            except StopIteration:
                raise StructuralError(f"layer {i}: no weights for Conv layer") from None
            n_conv += 1
            if (w.in_channels, w.out_channels, w.kernel_h, w.groups) != (
                    layer.in_channels, layer.out_channels, layer.kernel, layer.groups):
                raise StructuralError(f"layer {i}: weight shape {w.weights.shape} does not match spec")
            if layer.residual and layer.in_channels != layer.out_channels:
                raise StructuralError(f"layer {i}: residual Conv needs in == out channels")
            ch = layer.out_channels
        elif layer.kind == "AddAnchor":
            if ch != 3 * layer.block ** 2:
                raise StructuralError(f"layer {i}: AddAnchor needs {3 * layer.block ** 2} channels, gets {ch}")
        elif layer.kind == "DepthToSpace":
            if ch != 3 * m.scale ** 2 or layer.block != m.scale:
                raise StructuralError(f"layer {i}: DepthToSpace expects {3 * m.scale ** 2} channels, gets {ch}")
            ch = 3
        elif layer.kind == "ClippedReLU" and not layer.lo < layer.hi:
            raise StructuralError(f"layer {i}: ClippedReLU needs lo < hi")
    if n_conv != len(m.weights):
        raise StructuralError(f"{len(m.weights)} weight sets for {n_conv} Conv layers")
    if ch != 3:
        raise StructuralError(f"model ends with {ch} channels, expected 3")
    last = m.layers[-1].kind
    if m.clipped != (last == "ClippedReLU"):
        raise StructuralError(f"clipped={m.clipped} but final layer is {last}")


# -- execution -------------------------------------------------------------

def apply_layer(layer: LayerSpec, x: np.ndarray, w: ConvWeights | None, net_input: np.ndarray):
    if layer.kind == "Conv":
        y = engine.conv2d(x, w)
        return engine.add(y, x) if layer.residual else y
    if layer.kind == "ReLU":
        return engine.relu(x)
    if layer.kind == "ClippedReLU":
        return engine.clipped_relu(x, layer.lo, layer.hi)
    if layer.kind == "DepthToSpace":
        return engine.depth_to_space(x, layer.block)
    if layer.kind == "AddAnchor":
        return engine.add(x, engine.nearest_upsample_replicate(net_input, layer.block))
    raise StructuralError(f"unknown layer kind {layer.kind!r}")


def forward_trace(m: ModelGraph, img) -> list[np.ndarray]:
    """Every recorded tensor of a float32 forward pass: the input, then each layer's output."""
    x = engine.as_tensor(img, name="model input").astype(np.float32)
    if x.shape[2] != 3:
        raise StructuralError(f"model input must have 3 channels, got {x.shape[2]}")
    trace = [x]
    weights = iter(m.weights)
    for layer in m.layers:
        w = next(weights) if layer.kind == "Conv" else None
        trace.append(apply_layer(layer, trace[-1], w, x))
    return trace


def forward(m: ModelGraph, img) -> np.ndarray:
    """FP32 output at ``scale`` times the input size; unclamped for no-clip models."""
    return forward_trace(m, img)[-1]


# -- serialization ---------------------------------------------------------

def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def blob_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def save_model(m: ModelGraph, path) -> None:
    path = Path(path)
    blob_name = blob_path(path).name
    chunks, layers, offset = [], [], 0
    weights = iter(m.weights)
    for layer in m.layers:
        entry = layer.to_json()
        if layer.kind == "Conv":
            w = next(weights)
            flat = np.concatenate([np.asarray(w.weights, "<f4").ravel(), np.asarray(w.bias, "<f4")])
            entry["offset"] = offset
            entry["count"] = int(flat.size)
            offset += flat.size
            chunks.append(flat.astype("<f4").tobytes())
        layers.append(entry)
    blob = b"".join(chunks)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "format": "clipfree-model",
        "name": m.name,
        "scale": m.scale,
        "clipped": m.clipped,
        "seed": m.seed,
        "dtype": "<f4",
        "blob": blob_name,
        "blob_bytes": len(blob),
        "layers": layers,
    }
    atomic_write(path.parent / blob_name, blob)
    atomic_write(path, (json.dumps(manifest, indent=2) + "\n").encode())


def _layer_from_json(i: int, entry: dict) -> LayerSpec:
    kind = entry.get("kind")
    try:
        if kind == "Conv":
            return LayerSpec("Conv", in_channels=int(entry["in_channels"]),
                             out_channels=int(entry["out_channels"]), kernel=int(entry["kernel"]),
                             groups=int(entry.get("groups", 1)),
                             residual=bool(entry.get("residual", False)))
        if kind == "ReLU":
            return LayerSpec("ReLU")
        if kind == "ClippedReLU":
            return LayerSpec("ClippedReLU", lo=float(entry["lo"]), hi=float(entry["hi"]))
        if kind in ("DepthToSpace", "AddAnchor"):
            return LayerSpec(kind, block=int(entry["block"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"layer {i}: bad {kind} entry: {exc}") from None
    raise FormatError(f"layer {i}: unknown layer kind {kind!r}")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest JSON: {exc}") from None
    if not isinstance(manifest, dict) or "layers" not in manifest or "blob" not in manifest:
        raise FormatError(f"{path}: manifest missing 'layers' or 'blob'")
    return manifest


def read_blob(path, manifest: dict) -> bytes:
    blob_file = Path(path).parent / manifest["blob"]
    if not blob_file.exists():
        raise FormatError(f"{path}: blob file {blob_file.name} referenced by manifest is missing")
    data = blob_file.read_bytes()
    expected = manifest.get("blob_bytes")
    if expected is not None and len(data) != expected:
        raise FormatError(f"{blob_file}: expected {expected} bytes, found {len(data)}")
    return data


def load_model(path) -> ModelGraph:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format", "clipfree-model") != "clipfree-model":
        raise FormatError(f"{path}: not a float model manifest (format={manifest.get('format')!r})")
    data = read_blob(path, manifest)
    floats = np.frombuffer(data, dtype="<f4")
    layers, weights = [], []
    for i, entry in enumerate(manifest["layers"]):
        layer = _layer_from_json(i, entry)
        layers.append(layer)
        if layer.kind != "Conv":
            continue
        cin_g = layer.in_channels // layer.groups
        shape = (layer.kernel, layer.kernel, cin_g, layer.out_channels)
        n_w = int(np.prod(shape))
        offset, count = int(entry.get("offset", -1)), int(entry.get("count", -1))
        if count != n_w + layer.out_channels:
            raise FormatError(f"layer {i}: count {count} does not match shape {shape} + bias")
        if offset < 0 or offset + count > floats.size:
            raise FormatError(
                f"layer {i}: needs bytes [{4 * offset}, {4 * (offset + count)}) "
                f"but blob has {len(data)} bytes")
        chunk = floats[offset:offset + count]
        weights.append(ConvWeights(chunk[:n_w].reshape(shape).astype(np.float32),
                                   chunk[n_w:].astype(np.float32), layer.groups))
    try:
        m = ModelGraph(name=manifest.get("name", "model"), layers=tuple(layers),
                       weights=tuple(weights), clipped=bool(manifest.get("clipped", False)),
                       scale=int(manifest.get("scale", SCALE)), seed=int(manifest.get("seed", 0)))
        validate(m)
    except StructuralError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return m
