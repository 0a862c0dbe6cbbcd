"""Declarative CNN graphs: manifest loading, forward inference, activation traces.

Supported layer kinds::

    conv2d          params: out_channels, kernel (int or [kh, kw]), stride, padding
    dense           weight (out, in); expects a 2-D (N, F) input
    relu
    maxpool         params: window, stride (no padding, floor)
    avgpool_global  (N, C, H, W) -> (N, C)
    add             params: inputs [a, b], identical shapes
    flatten
    softmax_head    identity on logits; marks the classifier output
    affine          per-channel ``x * scale + shift`` (optional input normalisation)

``batchnorm`` entries (files ``gamma``, ``beta``, ``mean``, ``var``; param
``eps``) are folded into the conv that feeds them at load time and never
appear in a loaded :class:`NetworkSpec`.

Every layer reads from the previous manifest entry unless ``"inputs"`` is
given; the first entry reads ``"input"``. Computation runs in float64.
"""

from __future__ import annotations

import graphlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from netlens.errors import GraphError, NumericError, ShapeError, SpecError
from netlens.fsutil import write_json
from netlens.npyio import read_npy, write_npy
from netlens.prng import SplitMix64

INPUT = "input"
KINDS = (
    "conv2d", "dense", "relu", "maxpool", "avgpool_global",
    "add", "flatten", "softmax_head", "affine",
)
_WEIGHTED = ("conv2d", "dense")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    params: dict = field(default_factory=dict)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def kernel_size(self) -> tuple[int, int]:
        k = self.params.get("kernel", 1)
        return (k, k) if isinstance(k, int) else (int(k[0]), int(k[1]))

    @property
    def stride(self) -> int:
        return int(self.params.get("stride", 1))

    @property
    def padding(self) -> int:
        return int(self.params.get("padding", 0))


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    classes: int
    shapes: dict  # layer name -> per-sample output shape

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def output(self) -> str:
        return self.layers[-1].name


@dataclass
class ActivationTrace:
    """Per-layer outputs of one forward pass, keyed in network order."""

    input: np.ndarray
    activations: dict[str, np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.input.shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        if name == INPUT:
            return self.input
        return self.activations[name]

    def __contains__(self, name: str) -> bool:
        return name == INPUT or name in self.activations


# ---------------------------------------------------------------- shape rules

def conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _infer_shape(layer: LayerSpec, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    kind, name = layer.kind, layer.name
    if kind == "add":
        if len(in_shapes) != 2:
            raise SpecError(f"{name}: add needs exactly two inputs")
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"{name}: add inputs differ in shape {in_shapes[0]} vs {in_shapes[1]}")
        return in_shapes[0]
    if len(in_shapes) != 1:
        raise SpecError(f"{name}: {kind} takes one input")
    (s,) = in_shapes
    if kind in ("relu", "softmax_head"):
        return s
    if kind == "flatten":
        return (int(np.prod(s)),)
    if kind == "affine":
        c = s[0]
        for key in ("scale", "shift"):
            if len(layer.params[key]) != c:
                raise SpecError(f"{name}: affine {key} length != {c} channels")
        return s
    if kind == "dense":
        if len(s) != 1:
            raise ShapeError(f"{name}: dense needs a flat input, got {s}")
        out_f, in_f = layer.weight.shape
        if in_f != s[0]:
            raise SpecError(f"{name}: in_features mismatch ({in_f} vs input {s[0]})")
        return (out_f,)
    if len(s) != 3:
        raise ShapeError(f"{name}: {kind} needs a (C, H, W) input, got {s}")
    c, h, w = s
    if kind == "avgpool_global":
        return (c,)
    if kind == "maxpool":
        win, st = int(layer.params["window"]), int(layer.params.get("stride", layer.params["window"]))
        ho, wo = conv_out(h, win, st, 0), conv_out(w, win, st, 0)
    elif kind == "conv2d":
        oc, ic, kh, kw = layer.weight.shape
        if ic != c:
            raise SpecError(f"{name}: in_channels mismatch ({ic} vs input {c})")
        ho = conv_out(h, kh, layer.stride, layer.padding)
        wo = conv_out(w, kw, layer.stride, layer.padding)
        c = oc
    else:
        raise SpecError(f"{name}: unknown layer kind {kind!r}")
    if ho < 1 or wo < 1:
        raise ShapeError(f"{name}: output spatial size {ho}x{wo} is empty")
    return (c, ho, wo)


def _check_weights(layer: LayerSpec) -> None:
    name, w, b = layer.name, layer.weight, layer.bias
    if layer.kind == "conv2d":
        if w is None or w.ndim != 4:
            raise SpecError(f"{name}: conv kernel must be 4-D (out, in, kh, kw)")
        if "out_channels" in layer.params and w.shape[0] != int(layer.params["out_channels"]):
            raise SpecError(f"{name}: out_channels mismatch")
        if "kernel" in layer.params and tuple(w.shape[2:]) != layer.kernel_size:
            raise SpecError(f"{name}: kernel size mismatch")
    elif layer.kind == "dense":
        if w is None or w.ndim != 2:
            raise SpecError(f"{name}: dense weight must be 2-D (out, in)")
        if "out_features" in layer.params and w.shape[0] != int(layer.params["out_features"]):
            raise SpecError(f"{name}: out_features mismatch")
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[0]):
        raise SpecError(f"{name}: bias length must equal {w.shape[0]}")


def build_network(layers: list[LayerSpec], input_shape, classes: int) -> NetworkSpec:
    """Validate a layer list and return it topologically ordered."""
    input_shape = tuple(int(x) for x in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise SpecError(f"input_shape must be (C, H, W), got {input_shape}")
    by_name: dict[str, LayerSpec] = {}
    for layer in layers:
        if layer.name in by_name or layer.name == INPUT:
            raise SpecError(f"{layer.name}: duplicate layer name")
        if layer.kind not in KINDS:
            raise SpecError(f"{layer.name}: unknown layer kind {layer.kind!r}")
        by_name[layer.name] = layer
    for layer in layers:
        for src in layer.inputs:
            if src != INPUT and src not in by_name:
                raise GraphError(f"{layer.name}: unknown input {src!r}")

    sorter = graphlib.TopologicalSorter({l.name: [s for s in l.inputs if s != INPUT] for l in layers})
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise GraphError(f"cycle in layer graph: {' -> '.join(exc.args[1])}") from exc
    # keep manifest order wherever it is already topological
    position = {l.name: i for i, l in enumerate(layers)}
    ordered, done = [], {INPUT}
    pending = sorted(order, key=position.__getitem__)
    while pending:
        for name in pending:
            if all(s in done for s in by_name[name].inputs):
                ordered.append(by_name[name])
                done.add(name)
                pending.remove(name)
                break

    consumed = {s for l in ordered for s in l.inputs}
    if INPUT not in consumed:
        raise GraphError("no layer reads the network input")
    sinks = [l.name for l in ordered if l.name not in consumed]
    if len(sinks) != 1:
        raise GraphError(f"graph needs a single output node, found {sinks}")
    if ordered[-1].name != sinks[0]:
        ordered.remove(by_name[sinks[0]])
        ordered.append(by_name[sinks[0]])

    shapes: dict[str, tuple[int, ...]] = {INPUT: input_shape}
    for layer in ordered:
        _check_weights(layer)
        shapes[layer.name] = _infer_shape(layer, [shapes[s] for s in layer.inputs])
    out_shape = shapes[ordered[-1].name]
    if out_shape != (classes,):
        raise SpecError(f"{ordered[-1].name}: output shape {out_shape} != ({classes},) classes")
    return NetworkSpec(tuple(ordered), input_shape, int(classes), shapes)


# ---------------------------------------------------------------- manifest

def fold_batchnorm(weight, bias, gamma, beta, mean, var, eps):
    """Fold an inference-mode batchnorm into the preceding conv's kernel and bias."""
    scale = gamma / np.sqrt(var + eps)
    return weight * scale[:, None, None, None], (bias - mean) * scale + beta


def _load_array(base: Path, ref: str | None) -> np.ndarray | None:
    if ref is None:
        return None
    path = base / ref
    if not path.is_file():
        raise FileNotFoundError(f"missing weight file {path}")
    return read_npy(path).astype(np.float64)


def load_network(manifest: str | os.PathLike) -> NetworkSpec:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest {manifest}")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{manifest}: invalid JSON ({exc})") from exc
    base = manifest.parent
    try:
        entries = doc["layers"]
        input_shape, classes = doc["input_shape"], doc["classes"]
    except KeyError as exc:
        raise SpecError(f"{manifest}: missing key {exc}") from exc

    layers: list[LayerSpec] = []
    renamed: dict[str, str] = {}
    prev = INPUT
    for entry in entries:
        name, kind = entry["name"], entry["kind"]
        params = dict(entry.get("params", {}))
        inputs = entry.get("inputs", params.pop("inputs", None))
        inputs = tuple(renamed.get(s, s) for s in (inputs if inputs is not None else [prev]))
        if kind == "batchnorm":
            src = next((l for l in layers if l.name == inputs[0]), None)
            if src is None or src.kind != "conv2d" or len(inputs) != 1:
                raise SpecError(f"{name}: batchnorm must directly follow a conv2d")
            if any(src.name in l.inputs for l in layers):
                raise SpecError(f"{name}: conv {src.name} feeds other layers; cannot fold")
            stats = [_load_array(base, entry.get(k)) for k in ("gamma", "beta", "mean", "var")]
            if any(s is None for s in stats):
                raise SpecError(f"{name}: batchnorm needs gamma, beta, mean and var files")
            oc = src.weight.shape[0]
            if any(s.shape != (oc,) for s in stats):
                raise SpecError(f"{name}: batchnorm statistics must have length {oc}")
            bias = src.bias if src.bias is not None else np.zeros(oc)
            w, b = fold_batchnorm(src.weight, bias, *stats, float(params.get("eps", 1e-5)))
            layers[layers.index(src)] = LayerSpec(src.name, src.kind, src.inputs, src.params, w, b)
            renamed[name] = src.name
            prev = src.name
            continue
        weight = _load_array(base, entry.get("weights"))
        bias = _load_array(base, entry.get("bias"))
        if kind in _WEIGHTED and weight is None:
            raise SpecError(f"{name}: {kind} needs a weights file")
        if kind in _WEIGHTED and bias is None and weight is not None:
            bias = np.zeros(weight.shape[0])
        layers.append(LayerSpec(name, kind, inputs, params, weight, bias))
        prev = name
    return build_network(layers, input_shape, classes)


# ---------------------------------------------------------------- forward

def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct convolution (cross-correlation): one accumulation per kernel tap."""
    n, _, h, wd = x.shape
    oc, _, kh, kw = w.shape
    ho, wo = conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, oc, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("ncyx,oc->noyx", patch, w[:, :, i, j])
    return out


def conv2d_transpose(g: np.ndarray, w: np.ndarray, in_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input."""
    n, c, h, wd = in_shape
    _, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                "noyx,oc->ncyx", g, w[:, :, i, j]
            )
    return gp[:, :, pad : pad + h, pad : pad + wd]


def pool_windows(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """(N, C, Ho, Wo, window*window) view of max-pool windows, row-major within a window."""
    n, c, h, w = x.shape
    ho, wo = conv_out(h, window, stride, 0), conv_out(w, window, stride, 0)
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    return win[:, :, : stride * ho : stride, : stride * wo : stride].reshape(n, c, ho, wo, window * window)


def run_layer(layer: LayerSpec, inputs: list[np.ndarray]) -> np.ndarray:
    kind = layer.kind
    x = inputs[0]
    if kind == "conv2d":
        return conv2d(x, layer.weight, layer.stride, layer.padding) + layer.bias[None, :, None, None]
    if kind == "dense":
        return x @ layer.weight.T + layer.bias
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool":
        win = int(layer.params["window"])
        return pool_windows(x, win, int(layer.params.get("stride", win))).max(axis=-1)
    if kind == "avgpool_global":
        return x.mean(axis=(2, 3))
    if kind == "add":
        return inputs[0] + inputs[1]
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "softmax_head":
        return x
    if kind == "affine":
        scale = np.asarray(layer.params["scale"], dtype=np.float64)
        shift = np.asarray(layer.params["shift"], dtype=np.float64)
        return x * scale[None, :, None, None] + shift[None, :, None, None]
    raise SpecError(f"{layer.name}: unknown layer kind {kind!r}")


def forward(net: NetworkSpec, batch: np.ndarray, trace: bool = False):
    """Run inference on an (N, C, H, W) batch.

    Returns ``(logits, trace)`` where ``trace`` is an :class:`ActivationTrace`
    when requested and ``None`` otherwise.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input (N, {net.input_shape})")
    values = {INPUT: batch}
    for layer in net.layers:
        values[layer.name] = run_layer(layer, [values[s] for s in layer.inputs])
    logits = values[net.output]
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"{net.output}: non-finite logits")
    if not trace:
        return logits, None
    del values[INPUT]
    return logits, ActivationTrace(batch, values)


def softmax(logits) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise NumericError("softmax of NaN logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- fixtures

def make_synthetic_network(
    seed: int,
    depth: int,
    channels: list[int],
    out_dir: str | os.PathLike,
    *,
    input_shape=(3, 16, 16),
    classes: int = 5,
    zero_bias: bool = False,
    maxpool: bool = True,
    residual: bool = False,
):
    """Write a random conv net (manifest plus NPY weights) and load it back.

    Layout: ``depth`` blocks of 3x3 conv (padding 1) + ReLU, a 2x2 max-pool
    after the first block when ``maxpool`` is set, an optional residual
    1x1-conv branch merged by ``add`` after the last block, then global
    average pooling and a dense classifier. Weights and biases are drawn in
    layer order from one SplitMix64 stream, uniform on [-0.5, 0.5).

    Returns ``(NetworkSpec, [written files])``.
    """
    if depth < 1:
        raise SpecError("depth must be >= 1")
    if len(channels) != depth:
        raise SpecError(f"need one channel count per conv block ({depth}), got {channels}")
    out_dir = Path(out_dir)
    rng = SplitMix64(seed)
    entries, files = [], []

    def draw(shape):
        return rng.uniform(int(np.prod(shape)), -0.5, 0.5).reshape(shape).astype(np.float32)

    def weighted(name, kind, shape, params, inputs):
        wfile, bfile = f"{name}.weight.npy", f"{name}.bias.npy"
        write_npy(draw(shape), out_dir / wfile)
        bias = np.zeros(shape[0], np.float32) if zero_bias else draw((shape[0],))
        write_npy(bias, out_dir / bfile)
        files.extend([out_dir / wfile, out_dir / bfile])
        entries.append({"name": name, "kind": kind, "params": params, "inputs": inputs,
                        "weights": wfile, "bias": bfile})

    def plain(name, kind, inputs, params=None):
        entries.append({"name": name, "kind": kind, "params": params or {}, "inputs": inputs})

    c, h, _ = input_shape
    prev = INPUT
    for i, oc in enumerate(channels, start=1):
        weighted(f"conv{i}", "conv2d", (oc, c, 3, 3),
                 {"out_channels": oc, "kernel": [3, 3], "stride": 1, "padding": 1}, [prev])
        plain(f"relu{i}", "relu", [f"conv{i}"])
        prev, c = f"relu{i}", oc
        if i == 1 and maxpool and h >= 4:
            plain("pool1", "maxpool", [prev], {"window": 2, "stride": 2})
            prev = "pool1"
    if residual:
        weighted("conv_res", "conv2d", (c, c, 1, 1),
                 {"out_channels": c, "kernel": [1, 1], "stride": 1, "padding": 0}, [prev])
        plain("relu_res", "relu", ["conv_res"])
        plain("add_res", "add", [prev, "relu_res"])
        prev = "add_res"
    plain("gap", "avgpool_global", [prev])
    weighted("fc", "dense", (classes, c), {"out_features": classes}, ["gap"])
    plain("head", "softmax_head", ["fc"])

    manifest = out_dir / "manifest.json"
    write_json(manifest, {"input_shape": list(input_shape), "classes": classes, "layers": entries})
    files.insert(0, manifest)
    return load_network(manifest), files
