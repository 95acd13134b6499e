"""Network intermediate representation, quantization and fixed-point inference.

The layer descriptions double as the ground truth that extraction results are
compared against. All inference arithmetic is integer and deterministic so it
can serve as the functional oracle for the power simulator.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WEIGHT_BITS = 8
QMAX = 127  # symmetric int8, -128 never produced


class ShapeError(ValueError):
    pass


class NetworkFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "pool" | "fc"
    out_channels: int = 0   # conv
    kernel: int = 0         # conv, per-side pixels
    stride: int = 1         # conv
    padding: int = 0        # conv
    pool_size: int = 0      # pool, per-side pixels
    out_features: int = 0   # fc

    def __post_init__(self):
        if self.kind == "conv":
            if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ShapeError(f"invalid conv layer: {self}")
        elif self.kind == "pool":
            if self.pool_size < 1:
                raise ShapeError(f"invalid pool layer: {self}")
        elif self.kind == "fc":
            if self.out_features < 1:
                raise ShapeError(f"invalid fc layer: {self}")
        else:
            raise ShapeError(f"unknown layer kind {self.kind!r}")


def conv(out_channels, kernel, stride=1, padding=0):
    return LayerSpec("conv", out_channels=out_channels, kernel=kernel,
                     stride=stride, padding=padding)


def pool(size):
    return LayerSpec("pool", pool_size=size)


def fc(out_features):
    return LayerSpec("fc", out_features=out_features)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple  # (channels, height, width), square images
    layers: tuple

    def __post_init__(self):
        c, h, w = self.input_shape
        if c < 1 or h < 1 or w < 1:
            raise ShapeError(f"invalid input shape {self.input_shape}")
        if h != w:
            raise ShapeError("only square inputs are supported")
        if not self.layers:
            raise ShapeError("network has no layers")
        propagate_shapes(self)  # validates every layer


@dataclass
class QuantizedWeights:
    """Per-layer signed 8-bit tensors with one real scale factor each.

    Conv tensors are (out_channels, in_channels, K, K); fc tensors are
    (out_features, in_features). Pool layers carry no entry.
    """
    tensors: list = field(default_factory=list)   # int8 arrays, in VMM-layer order
    scales: list = field(default_factory=list)    # float per tensor


def propagate_shapes(net: NetworkSpec):
    """Feature-map shape (channels, H, W) after each layer.

    Conv follows W_out = (W_in - K + 2P)/S + 1; pooling divides the side by the
    pool size; both divisions must be exact. An fc layer flattens whatever
    precedes it and collapses to (features, 1, 1).
    """
    shapes = []
    c, h, w = net.input_shape
    for i, layer in enumerate(net.layers):
        name = f"layer {i} ({layer.kind})"
        if layer.kind == "conv":
            if h == 1 and w == 1 and shapes and net.layers[i - 1].kind == "fc":
                raise ShapeError(f"{name}: conv cannot follow fc")
            num = w - layer.kernel + 2 * layer.padding
            if num < 0 or num % layer.stride != 0:
                raise ShapeError(
                    f"{name}: (W_in - K + 2P)/S = ({w} - {layer.kernel} + "
                    f"2*{layer.padding})/{layer.stride} is not a whole number")
            w = h = num // layer.stride + 1
            c = layer.out_channels
        elif layer.kind == "pool":
            if w % layer.pool_size != 0:
                raise ShapeError(f"{name}: {w} not divisible by pool size {layer.pool_size}")
            w = h = w // layer.pool_size
        elif layer.kind == "fc":
            c, h, w = layer.out_features, 1, 1
        shapes.append((c, h, w))
    return shapes


def vmm_layers(net: NetworkSpec):
    """Indices of layers that perform VMMs (conv and fc, not pool)."""
    return [i for i, l in enumerate(net.layers) if l.kind in ("conv", "fc")]


def layer_weight_shape(net: NetworkSpec, index: int):
    """Weight tensor shape for a conv/fc layer, derived from shape propagation."""
    shapes = propagate_shapes(net)
    layer = net.layers[index]
    c_in, h, w = net.input_shape if index == 0 else shapes[index - 1]
    if layer.kind == "conv":
        return (layer.out_channels, c_in, layer.kernel, layer.kernel)
    if layer.kind == "fc":
        return (layer.out_features, c_in * h * w)
    raise ShapeError(f"layer {index} has no weights")


def quantize_weights(weights, bits=WEIGHT_BITS) -> QuantizedWeights:
    """Symmetric per-tensor quantization: scale = max|w|/127, clamp to +-127.

    An all-zero tensor gets scale 1.0 so the operation is total.
    """
    if bits != WEIGHT_BITS:
        raise ValueError(f"only {WEIGHT_BITS}-bit weights are supported")
    qw = QuantizedWeights()
    for w in weights:
        w = np.asarray(w, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        amax = np.max(np.abs(w)) if w.size else 0.0
        scale = amax / QMAX if amax > 0 else 1.0
        q = np.clip(np.round(w / scale), -QMAX, QMAX).astype(np.int8)
        qw.tensors.append(q)
        qw.scales.append(float(scale))
    return qw


def dequantize(qw: QuantizedWeights):
    return [t.astype(np.float64) * s for t, s in zip(qw.tensors, qw.scales)]


def random_weights(net: NetworkSpec, seed):
    """Gaussian float weights for every VMM layer (pre-training stand-in)."""
    rng = np.random.default_rng(seed)
    return [rng.normal(0.0, 1.0, layer_weight_shape(net, i)) for i in vmm_layers(net)]


def requantize_activations(acc):
    """Rescale non-negative integer activations into uint8 for the next layer.

    Pure integer arithmetic ((x * 255) // max) so the simulator and the
    reference inference produce bit-identical intermediate tensors.
    """
    acc = np.asarray(acc)
    m = int(acc.max()) if acc.size else 0
    if m <= 0:
        return np.zeros(acc.shape, dtype=np.uint8)
    return ((acc.astype(np.int64) * 255) // m).astype(np.uint8)


def _conv2d_int(x, w, stride, padding):
    """Integer 2D convolution via sliding windows; accumulator int64."""
    c_in, h, wdt = x.shape
    if padding:
        xp = np.zeros((c_in, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + wdt] = x
        x = xp
    k = w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (c_in, H_out, W_out, k, k)
    return np.einsum("cijxy,ocxy->oij", win.astype(np.int64), w.astype(np.int64))


def _maxpool_int(x, size):
    c, h, w = x.shape
    v = x.reshape(c, h // size, size, w // size, size)
    return v.max(axis=(2, 4))


def infer_reference(net: NetworkSpec, qw: QuantizedWeights, image):
    """Bit-exact fixed-point forward pass; returns per-layer integer outputs.

    ReLU plus 8-bit requantization after every conv/fc except the last VMM
    layer, max pooling for pool layers, no biases. The final entry holds the
    raw integer logits.
    """
    image = np.asarray(image)
    if image.shape != tuple(net.input_shape):
        raise ShapeError(f"image shape {image.shape} != input shape {net.input_shape}")
    if image.dtype != np.uint8:
        raise ShapeError("image must be uint8")
    vmms = vmm_layers(net)
    last_vmm = vmms[-1]
    outputs = []
    x = image
    wi = 0
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv":
            acc = _conv2d_int(x, qw.tensors[wi], layer.stride, layer.padding)
            wi += 1
        elif layer.kind == "fc":
            acc = qw.tensors[wi].astype(np.int64) @ x.astype(np.int64).ravel()
            wi += 1
        else:
            outputs.append(_maxpool_int(x, layer.pool_size))
            x = outputs[-1]
            continue
        if i == last_vmm:
            outputs.append(acc)
            x = acc
        else:
            acc = np.maximum(acc, 0)
            x = requantize_activations(acc)
            outputs.append(x)
    return outputs


# ---------------------------------------------------------------------------
# Network config file: one directive per line.
#
#   input = C H W
#   conv out=<n> k=<n> [stride=<n>] [pad=<n>]
#   pool size=<n>
#   fc out=<n>
#
# '#' starts a comment; blank lines are ignored.
# ---------------------------------------------------------------------------

def parse_network(text: str) -> NetworkSpec:
    input_shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("input"):
                dims = line.split("=", 1)[1].split()
                input_shape = tuple(int(d) for d in dims)
                if len(input_shape) != 3:
                    raise ValueError("input needs C H W")
                continue
            kind, _, rest = line.partition(" ")
            kv = dict(re.findall(r"(\w+)\s*=\s*(\d+)", rest))
            if kind == "conv":
                layers.append(conv(int(kv["out"]), int(kv["k"]),
                                   int(kv.get("stride", 1)), int(kv.get("pad", 0))))
            elif kind == "pool":
                layers.append(pool(int(kv["size"])))
            elif kind == "fc":
                layers.append(fc(int(kv["out"])))
            else:
                raise ValueError(f"unknown directive {kind!r}")
        except (KeyError, ValueError, IndexError) as e:
            raise NetworkFormatError(f"line {lineno}: {raw.strip()!r}: {e}") from e
    if input_shape is None:
        raise NetworkFormatError("missing 'input = C H W' line")
    if not layers:
        raise NetworkFormatError("no layers defined")
    return NetworkSpec(input_shape, tuple(layers))


def format_network(net: NetworkSpec) -> str:
    lines = ["input = %d %d %d" % net.input_shape]
    for l in net.layers:
        if l.kind == "conv":
            lines.append(f"conv out={l.out_channels} k={l.kernel} "
                         f"stride={l.stride} pad={l.padding}")
        elif l.kind == "pool":
            lines.append(f"pool size={l.pool_size}")
        else:
            lines.append(f"fc out={l.out_features}")
    return "\n".join(lines) + "\n"


def load_network(path) -> NetworkSpec:
    return parse_network(Path(path).read_text())


def save_network(net: NetworkSpec, path):
    Path(path).write_text(format_network(net))


def lenet() -> NetworkSpec:
    """The shipped ground-truth network (CIFAR-10 input)."""
    return load_network(Path(__file__).parent / "data" / "lenet_cifar10.txt")


# ---------------------------------------------------------------------------
# Weight files: flat little-endian int8 binary plus a JSON sidecar manifest
# carrying shapes and scales.
# ---------------------------------------------------------------------------

def save_weights(qw: QuantizedWeights, path):
    path = Path(path)
    blob = b"".join(np.ascontiguousarray(t, dtype=np.int8).tobytes() for t in qw.tensors)
    path.write_bytes(blob)
    manifest = {
        "dtype": "int8",
        "byte_order": "little",
        "tensors": [{"shape": list(t.shape), "scale": s}
                    for t, s in zip(qw.tensors, qw.scales)],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=1))


def load_weights(path) -> QuantizedWeights:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    blob = np.frombuffer(path.read_bytes(), dtype=np.int8)
    qw = QuantizedWeights()
    off = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        qw.tensors.append(blob[off:off + n].reshape(shape).copy())
        qw.scales.append(float(entry["scale"]))
        off += n
    if off != blob.size:
        raise NetworkFormatError(f"weight file holds {blob.size} values, manifest expects {off}")
    return qw


def load_cifar_batch(path, count=None):
    """Images from a raw CIFAR-10 binary batch (3073-byte records)."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size % 3073 != 0:
        raise NetworkFormatError("not a CIFAR-10 batch file (record size 3073)")
    recs = raw.reshape(-1, 3073)
    if count is not None:
        recs = recs[:count]
    return recs[:, 1:].reshape(-1, 3, 32, 32).copy()
