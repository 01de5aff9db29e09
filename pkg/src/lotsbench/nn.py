"""Small differentiable feedforward / convolutional network in numpy.

Images enter the network as ``(H, W, C)`` arrays on the [0, 255] pixel scale
and are divided by 255 at the boundary.  Gradients with respect to the input
are reported back on the pixel scale, so a step of 1.0 means one pixel level.

Only four layer kinds exist: ``dense``, ``convolution``, ``relu`` and
``pooling`` (max or average).  The last layer must be dense with
``num_classes`` outputs; those outputs are the logits (activation vector).
Softmax is applied outside the layer stack.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PIXEL_SCALE = 255.0

MODEL_MAGIC = b"LOTSNET\x00"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a model file cannot be decoded."""


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Dense:
    kind = "dense"

    def __init__(self, in_features, out_features, weight=None, bias=None):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = (np.zeros((self.in_features, self.out_features))
                       if weight is None else np.asarray(weight, dtype=np.float64))
        self.bias = (np.zeros(self.out_features)
                     if bias is None else np.asarray(bias, dtype=np.float64))
        if self.weight.shape != (self.in_features, self.out_features):
            raise ValueError(f"dense weight shape {self.weight.shape} does not match "
                             f"({self.in_features}, {self.out_features})")
        if self.bias.shape != (self.out_features,):
            raise ValueError(f"dense bias shape {self.bias.shape} does not match ({self.out_features},)")

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != self.in_features:
            raise ValueError(f"dense layer expects {self.in_features} inputs, got shape {input_shape}")
        return (self.out_features,)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.weight + self.bias, x.shape

    def backward(self, grad_out, cache, x):
        in_shape = cache
        flat = x.reshape(x.shape[0], -1)
        grads = {"weight": flat.T @ grad_out, "bias": grad_out.sum(axis=0)}
        return (grad_out @ self.weight.T).reshape(in_shape), grads

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def describe(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


class Conv2D:
    """Stride-1 convolution (cross-correlation) with 'same' or 'valid' padding."""

    kind = "convolution"

    def __init__(self, in_channels, out_channels, kernel_size=3, padding="same",
                 weight=None, bias=None):
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        if padding == "same" and kernel_size % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel size")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.padding = padding
        wshape = (self.kernel_size, self.kernel_size, self.in_channels, self.out_channels)
        self.weight = np.zeros(wshape) if weight is None else np.asarray(weight, dtype=np.float64)
        self.bias = (np.zeros(self.out_channels)
                     if bias is None else np.asarray(bias, dtype=np.float64))
        if self.weight.shape != wshape:
            raise ValueError(f"convolution weight shape {self.weight.shape} does not match {wshape}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(f"convolution bias shape {self.bias.shape} does not match ({self.out_channels},)")

    @property
    def _pad(self):
        return self.kernel_size // 2 if self.padding == "same" else 0

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[2] != self.in_channels:
            raise ValueError(f"convolution expects (H, W, {self.in_channels}) input, got {input_shape}")
        h, w, _ = input_shape
        k, p = self.kernel_size, self._pad
        oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"input {input_shape} is smaller than the {k}x{k} kernel")
        return (oh, ow, self.out_channels)

    def _columns(self, x):
        p = self._pad
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        # (N, OH, OW, C, k, k) -> (N, OH, OW, k, k, C)
        win = sliding_window_view(x, (self.kernel_size, self.kernel_size), axis=(1, 2))
        return win.transpose(0, 1, 2, 4, 5, 3)

    def forward(self, x):
        cols = self._columns(x)
        n, oh, ow = cols.shape[:3]
        flat = cols.reshape(n * oh * ow, -1)
        out = flat @ self.weight.reshape(-1, self.out_channels) + self.bias
        return out.reshape(n, oh, ow, self.out_channels), flat

    def backward(self, grad_out, cache, x):
        flat = cache
        n, oh, ow, _ = grad_out.shape
        k, p, c = self.kernel_size, self._pad, self.in_channels
        g = grad_out.reshape(-1, self.out_channels)
        grads = {
            "weight": (flat.T @ g).reshape(self.weight.shape),
            "bias": g.sum(axis=0),
        }
        gcols = (g @ self.weight.reshape(-1, self.out_channels).T).reshape(n, oh, ow, k, k, c)
        hp, wp = x.shape[1] + 2 * p, x.shape[2] + 2 * p
        gx = np.zeros((n, hp, wp, c))
        for i in range(k):
            for j in range(k):
                gx[:, i:i + oh, j:j + ow, :] += gcols[:, :, :, i, j, :]
        if p:
            gx = gx[:, p:-p, p:-p, :]
        return gx, grads

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def describe(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "padding": self.padding}


class ReLU:
    kind = "relu"

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad_out, cache, x):
        return grad_out * cache, {}

    def params(self):
        return {}

    def describe(self):
        return {"kind": self.kind}


class Pool2D:
    """Non-overlapping max or average pooling.

    Trailing rows/columns that do not fill a window are dropped.  Max pooling
    routes the gradient to the first maximal element of each window.
    """

    kind = "pooling"

    def __init__(self, size=2, mode="max"):
        self.size = int(size)
        if self.size < 1:
            raise ValueError("pool size must be positive")
        if mode not in ("max", "avg"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.mode = mode

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ValueError(f"pooling expects (H, W, C) input, got {input_shape}")
        h, w, c = input_shape
        if h < self.size or w < self.size:
            raise ValueError(f"input {input_shape} is smaller than the pool window")
        return (h // self.size, w // self.size, c)

    def _windows(self, x):
        s = self.size
        n, h, w, c = x.shape
        oh, ow = h // s, w // s
        blocks = x[:, :oh * s, :ow * s, :].reshape(n, oh, s, ow, s, c)
        return blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, s * s)

    def forward(self, x):
        blocks = self._windows(x)
        if self.mode == "avg":
            return blocks.mean(axis=-1), None
        arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg

    def backward(self, grad_out, cache, x):
        s = self.size
        n, h, w, c = x.shape
        oh, ow = h // s, w // s
        if self.mode == "avg":
            spread = np.broadcast_to(grad_out[..., None] / (s * s), (n, oh, ow, c, s * s))
        else:
            spread = np.zeros((n, oh, ow, c, s * s))
            np.put_along_axis(spread, cache[..., None], grad_out[..., None], axis=-1)
        spread = spread.reshape(n, oh, ow, c, s, s).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros_like(x)
        gx[:, :oh * s, :ow * s, :] = spread.reshape(n, oh * s, ow * s, c)
        return gx, {}

    def params(self):
        return {}

    def describe(self):
        return {"kind": self.kind, "size": self.size, "mode": self.mode}


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Pool2D)}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class ForwardPass:
    """Per-layer inputs and caches of one batched forward pass."""

    inputs: list
    caches: list
    logits: np.ndarray
    batched: bool = True


@dataclass
class Network:
    layers: list
    num_classes: int
    input_shape: tuple
    meta: dict = field(default_factory=dict)
    pixel_scale: float = PIXEL_SCALE

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.num_classes = int(self.num_classes)
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("the last layer must be dense (it produces the logits)")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
        if shape != (self.num_classes,):
            raise ValueError(f"network produces {shape} outputs, expected ({self.num_classes},)")

    def _as_batch(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None] / self.pixel_scale, False
        if x.ndim == 4 and x.shape[1:] == self.input_shape:
            return x / self.pixel_scale, True
        raise ValueError(f"image shape {x.shape} does not match network input shape {self.input_shape}")

    def forward(self, images) -> ForwardPass:
        """Run the layer stack on one image ``(H, W, C)`` or a batch ``(N, H, W, C)``."""
        x, batched = self._as_batch(images)
        inputs, caches = [], []
        for layer in self.layers:
            inputs.append(x)
            x, cache = layer.forward(x)
            caches.append(cache)
        return ForwardPass(inputs, caches, x, batched)

    def logits(self, images) -> np.ndarray:
        fp = self.forward(images)
        return fp.logits if fp.batched else fp.logits[0]

    def backward(self, fp: ForwardPass, grad_logits, with_params=False):
        """Backpropagate ``grad_logits``; returns the gradient w.r.t. the [0, 1] input."""
        g = np.asarray(grad_logits, dtype=np.float64).reshape(fp.logits.shape)
        param_grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g, pg = self.layers[i].backward(g, fp.caches[i], fp.inputs[i])
            param_grads[i] = pg
        return (g, param_grads) if with_params else g

    def copy(self) -> "Network":
        layers = [_layer_from_descriptor(layer.describe(), {k: v.copy() for k, v in layer.params().items()})
                  for layer in self.layers]
        return Network(layers, self.num_classes, self.input_shape, dict(self.meta), self.pixel_scale)


def forward(net: Network, image):
    """Forward pass of a single image; returns ``(ForwardPass, logits)``."""
    fp = net.forward(image)
    if fp.batched:
        raise ValueError("forward expects a single image; use Network.forward for batches")
    return fp, fp.logits[0]


def softmax_probs(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_probs requires finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def input_gradient(net: Network, image, loss_grad_at_logits) -> np.ndarray:
    """Gradient of a logits-space loss with respect to the input pixels.

    ``loss_grad_at_logits`` is dL/d(logits).  The result has the image's shape
    and is expressed per pixel level (the [0, 255] scale).
    """
    g = np.asarray(loss_grad_at_logits, dtype=np.float64)
    if g.shape != (net.num_classes,):
        raise ValueError(f"loss gradient must have shape ({net.num_classes},), got {g.shape}")
    fp, _ = forward(net, image)
    return net.backward(fp, g[None])[0] / net.pixel_scale


def default_architecture(input_shape=(28, 28, 1), num_classes=10, channels=(8, 16), hidden=64, pooling="avg",
                         seed=0):
    """Two conv+relu+pool blocks, one hidden dense layer, dense logits. He-initialised."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    layers = []
    for out_c in channels:
        fan_in = 9 * c
        layers += [Conv2D(c, out_c, 3, "same", weight=rng.normal(0, np.sqrt(2 / fan_in), (3, 3, c, out_c))),
                   ReLU(), Pool2D(2, pooling)]
        h, w, c = h // 2, w // 2, out_c
    flat = h * w * c
    layers += [Dense(flat, hidden, weight=rng.normal(0, np.sqrt(2 / flat), (flat, hidden))), ReLU(),
               Dense(hidden, num_classes, weight=rng.normal(0, np.sqrt(1 / hidden), (hidden, num_classes)))]
    return Network(layers, num_classes, input_shape)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


def train(net: Network, images, labels, config: TrainConfig | None = None, log=None) -> Network:
    """Mini-batch SGD with momentum on softmax cross-entropy. Returns a trained copy."""
    config = config or TrainConfig()
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    net = net.copy()
    if config.epochs <= 0:
        return net
    rng = np.random.default_rng(config.seed)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params().items()} for layer in net.layers]
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            fp = net.forward(images[idx])
            probs = softmax_probs(fp.logits)
            y = labels[idx]
            total += -np.log(probs[np.arange(len(idx)), y] + 1e-300).sum()
            grad = probs
            grad[np.arange(len(idx)), y] -= 1.0
            grad /= len(idx)
            _, pgrads = net.backward(fp, grad, with_params=True)
            for layer, pg, vel in zip(net.layers, pgrads, velocity):
                for name, p in layer.params().items():
                    g = pg[name] + config.weight_decay * p
                    vel[name] *= config.momentum
                    vel[name] -= config.learning_rate * g
                    p += vel[name]
        if log:
            log(f"epoch {epoch + 1}/{config.epochs}: mean loss {total / n:.4f}")
    return net


def predict(net: Network, images, batch_size=512) -> np.ndarray:
    """Softmax-head labels for a batch of images."""
    images = np.asarray(images)
    out = [net.logits(images[i:i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(net: Network, images, labels) -> float:
    return float(np.mean(predict(net, images) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic  b"LOTSNET\0"
#   uint32    format version
#   uint32    header length in bytes
#   header    UTF-8 JSON: {"num_classes", "input_shape", "pixel_scale", "meta",
#                          "layers": [{"kind", ..., "params": [[name, shape], ...]}]}
#   payload   float64 little-endian arrays, row-major, in header order
#   uint64    payload length in bytes (trailer, guards against truncation)


def _layer_from_descriptor(desc, params):
    desc = dict(desc)
    kind = desc.pop("kind")
    desc.pop("params", None)
    if kind not in _LAYER_TYPES:
        raise ModelFormatError(f"unknown layer kind {kind!r}")
    return _LAYER_TYPES[kind](**desc, **params)


def save_model(net: Network, path) -> None:
    layers, payload = [], io.BytesIO()
    for layer in net.layers:
        desc = layer.describe()
        desc["params"] = []
        for name, arr in layer.params().items():
            desc["params"].append([name, list(arr.shape)])
            payload.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        layers.append(desc)
    header = json.dumps({"num_classes": net.num_classes, "input_shape": list(net.input_shape),
                         "pixel_scale": net.pixel_scale, "meta": net.meta, "layers": layers}).encode()
    body = payload.getvalue()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(header)))
        fh.write(header)
        fh.write(body)
        fh.write(struct.pack("<Q", len(body)))


def load_model(path) -> Network:
    data = Path(path).read_bytes()
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic header)")
    pos = len(MODEL_MAGIC)
    if len(data) < pos + 8:
        raise ModelFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, pos)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version} (expected {MODEL_VERSION})")
    pos += 8
    if len(data) < pos + hlen + 8:
        raise ModelFormatError(f"{path}: truncated file")
    try:
        header = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupted header ({exc})") from None
    pos += hlen
    (plen,) = struct.unpack_from("<Q", data, len(data) - 8)
    if len(data) - 8 - pos != plen:
        raise ModelFormatError(f"{path}: payload is {len(data) - 8 - pos} bytes, header promises {plen}")
    layers = []
    try:
        for desc in header["layers"]:
            params = {}
            for name, shape in desc["params"]:
                nbytes = 8 * int(np.prod(shape))
                if pos + nbytes > len(data) - 8:
                    raise ModelFormatError(f"{path}: truncated weights")
                params[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                             offset=pos).reshape(shape).astype(np.float64)
                pos += nbytes
            layers.append(_layer_from_descriptor(desc, params))
        net = Network(layers, header["num_classes"], tuple(header["input_shape"]), header.get("meta", {}),
                      float(header["pixel_scale"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: corrupted model ({exc})") from None
    if pos != len(data) - 8:
        raise ModelFormatError(f"{path}: {len(data) - 8 - pos} unexpected trailing bytes")
    return net
