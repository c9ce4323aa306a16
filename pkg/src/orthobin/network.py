"""Network container: dense/conv layers, capture of per-layer inputs,
full-precision pretraining, and the versioned checkpoint format."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .optim import Adam
from .quantize import BinaryLayer

CHECKPOINT_FORMAT = "orthobin-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    """Static description of one layer.

    dense: weight is d_in x d_out. conv2d: weight is stored matricized as
    (n_in * kernel^2) x n_out, matching the unfold patch layout. activation
    layers carry only a function tag ("relu" or "sign").
    """

    kind: str
    d_in: int | None = None
    d_out: int | None = None
    n_in: int | None = None
    n_out: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    fn: str | None = None
    full_precision: bool = False

    @staticmethod
    def dense(d_in: int, d_out: int, full_precision: bool = False) -> "LayerSpec":
        return LayerSpec("dense", d_in=d_in, d_out=d_out,
                         full_precision=full_precision)

    @staticmethod
    def conv2d(n_in: int, n_out: int, kernel: int, stride: int = 1,
               padding: int = 0, full_precision: bool = False) -> "LayerSpec":
        return LayerSpec("conv2d", n_in=n_in, n_out=n_out, kernel=kernel,
                         stride=stride, padding=padding,
                         full_precision=full_precision)

    @staticmethod
    def activation(fn: str = "relu") -> "LayerSpec":
        if fn not in ("relu", "sign"):
            raise ValueError(f"unknown activation {fn!r}")
        return LayerSpec("activation", fn=fn)

    @property
    def has_weight(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def weight_shape(self) -> tuple[int, int]:
        """Shape of the matricized weight."""
        if self.kind == "dense":
            return (self.d_in, self.d_out)
        if self.kind == "conv2d":
            return (self.n_in * self.kernel * self.kernel, self.n_out)
        raise ShapeError(f"{self.kind} layer has no weight")


class Layer:
    """Runtime layer: spec plus mutable weight / scale / frozen-bit state."""

    def __init__(self, spec: LayerSpec, weight: np.ndarray | None = None):
        self.spec = spec
        self.weight: Tensor | None = None
        self.alpha: Tensor | None = None
        self.binary: BinaryLayer | None = None
        if spec.has_weight:
            shape = spec.weight_shape()
            if weight is None:
                weight = np.zeros(shape)
            weight = np.asarray(weight, dtype=np.float64)
            if weight.shape != shape:
                raise ShapeError(f"weight shape {weight.shape}, want {shape}")
            self.weight = Tensor(weight, requires_grad=True)

    def ensure_alpha(self) -> Tensor:
        """Create the trainable per-output-channel scale if absent,
        initialized to the closed-form mean(|column|)."""
        if self.alpha is None:
            a = np.abs(self.weight.data).mean(axis=0)
            a = np.where(a == 0.0, np.finfo(np.float64).eps, a)
            self.alpha = Tensor(a, requires_grad=True)
        return self.alpha


class LayerInputBuffer:
    """Captured inputs to one layer, reservoir-sampled to a fixed capacity."""

    def __init__(self, layer_index: int, dim: int, capacity: int = 4096,
                 rng: np.random.Generator | None = None):
        self.layer_index = layer_index
        self.dim = dim
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._store = np.zeros((capacity, dim))
        self.seen = 0
        self.used = 0

    def add_rows(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ShapeError(f"buffer rows {rows.shape}, want (*, {self.dim})")
        for r in rows:
            if self.used < self.capacity:
                self._store[self.used] = r
                self.used += 1
            else:
                j = int(self.rng.integers(0, self.seen + 1))
                if j < self.capacity:
                    self._store[j] = r
            self.seen += 1

    def matrix(self) -> np.ndarray:
        return self._store[: self.used].copy()

    def __len__(self) -> int:
        return self.used


# ---------------------------------------------------------------------------
# Patch extraction (convolution as matrix multiplication)


def _conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"kernel {k} larger than padded image {hp}x{wp}")
    return (hp - k) // stride + 1, (wp - k) // stride + 1


def unfold_patches(image: np.ndarray, kernel: int, stride: int = 1,
                   padding: int = 0) -> np.ndarray:
    """Extract sliding-window patches as rows.

    Accepts (C, H, W) or a batch (B, C, H, W); returns (P, C*k*k) or
    (B*P, C*k*k) with one row per output spatial position (row-major over
    positions, samples outermost). Columns are ordered channel-major, then
    row-major within the kernel window.
    """
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    if image.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) image, got {image.shape}")
    b, c, h, w = image.shape
    oh, ow = _conv_out_hw(h, w, kernel, stride, padding)
    padded = np.pad(image, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.zeros((b, c, kernel, kernel, oh, ow))
    for y in range(kernel):
        for x in range(kernel):
            col[:, :, y, x] = padded[:, :, y:y + stride * oh:stride,
                                     x:x + stride * ow:stride]
    rows = col.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kernel * kernel)
    return rows


def fold_patches(rows: np.ndarray, image_shape: tuple[int, ...], kernel: int,
                 stride: int = 1, padding: int = 0,
                 average: bool = True) -> np.ndarray:
    """Adjoint-style inverse of :func:`unfold_patches`.

    Scatter-adds patch rows back onto the padded image; with ``average``
    overlapping contributions are divided by their multiplicity, so the
    round trip reproduces the padded image exactly (and exactly equals it
    where every pixel is covered at least once).
    """
    squeeze = len(image_shape) == 3
    if squeeze:
        image_shape = (1,) + tuple(image_shape)
    b, c, h, w = image_shape
    oh, ow = _conv_out_hw(h, w, kernel, stride, padding)
    g = np.asarray(rows, dtype=np.float64).reshape(b, oh, ow, c, kernel, kernel)
    g = g.transpose(0, 3, 4, 5, 1, 2)
    acc = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    cnt = np.zeros_like(acc)
    for y in range(kernel):
        for x in range(kernel):
            acc[:, :, y:y + stride * oh:stride, x:x + stride * ow:stride] += g[:, :, y, x]
            cnt[:, :, y:y + stride * oh:stride, x:x + stride * ow:stride] += 1.0
    if average:
        acc = np.divide(acc, cnt, out=acc, where=cnt > 0)
    out = acc[:, :, padding:padding + h, padding:padding + w]
    return out[0] if squeeze else out


def unfold_op(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Autodiff wrapper around patch extraction; backward scatter-adds."""
    shape = x.shape
    data = unfold_patches(x.data, kernel, stride, padding)

    def vjp(g: np.ndarray) -> np.ndarray:
        return _fold_sum(g, shape, kernel, stride, padding)

    return ad._node(data, (x,), (vjp,))


def _fold_sum(rows: np.ndarray, image_shape: tuple[int, ...], kernel: int,
              stride: int, padding: int) -> np.ndarray:
    b, c, h, w = image_shape
    oh, ow = _conv_out_hw(h, w, kernel, stride, padding)
    g = rows.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    acc = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for y in range(kernel):
        for x in range(kernel):
            acc[:, :, y:y + stride * oh:stride, x:x + stride * ow:stride] += g[:, :, y, x]
    return acc[:, :, padding:padding + h, padding:padding + w]


# ---------------------------------------------------------------------------
# Network


class Network:
    """Ordered layer list with a softmax cross-entropy head."""

    def __init__(self, layers: list[Layer], input_dim: int):
        self.layers = layers
        self.input_dim = input_dim

    @staticmethod
    def mlp(dims: list[int], full_precision_ends: bool = True) -> "Network":
        """Dense stack with relu between weight layers. The first and last
        weight layers are flagged to stay in full precision by default."""
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        layers: list[Layer] = []
        n_weights = len(dims) - 1
        for i in range(n_weights):
            fp = full_precision_ends and (i == 0 or i == n_weights - 1)
            layers.append(Layer(LayerSpec.dense(dims[i], dims[i + 1], fp)))
            if i < n_weights - 1:
                layers.append(Layer(LayerSpec.activation("relu")))
        return Network(layers, dims[0])

    def weight_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.spec.has_weight]

    def quantizable_layers(self) -> list[int]:
        return [i for i in self.weight_layers()
                if not self.layers[i].spec.full_precision]

    def init_weights(self, rng: np.random.Generator) -> None:
        """He-style gaussian init, scaled by the fan-in of each layer."""
        for i in self.weight_layers():
            layer = self.layers[i]
            fan_in = layer.spec.weight_shape()[0]
            layer.weight.data[...] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), size=layer.weight.data.shape)

    def copy_weights(self) -> dict[int, np.ndarray]:
        return {i: self.layers[i].weight.data.copy() for i in self.weight_layers()}

    def forward(self, x, quant_layers: frozenset[int] = frozenset(),
                binarize_acts: bool = False, capture: int | None = None,
                buffer: LayerInputBuffer | None = None) -> Tensor:
        """Run the network and return logits.

        ``quant_layers`` lists layer indices whose weights are simulated as
        sign(w) times the per-channel scale (with straight-through
        gradients); layers holding frozen bits always use them. When
        ``capture`` names a layer index, the inputs reaching that layer
        (patch rows for conv) are appended to ``buffer``.
        """
        out = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        fan_in = 1
        for idx, layer in enumerate(self.layers):
            spec = layer.spec
            if spec.kind == "activation":
                fn = spec.fn
                if binarize_acts and fn == "relu":
                    fn = "sign"
                if fn == "sign":
                    # sign(x/c) = sign(x): the fan-in scaling leaves the
                    # forward untouched and only widens the straight-through
                    # surrogate's active band to the pre-activation scale
                    # (the role normalization layers play at full scale).
                    out = ad.sign_ste(ad.scale(out, 1.0 / np.sqrt(fan_in)))
                else:
                    out = ad.relu(out)
                continue
            if spec.kind == "dense" and out.data.ndim == 4:
                b = out.data.shape[0]
                out = ad.reshape(out, (b, out.data.size // b))
            if spec.kind == "conv2d":
                if out.data.ndim != 4:
                    raise ShapeError(
                        f"conv layer {idx} needs (B, C, H, W), got {out.shape}")
                out = unfold_op(out, spec.kernel, spec.stride, spec.padding)
            if spec.kind == "dense" and out.data.shape[1] != spec.d_in:
                raise ShapeError(
                    f"layer {idx} expects {spec.d_in} features, got {out.data.shape[1]}")
            if capture == idx:
                if buffer is None:
                    raise ValueError("capture requested without a buffer")
                buffer.add_rows(out.data)
            fan_in = spec.weight_shape()[0]
            w_eff = self._effective_weight(idx, layer, quant_layers)
            out = ad.matmul(out, w_eff)
            if spec.kind == "conv2d":
                b = x.shape[0] if isinstance(x, Tensor) else np.asarray(x).shape[0]
                oh, ow = self._conv_out(idx, x)
                out = ad.reshape(out, (b, oh, ow, spec.n_out))
                out = ad.transpose(out, (0, 3, 1, 2))
        return out

    def _conv_out(self, idx: int, x) -> tuple[int, int]:
        # Recompute spatial dims by replaying shapes up to layer idx.
        shape = (x.shape if isinstance(x, Tensor) else np.asarray(x).shape)[1:]
        for i, layer in enumerate(self.layers[: idx + 1]):
            spec = layer.spec
            if spec.kind == "conv2d":
                oh, ow = _conv_out_hw(shape[1], shape[2], spec.kernel,
                                      spec.stride, spec.padding)
                shape = (spec.n_out, oh, ow)
        return shape[1], shape[2]

    def _effective_weight(self, idx: int, layer: Layer,
                          quant_layers: frozenset[int]) -> Tensor:
        if layer.binary is not None:
            return Tensor(layer.binary.dense())
        if idx in quant_layers:
            alpha = layer.ensure_alpha()
            return ad.scale_cols(ad.sign_ste(layer.weight), alpha)
        return layer.weight

    def predict(self, x, **kwargs) -> np.ndarray:
        logits = self.forward(x, **kwargs)
        return np.argmax(logits.data, axis=1)


def evaluate_accuracy(net: Network, features: np.ndarray, labels: np.ndarray,
                      **forward_kwargs) -> float:
    pred = net.predict(features, **forward_kwargs)
    return float(np.mean(pred == np.asarray(labels)))


def pretrain(net: Network, features: np.ndarray, labels: np.ndarray, *,
             epochs: int, lr: float, batch_size: int,
             rng: np.random.Generator,
             test: tuple[np.ndarray, np.ndarray] | None = None,
             binarize_acts: bool = False) -> list[dict]:
    """Full-precision training with Adam on softmax cross-entropy.

    Mutates the network weights in place; with epochs=0 the weights are
    untouched. Returns one history row per epoch.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n == 0:
        raise ValueError("pretrain needs a nonempty dataset")
    params = [net.layers[i].weight for i in net.weight_layers()]
    opt = Adam(params, lr=lr)
    history: list[dict] = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            logits = net.forward(features[idx], binarize_acts=binarize_acts)
            loss = ad.softmax_cross_entropy(logits, labels[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "train_accuracy": evaluate_accuracy(net, features, labels,
                                                   binarize_acts=binarize_acts)}
        if test is not None:
            row["test_accuracy"] = evaluate_accuracy(net, test[0], test[1],
                                                     binarize_acts=binarize_acts)
        history.append(row)
    return history


# ---------------------------------------------------------------------------
# Checkpoint format (documented in the README)


def _spec_to_json(spec: LayerSpec) -> dict:
    out = {"kind": spec.kind}
    if spec.kind == "dense":
        out.update(d_in=spec.d_in, d_out=spec.d_out,
                   full_precision=spec.full_precision)
    elif spec.kind == "conv2d":
        out.update(n_in=spec.n_in, n_out=spec.n_out, kernel=spec.kernel,
                   stride=spec.stride, padding=spec.padding,
                   full_precision=spec.full_precision)
    else:
        out["fn"] = spec.fn
    return out


def _spec_from_json(d: dict) -> LayerSpec:
    kind = d["kind"]
    if kind == "dense":
        return LayerSpec.dense(d["d_in"], d["d_out"], d.get("full_precision", False))
    if kind == "conv2d":
        return LayerSpec.conv2d(d["n_in"], d["n_out"], d["kernel"],
                                d.get("stride", 1), d.get("padding", 0),
                                d.get("full_precision", False))
    if kind == "activation":
        return LayerSpec.activation(d["fn"])
    raise ValueError(f"unknown layer kind {kind!r}")


def save_checkpoint(net: Network, path: str) -> None:
    """Write the versioned JSON checkpoint (weights row-major float64;
    frozen sign bits as little-endian 64-bit words)."""
    layers = []
    for layer in net.layers:
        entry = _spec_to_json(layer.spec)
        if layer.spec.has_weight:
            entry["weight"] = [float(v) for v in layer.weight.data.ravel()]
            entry["alpha"] = ([float(v) for v in layer.alpha.data]
                              if layer.alpha is not None else None)
            if layer.binary is not None:
                b = layer.binary
                entry["binary"] = {
                    "rows": b.rows, "cols": b.cols,
                    "words": [int(w) for w in b.words.ravel()],
                    "alpha": [float(a) for a in b.alpha],
                    "zero_channels": list(b.zero_channels),
                }
            else:
                entry["binary"] = None
        layers.append(entry)
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "input_dim": net.input_dim, "layers": layers}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path: str) -> Network:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    layers = []
    for entry in doc["layers"]:
        spec = _spec_from_json(entry)
        layer = Layer(spec)
        if spec.has_weight:
            shape = spec.weight_shape()
            layer.weight = Tensor(
                np.asarray(entry["weight"], dtype=np.float64).reshape(shape),
                requires_grad=True)
            if entry.get("alpha") is not None:
                layer.alpha = Tensor(np.asarray(entry["alpha"]), requires_grad=True)
            if entry.get("binary") is not None:
                b = entry["binary"]
                words = np.asarray(b["words"], dtype=np.uint64).reshape(
                    b["rows"], -1)
                layer.binary = BinaryLayer(b["rows"], b["cols"], words,
                                           np.asarray(b["alpha"]),
                                           tuple(b.get("zero_channels", ())))
        layers.append(layer)
    return Network(layers, doc["input_dim"])
