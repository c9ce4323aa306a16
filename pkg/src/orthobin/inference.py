"""Bit-packed deployment of a binarized network.

The XNOR-popcount kernel evaluates +-1 dot products on packed words:
``dot = valid_bits - 2 * popcount(xor(a, w))``. Padding bits are zero in
both operands, so they cancel without branches. The float sign-simulation
path is kept alongside as the independent reference; both paths apply the
channel scale after the raw dot, so they agree bit for bit.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bitpack
from .network import Network, unfold_patches
from .quantize import BinaryLayer


@dataclass
class PackedActivation:
    """Sign bits of one activation vector (1 = +1, 0 = -1), zero padded to
    a word boundary."""

    words: np.ndarray
    valid_bits: int


def pack_activation(values: np.ndarray) -> PackedActivation:
    values = np.asarray(values, dtype=np.float64).ravel()
    bits = bitpack.sign_bits(values)
    return PackedActivation(bitpack.pack_vector(bits), values.size)


def binary_dot(a: PackedActivation, w_words: np.ndarray, valid_bits: int) -> int:
    """Sum of elementwise +-1 products of the two packed vectors."""
    if a.valid_bits != valid_bits:
        raise ValueError(
            f"lengths disagree: activation {a.valid_bits}, weights {valid_bits}")
    w_words = np.asarray(w_words, dtype=np.uint64)
    if w_words.shape != a.words.shape:
        raise ValueError(
            f"word counts disagree: {a.words.shape} vs {w_words.shape}")
    disagree = bitpack.popcount(np.bitwise_xor(a.words, w_words))
    return int(valid_bits - 2 * disagree)


def _sign(values: np.ndarray) -> np.ndarray:
    return np.where(values >= 0.0, 1.0, -1.0)


@dataclass
class _DeployedStep:
    kind: str                      # dense_fp | dense_bin | conv_fp | conv_bin
    weight: np.ndarray | None = None       # float weight for fp steps
    binary: BinaryLayer | None = None      # packed weights for bin steps
    column_words: np.ndarray | None = None
    signs: np.ndarray | None = None        # decoded +-1 weights (simulation)
    conv: tuple[int, int, int] | None = None  # (kernel, stride, n_out)


class BinaryDeployment:
    """Inference-ready form of a binarized network.

    Built from a network whose interior weight layers all carry frozen
    bits; leading and trailing full-precision layers run in float, and
    every hidden activation is re-binarized by sign.
    """

    def __init__(self, steps: list[_DeployedStep], input_dim: int):
        self.steps = steps
        self.input_dim = input_dim

    @staticmethod
    def from_network(net: Network) -> "BinaryDeployment":
        steps: list[_DeployedStep] = []
        weight_indices = net.weight_layers()
        seen_binary = False
        for pos, li in enumerate(weight_indices):
            layer = net.layers[li]
            spec = layer.spec
            is_conv = spec.kind == "conv2d"
            if is_conv and spec.padding != 0:
                raise ValueError(
                    "binary deployment of padded conv layers is unsupported "
                    "(zero padding has no +-1 encoding)")
            if layer.binary is None:
                if seen_binary and pos != len(weight_indices) - 1:
                    raise ValueError(
                        f"layer {li} is not binarized but sits between "
                        "binary layers")
                step = _DeployedStep(
                    "conv_fp" if is_conv else "dense_fp",
                    weight=layer.weight.data.copy(),
                    conv=(spec.kernel, spec.stride, spec.n_out) if is_conv else None)
            else:
                seen_binary = True
                b = layer.binary
                step = _DeployedStep(
                    "conv_bin" if is_conv else "dense_bin",
                    binary=b, column_words=b.column_words(), signs=b.signs(),
                    conv=(spec.kernel, spec.stride, spec.n_out) if is_conv else None)
            steps.append(step)
        return BinaryDeployment(steps, net.input_dim)

    def mac_count(self) -> int:
        total = 0
        for step in self.steps:
            w = step.weight if step.weight is not None else step.signs
            total += int(w.shape[0] * w.shape[1])
        return total


def _binary_matvec(step: _DeployedStep, values: np.ndarray) -> np.ndarray:
    """One packed sample row through a binary dense step."""
    b = step.binary
    act = pack_activation(values)
    xor = np.bitwise_xor(step.column_words, act.words[None, :])
    disagree = np.bitwise_count(xor).sum(axis=1).astype(np.int64)
    dots = b.rows - 2 * disagree
    return b.alpha * dots


def binary_forward(deploy: BinaryDeployment, x: np.ndarray) -> np.ndarray:
    """Logits of the packed network for a batch of inputs.

    Interior layers run on packed bits via XNOR-popcount; the channel
    scale is a float multiply on the integer dot. Hidden activations are
    re-binarized by sign, boundaries run in float.
    """
    x = np.asarray(x, dtype=np.float64)
    outputs = []
    for sample in x:
        a = sample
        for pos, step in enumerate(deploy.steps):
            last = pos == len(deploy.steps) - 1
            if step.kind == "dense_fp":
                pre = a.ravel() @ step.weight
            elif step.kind == "dense_bin":
                pre = _binary_matvec(step, a.ravel())
            else:
                k, stride, n_out = step.conv
                rows = unfold_patches(a, k, stride, 0)
                if step.kind == "conv_fp":
                    pre = rows @ step.weight
                else:
                    pre = np.stack([_binary_matvec(step, r) for r in rows])
                oh = ow = int(np.sqrt(rows.shape[0]))
                pre = pre.reshape(oh, ow, n_out).transpose(2, 0, 1)
            a = pre if last else _sign(pre)
        outputs.append(a)
    return np.stack(outputs)


def simulate_binary_forward(deploy: BinaryDeployment, x: np.ndarray) -> np.ndarray:
    """Float reference for :func:`binary_forward`.

    Decodes the packed weights to +-1 matrices and evaluates the same
    network in float, computing each raw +-1 dot before applying the
    channel scale (so both paths round identically).
    """
    x = np.asarray(x, dtype=np.float64)
    a = x
    for pos, step in enumerate(deploy.steps):
        last = pos == len(deploy.steps) - 1
        if step.kind == "dense_fp":
            a2 = a.reshape(a.shape[0], -1) if a.ndim > 2 else a
            pre = a2 @ step.weight
        elif step.kind == "dense_bin":
            a2 = a.reshape(a.shape[0], -1) if a.ndim > 2 else a
            pre = (a2 @ step.signs) * step.binary.alpha[None, :]
        else:
            k, stride, n_out = step.conv
            rows = unfold_patches(a, k, stride, 0)
            if step.kind == "conv_fp":
                pre = rows @ step.weight
            else:
                pre = (rows @ step.signs) * step.binary.alpha[None, :]
            batch = a.shape[0]
            oh = ow = int(np.sqrt(rows.shape[0] // batch))
            pre = pre.reshape(batch, oh, ow, n_out).transpose(0, 3, 1, 2)
        a = pre if last else _sign(pre)
    return a


def benchmark(deploy: BinaryDeployment, x: np.ndarray,
              repeats: int = 3) -> list[dict]:
    """Throughput of both paths in multiply-accumulates per second."""
    x = np.asarray(x, dtype=np.float64)
    macs = deploy.mac_count() * x.shape[0]
    rows = []
    for name, fn in (("xnor", binary_forward),
                     ("float-sim", simulate_binary_forward)):
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(deploy, x)
            best = min(best, time.perf_counter() - t0)
        rows.append({"path": name, "samples": x.shape[0],
                     "ops_per_sec": macs / best if best > 0 else float("inf")})
    return rows
