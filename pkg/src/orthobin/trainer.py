"""Layer-progressive quantized training.

Implements the full pipeline: partition the quantizable layers into
blocks, capture each layer's inputs from the current partially-quantized
network, initialize the block transform by PCA (optionally on k-means
grouped dimensions), train the combined loss, freeze the layer's bits,
then finetune the layers above it. Proceeds bottom to top.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import LayerInputBuffer, Network, evaluate_accuracy
from .optim import Adam, linear_decay
from .quantize import finalize_layer, transform_distance
from .seeding import RunStreams
from .transform import (BlockState, ReductionMatrix, apply_reduction, expand,
                        kmeans_group, pca_init, regularizer, stack_weights)

ABLATIONS = ("none", "intra", "cross", "aggregated")
DIVERGENCE_LIMIT = 1e6

METRIC_COLUMNS = ("phase", "layer", "epoch", "task_loss", "qdist", "reg",
                  "ratio_r", "accuracy")


class TrainingDiverged(RuntimeError):
    def __init__(self, phase: str, layer: int, epoch: int, value: float):
        super().__init__(
            f"{phase} of layer {layer} diverged at epoch {epoch} (loss={value})")
        self.phase = phase
        self.layer = layer
        self.epoch = epoch


@dataclass
class TrainConfig:
    """Knobs of the quantized training run.

    ``lam`` weighs the quantization-distance term against the task loss,
    ``gamma`` the L1 term on the signs, and ``k`` caps the number of input
    dimension groups. ``ablation`` selects the method variant: "none"
    (plain sign proximity), "intra" (per-layer transform), "cross"
    (block-expanded transform), or "aggregated" (block transform on
    k-means grouped dimensions, the full method).
    """

    lam: float = 100.0
    gamma: float = 1e-5
    k: int = 256
    n_ep: int = 40
    finetune_epochs: int = 40
    lr_quant: float = 3e-4
    lr_finetune: float = 3e-4
    lr_transform: float | None = None
    batch_size: int = 64
    block_size: int = 2
    seed: int = 1
    alpha_policy: str = "trained"
    binarize_activations: bool = True
    center_inputs: bool = False
    reg_enabled: bool = True
    ablation: str = "aggregated"
    capture_capacity: int = 4096

    def validate(self) -> None:
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be nonnegative")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_ep < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.alpha_policy not in ("trained", "recompute"):
            raise ValueError(f"unknown alpha_policy {self.alpha_policy!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        cfg = TrainConfig(**{k: v for k, v in d.items() if k in known})
        cfg.validate()
        return cfg

    @property
    def use_transform(self) -> bool:
        return self.ablation != "none"

    @property
    def use_reduction(self) -> bool:
        return self.ablation == "aggregated"

    @property
    def effective_block_size(self) -> int:
        return 1 if self.ablation in ("none", "intra") else self.block_size


@dataclass
class QuantSchedule:
    """Ordered (layer, phase) steps with the frozen-layer mask per step."""

    steps: list[tuple[int, str]]
    frozen: list[frozenset[int]]


def partition_blocks(net: Network, block_size: int) -> list[list[int]]:
    """Chunk the quantizable layers, bottom to top, into runs of at most
    ``block_size``; full-precision layers are excluded."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    q = net.quantizable_layers()
    return [q[i:i + block_size] for i in range(0, len(q), block_size)]


def build_schedule(net: Network, cfg: TrainConfig) -> QuantSchedule:
    steps: list[tuple[int, str]] = []
    frozen: list[frozenset[int]] = []
    done: set[int] = set()
    for block in partition_blocks(net, cfg.effective_block_size):
        for l in block:
            steps.append((l, "quantize"))
            frozen.append(frozenset(done))
            done.add(l)
            steps.append((l, "finetune"))
            frozen.append(frozenset(done))
    return QuantSchedule(steps, frozen)


# ---------------------------------------------------------------------------
# Loss assembly


def _block_terms(net: Network, state: BlockState, cfg: TrainConfig
                 ) -> tuple[Tensor, Tensor]:
    """Stacked distance and sign-L1 tensors over the block's layers.

    The sign target inside the distance is a detached constant (the
    proximal reading: the straight-through surrogate lives only in the
    task forward), so the residual pulls weights straight toward their
    current signs. Frozen layers enter fully as constants; the sign of
    structural zero padding is taken before stacking, so padding
    contributes nothing to either term.
    """
    s_hat, p_block = apply_reduction(state)
    delta = None
    l1 = None
    for li in state.layer_indices:
        layer = net.layers[li]
        if layer.binary is not None:
            sgn = Tensor(layer.binary.signs())
            resid = ad.sub(Tensor(layer.weight.data.copy()), sgn)
        else:
            sgn = Tensor(np.where(layer.weight.data >= 0.0, 1.0, -1.0))
            resid = ad.sub(layer.weight, sgn)
        delta = stack_weights(delta, resid)
        term = ad.l1_norm(sgn)
        l1 = term if l1 is None else ad.add(l1, term)
    weighted = ad.matmul(ad.transpose(state.v),
                         ad.matmul(Tensor(p_block), delta))
    qdist = ad.frobenius_sq(ad.scale_rows(s_hat, weighted))
    return qdist, l1


def train_loss(net: Network, state: BlockState | None, layer_idx: int,
               xb: np.ndarray, yb: np.ndarray, cfg: TrainConfig
               ) -> tuple[Tensor, dict]:
    """Combined loss for one batch while quantizing ``layer_idx``.

    Task cross-entropy with the current layer sign-simulated, plus the
    transform-weighted distance and sign-L1 over the block, plus the
    orthogonality/scale regularizer. Without a block state (no-transform
    ablation) the distance degenerates to plain sign proximity of the
    current layer.
    """
    logits = net.forward(xb, quant_layers=frozenset({layer_idx}),
                         binarize_acts=cfg.binarize_activations)
    task = ad.softmax_cross_entropy(logits, yb)
    parts = {"task_loss": task.item()}
    if state is not None and state.dim:
        qdist, l1 = _block_terms(net, state, cfg)
        loss = ad.add(task, ad.scale(qdist, cfg.lam))
        if cfg.gamma != 0.0:
            loss = ad.add(loss, ad.scale(l1, cfg.gamma))
        if cfg.reg_enabled:
            reg = regularizer(ad.exp(state.log_s), state.v, state.sigma0)
            loss = ad.add(loss, reg)
            parts["reg"] = reg.item()
        else:
            parts["reg"] = 0.0
        parts["qdist"] = qdist.item()
    else:
        w = net.layers[layer_idx].weight
        sgn = Tensor(np.where(w.data >= 0.0, 1.0, -1.0))
        qdist = ad.frobenius_sq(ad.sub(w, sgn))
        loss = ad.add(task, ad.scale(qdist, cfg.lam))
        if cfg.gamma != 0.0:
            loss = ad.add(loss, ad.scale(ad.l1_norm(sgn), cfg.gamma))
        parts["qdist"] = qdist.item()
        parts["reg"] = 0.0
    return loss, parts


def _state_values(net: Network, state: BlockState | None, layer_idx: int,
                  cfg: TrainConfig) -> tuple[float, float]:
    """(qdist, reg) of the current state, evaluated without gradients."""
    if state is not None and state.dim:
        qdist, _ = _block_terms(net, state, cfg)
        reg = regularizer(ad.exp(state.log_s), state.v, state.sigma0)
        return qdist.item(), (reg.item() if cfg.reg_enabled else 0.0)
    layer = net.layers[layer_idx]
    if layer.binary is not None:
        delta = layer.weight.data - layer.binary.signs()
    else:
        delta = layer.weight.data - np.where(layer.weight.data >= 0, 1.0, -1.0)
    return float((delta * delta).sum()), 0.0


# ---------------------------------------------------------------------------
# Diagnostics: fixed-reference quantization distances


class QuantDiagnostics:
    """Distances between the initial pretrained weights and the current
    binary forms, plain and weighted by per-layer transforms taken from
    the initial model (cross-layer coupling deliberately excluded)."""

    def __init__(self, net: Network, features: np.ndarray, cfg: TrainConfig,
                 streams: RunStreams):
        self.initial_weights: dict[int, np.ndarray] = {}
        self.reference: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for li in net.quantizable_layers():
            spec = net.layers[li].spec
            dim = spec.weight_shape()[0]
            buf = LayerInputBuffer(li, dim, cfg.capture_capacity,
                                   streams.get("capture"))
            _forward_batched(net, features, capture=li, buffer=buf,
                             binarize_acts=False)
            s0, v0 = pca_init(buf.matrix(), center=cfg.center_inputs)
            self.reference[li] = (s0, v0)
            self.initial_weights[li] = net.layers[li].weight.data.copy()

    def _current_binary(self, net: Network, li: int) -> np.ndarray:
        layer = net.layers[li]
        if layer.binary is not None:
            return layer.binary.dense()
        alpha = layer.alpha.data if layer.alpha is not None else None
        policy = "trained" if alpha is not None else "recompute"
        return finalize_layer(layer.weight.data, policy, alpha).dense()

    def values(self, net: Network) -> tuple[float, float]:
        q_plain = 0.0
        q_weighted = 0.0
        for li, w0 in self.initial_weights.items():
            delta = w0 - self._current_binary(net, li)
            q_plain += float((delta * delta).sum())
            s0, v0 = self.reference[li]
            m = s0[:, None] * (v0.T @ delta)
            q_weighted += float((m * m).sum())
        return q_plain, q_weighted

    def ratio(self, net: Network) -> float:
        q_plain, q_weighted = self.values(net)
        return q_weighted / max(q_plain, 1e-300)


def _forward_batched(net: Network, features: np.ndarray, batch: int = 256,
                     **kwargs) -> None:
    for start in range(0, features.shape[0], batch):
        net.forward(features[start:start + batch], **kwargs)


def capture_layer_inputs(net: Network, layer_idx: int, features: np.ndarray,
                         cfg: TrainConfig, rng) -> LayerInputBuffer:
    """Inputs reaching ``layer_idx`` under the current partially-quantized
    network (frozen layers binary, activations per config)."""
    dim = net.layers[layer_idx].spec.weight_shape()[0]
    buf = LayerInputBuffer(layer_idx, dim, cfg.capture_capacity, rng)
    _forward_batched(net, features, capture=layer_idx, buffer=buf,
                     binarize_acts=cfg.binarize_activations)
    return buf


# ---------------------------------------------------------------------------
# Phases


def _check_divergence(value: float, phase: str, layer: int, epoch: int) -> None:
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise TrainingDiverged(phase, layer, epoch, value)


def _upper_params(net: Network, layer_idx: int) -> list[Tensor]:
    return [net.layers[i].weight for i in net.weight_layers()
            if i > layer_idx and net.layers[i].binary is None]


def quantize_layer(net: Network, state: BlockState | None, layer_idx: int,
                   train_x: np.ndarray, train_y: np.ndarray,
                   cfg: TrainConfig, streams: RunStreams,
                   metrics: list[dict], diag: QuantDiagnostics,
                   test: tuple[np.ndarray, np.ndarray] | None = None) -> None:
    """Train the combined loss for ``n_ep`` epochs, then freeze the layer's
    bits. Parameters: the layer's weight and scale, all unfrozen layers
    above it, and the block transform. The importance vector steps with
    the weights so its anchored mass can migrate onto well-quantized
    directions, while the correlation matrix rotates at its own (slower)
    rate ``lr_transform``; that separation is what lets the regularizer
    keep V orthonormal while the weighted distance drains to zero."""
    layer = net.layers[layer_idx]
    alpha = layer.ensure_alpha()
    params = [layer.weight, alpha] + _upper_params(net, layer_idx)
    lr_tf = cfg.lr_transform if cfg.lr_transform is not None else cfg.lr_quant
    opt_tf = None
    if state is not None and state.dim and cfg.use_transform:
        params.append(state.log_s)
        opt_tf = Adam([state.v], lr=lr_tf)
    opt = Adam(params, lr=cfg.lr_quant)
    n = train_x.shape[0]
    data_rng = streams.get("data")
    for epoch in range(cfg.n_ep):
        opt.lr = linear_decay(cfg.lr_quant, epoch, cfg.n_ep)
        if opt_tf is not None:
            opt_tf.lr = linear_decay(lr_tf, epoch, cfg.n_ep)
        perm = data_rng.permutation(n)
        sums = {"task_loss": 0.0, "qdist": 0.0, "reg": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, parts = train_loss(net, state, layer_idx,
                                     train_x[idx], train_y[idx], cfg)
            _check_divergence(loss.item(), "quantize", layer_idx, epoch)
            opt.zero_grad()
            if opt_tf is not None:
                opt_tf.zero_grad()
            ad.backward(loss)
            opt.step()
            if opt_tf is not None:
                opt_tf.step()
            for k in sums:
                sums[k] += parts[k]
            batches += 1
        row = {"phase": "quantize", "layer": layer_idx, "epoch": epoch,
               **{k: sums[k] / batches for k in sums},
               "ratio_r": diag.ratio(net)}
        row["accuracy"] = (evaluate_accuracy(
            net, test[0], test[1], quant_layers=frozenset({layer_idx}),
            binarize_acts=cfg.binarize_activations) if test else float("nan"))
        metrics.append(row)
    layer.binary = finalize_layer(layer.weight.data, cfg.alpha_policy,
                                  alpha.data)


def finetune_upper(net: Network, layer_idx: int, train_x: np.ndarray,
                   train_y: np.ndarray, cfg: TrainConfig, streams: RunStreams,
                   metrics: list[dict], diag: QuantDiagnostics,
                   state: BlockState | None = None,
                   test: tuple[np.ndarray, np.ndarray] | None = None) -> None:
    """Task-loss training of the full-precision layers above ``layer_idx``;
    all frozen bits stay untouched."""
    params = _upper_params(net, layer_idx)
    if not params or cfg.finetune_epochs == 0:
        return
    opt = Adam(params, lr=cfg.lr_finetune)
    n = train_x.shape[0]
    data_rng = streams.get("data")
    for epoch in range(cfg.finetune_epochs):
        opt.lr = linear_decay(cfg.lr_finetune, epoch, cfg.finetune_epochs)
        perm = data_rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits = net.forward(train_x[idx],
                                 binarize_acts=cfg.binarize_activations)
            loss = ad.softmax_cross_entropy(logits, train_y[idx])
            _check_divergence(loss.item(), "finetune", layer_idx, epoch)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        qdist, reg = _state_values(net, state, layer_idx, cfg)
        row = {"phase": "finetune", "layer": layer_idx, "epoch": epoch,
               "task_loss": total / batches, "qdist": qdist, "reg": reg,
               "ratio_r": diag.ratio(net)}
        row["accuracy"] = (evaluate_accuracy(
            net, test[0], test[1],
            binarize_acts=cfg.binarize_activations) if test else float("nan"))
        metrics.append(row)


# ---------------------------------------------------------------------------
# Full run


@dataclass
class RunResult:
    metrics: list[dict] = field(default_factory=list)
    block_states: list[BlockState] = field(default_factory=list)
    final_accuracy: float = float("nan")
    q_plain: float = float("nan")
    q_weighted: float = float("nan")


def binarize_network(net: Network, train_x: np.ndarray, train_y: np.ndarray,
                     cfg: TrainConfig,
                     test: tuple[np.ndarray, np.ndarray] | None = None
                     ) -> RunResult:
    """Run the whole progressive pipeline on a pretrained network.

    Mutates ``net``: every quantizable layer ends with frozen packed bits.
    Returns the per-epoch metrics, the final per-block transform states,
    and the fixed-reference quantization distances.
    """
    cfg.validate()
    streams = RunStreams(cfg.seed)
    diag = QuantDiagnostics(net, train_x, cfg, streams)
    result = RunResult()
    for block in partition_blocks(net, cfg.effective_block_size):
        state = BlockState() if cfg.use_transform else None
        for layer_idx in block:
            if cfg.use_transform:
                buf = capture_layer_inputs(net, layer_idx, train_x, cfg,
                                           streams.get("capture"))
                rows = buf.matrix()
                d = rows.shape[1]
                if cfg.use_reduction and d > cfg.k:
                    red = kmeans_group(rows, cfg.k, streams.get("kmeans"))
                else:
                    red = ReductionMatrix.identity(d)
                grouped = rows @ red.matrix.T
                s_new, u_new = pca_init(grouped, center=cfg.center_inputs)
                state = expand(state, s_new, u_new, red, layer_idx)
            quantize_layer(net, state, layer_idx, train_x, train_y, cfg,
                           streams, result.metrics, diag, test)
            finetune_upper(net, layer_idx, train_x, train_y, cfg, streams,
                           result.metrics, diag, state, test)
        if state is not None:
            result.block_states.append(state)
    result.q_plain, result.q_weighted = diag.values(net)
    if test is not None:
        result.final_accuracy = evaluate_accuracy(
            net, test[0], test[1], binarize_acts=cfg.binarize_activations)
    return result
