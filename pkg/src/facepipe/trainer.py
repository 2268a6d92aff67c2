"""Embedding-to-shape mapping network and its training loop.

The network is three fully-connected hidden layers with ReLU followed by
a linear output layer, trained with AdamW against a region-weighted L1
mesh loss: predictions are decoded to vertices (shape-only decode, since
training never poses the head) and compared to ground-truth vertices
with per-vertex weights of 150 on the face, 1 on the back of the head,
and 0.1 on eyes and ears.

Because the decode is linear in the shape coefficients at zero pose, the
loss gradient with respect to the predicted coefficients has the closed
form  S^T (weights * sign(residual)); no autodiff is involved anywhere.
All randomness (init, batch shuffles) derives from the config seed, and
parameters are kept on the float32 grid so the save format round-trips
bit for bit.
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EMBEDDING_DIM
from .manifest import SPLIT_TRAIN, SPLIT_VAL, ImageRecord
from .morphable import (
    REGION_BACK_OF_HEAD, REGION_EARS, REGION_EYES, REGION_FACE,
    MorphableModel, Mesh,
)
from .seeds import substream_rng

REGION_WEIGHTS = {
    REGION_FACE: 150.0,
    REGION_BACK_OF_HEAD: 1.0,
    REGION_EYES: 0.1,
    REGION_EARS: 0.1,
}

_NET_MAGIC = b"MNET"


class TrainingError(ValueError):
    pass


@dataclass
class RegionMask:
    weights: np.ndarray  # [N] float64

    @classmethod
    def from_model(cls, model: MorphableModel) -> "RegionMask":
        table = np.empty(max(REGION_WEIGHTS) + 1)
        for code, w in REGION_WEIGHTS.items():
            table[code] = w
        return cls(weights=table[model.region_labels])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        positives = {
            "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "batch_size": self.batch_size,
        }
        for name, v in positives.items():
            if v <= 0:
                raise TrainingError(f"{name} must be positive")
        if self.patience >= self.max_epochs:
            raise TrainingError("patience must be smaller than max_epochs")


# ---------------------------------------------------------------------------
# Network

@dataclass
class MappingNetwork:
    weights: list[np.ndarray]  # [in, out] float64 on the float32 grid
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


def _snap_f32(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64."""
    return arr.astype(np.float32).astype(np.float64)


def init_network(
    seed: int,
    input_dim: int = EMBEDDING_DIM,
    hidden: tuple[int, ...] = (300, 300, 300),
    output_dim: int = 300,
    hidden_bias: float = 1.0,
) -> MappingNetwork:
    """He-uniform fan-in weights, deterministic in seed.

    Hidden biases start at a positive constant so every unit begins in its
    active (linear) region: unit-norm embeddings give tiny pre-activations,
    and zero-bias nets were observed to overfit per-image noise badly at
    high learning rates while a near-linear start generalizes.
    """
    if len(hidden) != 3:
        raise TrainingError("the mapping network has exactly three hidden layers")
    rng = substream_rng(seed, "init")
    dims = [input_dim, *hidden, output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(_snap_f32(rng.uniform(-limit, limit, size=(fan_in, fan_out))))
        biases.append(np.full(fan_out, hidden_bias, dtype=np.float64))
    biases[-1] = np.zeros(dims[-1])
    return MappingNetwork(weights=weights, biases=biases)


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    raise TrainingError(f"unknown activation {name!r}")


def forward(net: MappingNetwork, embedding: np.ndarray) -> np.ndarray:
    """Predict shape coefficients for one embedding or a batch of them."""
    x = np.asarray(embedding, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.input_dim:
        raise TrainingError(f"embedding dim {x.shape[1]} != network input {net.input_dim}")
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        x = _activate(net.activation, x @ w + b)
    x = x @ net.weights[-1] + net.biases[-1]
    return x[0] if single else x


def _forward_cached(net: MappingNetwork, x: np.ndarray):
    """Batch forward keeping pre-activations for backprop."""
    acts = [x]
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        acts.append(_activate(net.activation, acts[-1] @ w + b))
    out = acts[-1] @ net.weights[-1] + net.biases[-1]
    return out, acts


def _backward(net: MappingNetwork, acts: list[np.ndarray], grad_out: np.ndarray):
    """Gradients of a scalar loss given d(loss)/d(output) for the batch."""
    grads: dict[str, np.ndarray] = {}
    delta = grad_out
    for i in range(len(net.weights) - 1, -1, -1):
        grads[f"w{i}"] = acts[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0.0)
    return grads


# ---------------------------------------------------------------------------
# Masked mesh loss

def _shape_matrix(model: MorphableModel) -> np.ndarray:
    """Shape basis flattened to [n_shape, 3N] float64."""
    return model.shape_basis.astype(np.float64).reshape(model.n_shape, -1)


def masked_mesh_loss(
    model: MorphableModel,
    mask: RegionMask,
    beta_pred: np.ndarray,
    mesh_gt: Mesh,
) -> tuple[float, np.ndarray]:
    """Region-weighted L1 between the decoded prediction and the target.

    Returns (loss, d loss / d beta). The sign of a zero residual is zero,
    so an exact fit has an exactly zero gradient.
    """
    beta_pred = np.asarray(beta_pred, dtype=np.float64)
    if beta_pred.shape != (model.n_shape,):
        raise TrainingError(f"beta length {beta_pred.shape} != ({model.n_shape},)")
    gt = np.asarray(mesh_gt.vertices, dtype=np.float64)
    if gt.shape != (model.n_vertices, 3):
        raise TrainingError(f"target mesh has {gt.shape[0]} vertices, model has {model.n_vertices}")
    s = _shape_matrix(model)
    residual = (model.template_vertices.astype(np.float64).ravel()
                + beta_pred @ s - gt.ravel())
    w3 = np.repeat(mask.weights, 3)
    loss = float(np.sum(w3 * np.abs(residual)))
    grad = s @ (w3 * np.sign(residual))
    return loss, grad


def _batch_loss_grad(
    template_flat: np.ndarray,
    s: np.ndarray,
    w3: np.ndarray,
    beta_pred: np.ndarray,
    gt_flat: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and d(mean loss)/d(beta) for a batch."""
    residual = template_flat[None, :] + beta_pred @ s - gt_flat
    losses = (np.abs(residual) * w3[None, :]).sum(axis=1)
    grad_beta = (np.sign(residual) * w3[None, :]) @ s.T / beta_pred.shape[0]
    return losses, grad_beta


# ---------------------------------------------------------------------------
# AdamW

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update, in place on params."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        p -= config.learning_rate * (m_hat / (np.sqrt(v_hat) + config.eps))
        p -= config.learning_rate * config.weight_decay * p
    return params, state


class EarlyStopper:
    """Strict-improvement early stopping with a patience budget."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_value = np.inf
        self.best_epoch = 0
        self.failures = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value < self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self.failures = 0
        else:
            self.failures += 1
        return self.failures >= self.patience


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainingHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = np.inf
    initial_val_loss: float = np.inf  # untrained network, before epoch 1
    batch_size: int = 64

    def losses(self) -> list[tuple[int, float, float]]:
        """Timing-free view used for determinism comparisons."""
        return [(e.epoch, e.train_loss, e.val_loss) for e in self.epochs]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,wall_seconds"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.wall_seconds:.3f}")
        return "\n".join(lines) + "\n"


def _gather_dataset(
    records: list[ImageRecord],
    embedding_lookup,
    betas: dict[str, np.ndarray],
    model: MorphableModel,
    split: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack embeddings and flattened target vertices for one split."""
    recs = [r for r in records if r.split == split]
    if not recs:
        raise TrainingError(f"no records in split {split!r}")
    xs = np.empty((len(recs), EMBEDDING_DIM))
    shape_rows: dict[str, np.ndarray] = {}
    gt = np.empty((len(recs), model.n_vertices * 3))
    template_flat = model.template_vertices.astype(np.float64).ravel()
    s = _shape_matrix(model)
    for i, rec in enumerate(recs):
        try:
            xs[i] = np.asarray(embedding_lookup(rec.image_id), dtype=np.float64)
        except KeyError:
            raise TrainingError(f"missing embedding for image_id {rec.image_id!r}") from None
        if rec.shape_id not in shape_rows:
            if rec.shape_id not in betas:
                raise TrainingError(f"missing stored beta for shape {rec.shape_id!r}")
            shape_rows[rec.shape_id] = template_flat + betas[rec.shape_id] @ s
        gt[i] = shape_rows[rec.shape_id]
    return xs, gt


def train(
    records: list[ImageRecord],
    embeddings,
    betas: dict[str, np.ndarray],
    model: MorphableModel,
    mask: RegionMask,
    config: TrainConfig,
    hidden: tuple[int, int, int] = (300, 300, 300),
) -> tuple[MappingNetwork, TrainingHistory]:
    """Minibatch AdamW on the train split with early stopping on the
    validation loss; returns the best-epoch parameters.

    ``embeddings`` is anything indexable by image_id that raises KeyError
    on a miss (an EmbeddingSet or a plain dict).
    """
    config.validate()
    lookup = embeddings.__getitem__
    x_train, gt_train = _gather_dataset(records, lookup, betas, model, SPLIT_TRAIN)
    x_val, gt_val = _gather_dataset(records, lookup, betas, model, SPLIT_VAL)

    net = init_network(config.seed, input_dim=EMBEDDING_DIM,
                       hidden=hidden, output_dim=model.n_shape)
    params = net.params()
    state = AdamWState()
    stopper = EarlyStopper(config.patience)
    history = TrainingHistory(batch_size=config.batch_size)
    template_flat = model.template_vertices.astype(np.float64).ravel()
    s = _shape_matrix(model)
    w3 = np.repeat(mask.weights, 3)
    best_params = {k: v.copy() for k, v in params.items()}

    init_pred = forward(net, x_val)
    init_losses, _ = _batch_loss_grad(template_flat, s, w3, init_pred, gt_val)
    history.initial_val_loss = float(init_losses.mean())

    n_train = x_train.shape[0]
    shuffle_rng = substream_rng(config.seed, "shuffle")
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.monotonic()
        order = shuffle_rng.permutation(n_train)
        train_loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, gb = x_train[idx], gt_train[idx]
            beta_pred, acts = _forward_cached(net, xb)
            losses, grad_beta = _batch_loss_grad(template_flat, s, w3, beta_pred, gb)
            train_loss_sum += float(losses.sum())
            grads = _backward(net, acts, grad_beta)
            adamw_step(params, grads, state, config)
            for i in range(len(net.weights)):
                net.weights[i] = params[f"w{i}"] = _snap_f32(params[f"w{i}"])
                net.biases[i] = params[f"b{i}"] = _snap_f32(params[f"b{i}"])
        train_loss = train_loss_sum / n_train

        val_pred = forward(net, x_val)
        val_losses, _ = _batch_loss_grad(template_flat, s, w3, val_pred, gt_val)
        val_loss = float(val_losses.mean())
        history.epochs.append(EpochStats(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            wall_seconds=time.monotonic() - t0,
        ))
        if val_loss < stopper.best_value:
            best_params = {k: v.copy() for k, v in params.items()}
        if stopper.update(epoch, val_loss):
            break

    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best_value
    best = MappingNetwork(
        weights=[best_params[f"w{i}"] for i in range(len(net.weights))],
        biases=[best_params[f"b{i}"] for i in range(len(net.biases))],
        activation=net.activation,
    )
    return best, history


def zero_prediction_baseline(
    records: list[ImageRecord],
    betas: dict[str, np.ndarray],
    model: MorphableModel,
    mask: RegionMask,
    split: str = SPLIT_VAL,
) -> float:
    """Mean masked loss of always predicting the template (beta = 0)."""
    recs = [r for r in records if r.split == split]
    if not recs:
        raise TrainingError(f"no records in split {split!r}")
    s = _shape_matrix(model)
    w3 = np.repeat(mask.weights, 3)
    total = 0.0
    per_shape: dict[str, float] = {}
    for rec in recs:
        if rec.shape_id not in per_shape:
            per_shape[rec.shape_id] = float(np.sum(w3 * np.abs(betas[rec.shape_id] @ s)))
        total += per_shape[rec.shape_id]
    return total / len(recs)


# ---------------------------------------------------------------------------
# Network container: b"MNET" | uint32 header length | JSON header |
# little-endian float32 blocks (w0, b0, w1, b1, ...).

def save_network(net: MappingNetwork, path: str) -> None:
    header = {
        "version": 1,
        "input_dim": net.input_dim,
        "hidden": net.hidden_widths,
        "output_dim": net.output_dim,
        "activation": net.activation,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_NET_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_network(path: str) -> MappingNetwork:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _NET_MAGIC:
        raise TrainingError("bad network container magic")
    (header_len,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
        dims = [int(header["input_dim"]), *[int(h) for h in header["hidden"]],
                int(header["output_dim"])]
        activation = header["activation"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise TrainingError(f"corrupt network header: {e}") from e
    weights, biases = [], []
    offset = 8 + header_len
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            end = offset + count * 4
            if end > len(data):
                raise TrainingError("network container truncated")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            if not np.all(np.isfinite(arr)):
                raise TrainingError("non-finite network parameters")
            (weights if len(shape) == 2 else biases).append(
                arr.reshape(shape).astype(np.float64)
            )
            offset = end
    if offset != len(data):
        raise TrainingError("trailing bytes after network parameters")
    return MappingNetwork(weights=weights, biases=biases, activation=activation)
