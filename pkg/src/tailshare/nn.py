"""Minimal dense feed-forward networks with exact manual gradients.

All parameters of one two-headed network live in a single flat float64
vector, partitioned into contiguous blocks: trunk layers in order, then
the task-A head, then the task-B head. Because the trunk blocks lead,
the encoder slice for any shared depth is a contiguous prefix of the
flat vector, which the sharing/proxy code slices against.

Weight matrices are stored row-major with shape (fan_in, fan_out), each
block laid out as weights followed by biases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError, TrainingDivergenceError

TASKS = ("A", "B")


def _task_index(task: str) -> int:
    if task not in TASKS:
        raise StructuralError(f"unknown task {task!r}, expected 'A' or 'B'")
    return TASKS.index(task)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a two-headed dense network.

    trunk_widths lists the output width of each trunk layer; its length is
    the trunk depth. head_dims gives the class counts of the task-A and
    task-B heads, which are linear layers on top of the last trunk layer.
    """

    input_dim: int
    trunk_widths: tuple
    head_dims: tuple
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if len(self.trunk_widths) < 1 or min(self.trunk_widths) < 1:
            raise ConfigError("trunk_widths must be a nonempty sequence of positive ints")
        if len(self.head_dims) != 2 or min(self.head_dims) < 1:
            raise ConfigError("head_dims must be a pair of positive ints")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def depth(self) -> int:
        return len(self.trunk_widths)

    def trunk_shape(self, layer: int) -> tuple:
        """(fan_in, fan_out) of 1-based trunk layer `layer`."""
        if not 1 <= layer <= self.depth:
            raise StructuralError(f"trunk layer {layer} out of range 1..{self.depth}")
        fan_in = self.input_dim if layer == 1 else self.trunk_widths[layer - 2]
        return fan_in, self.trunk_widths[layer - 1]

    def head_shape(self, task: str) -> tuple:
        return self.trunk_widths[-1], self.head_dims[_task_index(task)]

    def block_names(self) -> tuple:
        trunk = tuple(f"trunk{i}" for i in range(1, self.depth + 1))
        return trunk + ("head_a", "head_b")

    def block_shape(self, name: str) -> tuple:
        if name == "head_a":
            return self.head_shape("A")
        if name == "head_b":
            return self.head_shape("B")
        if name.startswith("trunk"):
            return self.trunk_shape(int(name[5:]))
        raise StructuralError(f"unknown block {name!r}")

    def block_table(self) -> tuple:
        """((name, offset, length), ...) covering the flat vector exactly."""
        table = []
        offset = 0
        for name in self.block_names():
            fan_in, fan_out = self.block_shape(name)
            length = fan_in * fan_out + fan_out
            table.append((name, offset, length))
            offset += length
        return tuple(table)

    @property
    def param_count(self) -> int:
        return sum(length for _, _, length in self.block_table())

    def encoder_params(self, c: int) -> int:
        """Parameter count of trunk layers 1..c (the shared-encoder slice)."""
        if not 0 <= c <= self.depth:
            raise StructuralError(f"shared depth {c} out of range 0..{self.depth}")
        total = 0
        for layer in range(1, c + 1):
            fan_in, fan_out = self.trunk_shape(layer)
            total += fan_in * fan_out + fan_out
        return total

    def decoder_params(self, c: int, task: str) -> int:
        """Parameters of trunk layers c+1..L plus the task head."""
        fan_in, fan_out = self.head_shape(task)
        return self.encoder_params(self.depth) - self.encoder_params(c) + fan_in * fan_out + fan_out

    def task_params(self, task: str) -> int:
        """Total parameter count of the single-task network (trunk + one head)."""
        return self.encoder_params(self.depth) + self.decoder_params(self.depth, task)

    def encoder_block_names(self, c: int) -> tuple:
        if not 0 <= c <= self.depth:
            raise StructuralError(f"shared depth {c} out of range 0..{self.depth}")
        return tuple(f"trunk{i}" for i in range(1, c + 1))

    def decoder_block_names(self, c: int, task: str) -> tuple:
        head = "head_a" if _task_index(task) == 0 else "head_b"
        return tuple(f"trunk{i}" for i in range(c + 1, self.depth + 1)) + (head,)


@dataclass
class ParamVector:
    """Flat float64 parameter storage plus its per-layer block index."""

    values: np.ndarray
    block_index: tuple

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise StructuralError("parameter values must be a flat 1-D array")
        offset = 0
        for name, off, length in self.block_index:
            if off != offset:
                raise StructuralError(f"block {name} at offset {off}, expected {offset}")
            offset += length
        if offset != self.values.size:
            raise StructuralError(
                f"blocks cover {offset} values but the flat array holds {self.values.size}"
            )

    def block(self, name: str) -> np.ndarray:
        for bname, off, length in self.block_index:
            if bname == name:
                return self.values[off:off + length]
        raise StructuralError(f"no block named {name!r}")

    def encoder_slice(self, c: int) -> np.ndarray:
        """View of the parameters of trunk layers 1..c (contiguous prefix)."""
        n_trunk = len(self.block_index) - 2
        if not 0 <= c <= n_trunk:
            raise StructuralError(f"shared depth {c} out of range 0..{n_trunk}")
        if c == 0:
            return self.values[:0]
        _, off, length = self.block_index[c - 1]
        return self.values[:off + length]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.block_index)


@dataclass
class Batch:
    """A labeled sample batch with per-task binary label matrices.

    Every row of [z_a | z_b] must sum to exactly 1: each sample carries a
    one-hot label in exactly one task group and an all-zero row in the other.
    """

    features: np.ndarray
    z_a: np.ndarray
    z_b: np.ndarray
    sample_weight: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.z_a = np.asarray(self.z_a, dtype=np.float64)
        self.z_b = np.asarray(self.z_b, dtype=np.float64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise StructuralError("features must be a 2-D matrix")
        if self.z_a.ndim != 2 or self.z_b.ndim != 2:
            raise StructuralError("label matrices must be 2-D")
        if self.z_a.shape[0] != n or self.z_b.shape[0] != n:
            raise StructuralError("label row counts must match the feature rows")
        row_sums = self.z_a.sum(axis=1) + self.z_b.sum(axis=1)
        if not np.all(row_sums == 1.0):
            raise StructuralError("each row of [z_a | z_b] must sum to exactly 1")
        if self.sample_weight is not None:
            self.sample_weight = np.asarray(self.sample_weight, dtype=np.float64)
            if self.sample_weight.shape != (n,):
                raise StructuralError("sample_weight must be one real per sample")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        sw = None if self.sample_weight is None else self.sample_weight[idx]
        return Batch(self.features[idx], self.z_a[idx], self.z_b[idx], sw)

    def labels(self, task: str) -> np.ndarray:
        return self.z_a if _task_index(task) == 0 else self.z_b


@dataclass(frozen=True)
class OptConfig:
    """SGD-with-momentum settings for one training run."""

    learning_rate: float
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainResult:
    params: ParamVector
    epoch_losses: list


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Seeded init: weights uniform on +-1/sqrt(fan_in), biases exactly zero."""
    rng = np.random.default_rng(seed)
    table = spec.block_table()
    values = np.zeros(spec.param_count, dtype=np.float64)
    for name, offset, _ in table:
        fan_in, fan_out = spec.block_shape(name)
        scale = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-scale, scale, size=fan_in * fan_out)
        values[offset:offset + fan_in * fan_out] = w
    return ParamVector(values, table)


def _check_params(params: ParamVector, spec: ModelSpec) -> None:
    if params.block_index != spec.block_table():
        raise StructuralError("parameter block layout does not match the model spec")


def _layer_views(params: ParamVector, spec: ModelSpec):
    """(W, b) views for every trunk layer plus each head."""
    trunk = []
    for layer in range(1, spec.depth + 1):
        fan_in, fan_out = spec.trunk_shape(layer)
        flat = params.block(f"trunk{layer}")
        trunk.append((flat[:fan_in * fan_out].reshape(fan_in, fan_out), flat[fan_in * fan_out:]))
    heads = {}
    for task, name in (("A", "head_a"), ("B", "head_b")):
        fan_in, fan_out = spec.head_shape(task)
        flat = params.block(name)
        heads[task] = (flat[:fan_in * fan_out].reshape(fan_in, fan_out), flat[fan_in * fan_out:])
    return trunk, heads


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_cache(params: ParamVector, spec: ModelSpec, features: np.ndarray, task: str):
    """Forward pass keeping pre-activations and activations for backprop."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise StructuralError(
            f"features must be (n, {spec.input_dim}), got {x.shape}"
        )
    trunk, heads = _layer_views(params, spec)
    pres = []
    acts = [x]
    h = x
    for w, b in trunk:
        pre = h @ w + b
        h = np.maximum(pre, 0.0) if spec.activation == "relu" else np.tanh(pre)
        pres.append(pre)
        acts.append(h)
    _task_index(task)
    w_h, b_h = heads[task]
    logits = h @ w_h + b_h
    return trunk, heads, pres, acts, logits


def forward(params: ParamVector, spec: ModelSpec, features: np.ndarray, task: str) -> np.ndarray:
    """Per-class logits of the requested branch, one row per sample.

    No normalization across classes: each logit feeds an independent
    Bernoulli factor.
    """
    _check_params(params, spec)
    _task_index(task)
    return _forward_cache(params, spec, features, task)[4]


def _act_deriv(spec: ModelSpec, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


def bce_losses(logits: np.ndarray, labels: np.ndarray, offsets: np.ndarray | None = None) -> np.ndarray:
    """Per-sample summed Bernoulli cross-entropy, numerically stable.

    Uses log(sigmoid(u)) = -logaddexp(0, -u), so the result is finite for
    every finite logit.
    """
    u = logits if offsets is None else logits + offsets
    elem = labels * np.logaddexp(0.0, -u) + (1.0 - labels) * np.logaddexp(0.0, u)
    return elem.sum(axis=1)


def bce_loss_grad(
    params: ParamVector,
    spec: ModelSpec,
    batch: Batch,
    task: str,
    offsets: np.ndarray | None = None,
) -> tuple:
    """Mean Bernoulli cross-entropy of one task branch and its exact gradient.

    loss = -(1/n) sum_i sum_k [z_ik log s(u_ik) + (1 - z_ik) log(1 - s(u_ik))]
    with u = logits + offsets (per-class additive offsets, e.g. log priors).
    The returned gradient is a full ParamVector; blocks of the unused head
    are exactly zero.
    """
    _check_params(params, spec)
    z = batch.labels(task)
    trunk, heads, pres, acts, logits = _forward_cache(params, spec, batch.features, task)
    if z.shape != logits.shape:
        raise StructuralError(f"labels {z.shape} do not match logits {logits.shape}")
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (logits.shape[1],):
            raise StructuralError("offsets must provide one real per branch class")
    n = batch.n
    u = logits if offsets is None else logits + offsets

    rows = bce_losses(logits, z, offsets)
    if batch.sample_weight is not None:
        rows = rows * batch.sample_weight
    loss = float(rows.sum() / n)

    # d loss / d logits; sample weights scale their rows.
    ds = (_sigmoid(u) - z) / n
    if batch.sample_weight is not None:
        ds = ds * batch.sample_weight[:, None]

    grad = np.zeros_like(params.values)
    gvec = ParamVector(grad, params.block_index)
    head_name = "head_a" if _task_index(task) == 0 else "head_b"
    w_h, _ = heads[task]
    fan_in, fan_out = spec.head_shape(task)
    gh = gvec.block(head_name)
    gh[:fan_in * fan_out] = (acts[-1].T @ ds).ravel()
    gh[fan_in * fan_out:] = ds.sum(axis=0)
    dh = ds @ w_h.T
    for layer in range(spec.depth, 0, -1):
        da = dh * _act_deriv(spec, pres[layer - 1], acts[layer])
        w, _ = trunk[layer - 1]
        fi, fo = spec.trunk_shape(layer)
        gt = gvec.block(f"trunk{layer}")
        gt[:fi * fo] = (acts[layer - 1].T @ da).ravel()
        gt[fi * fo:] = da.sum(axis=0)
        dh = da @ w.T
    return loss, gvec


def _trainable_indices(spec: ModelSpec, table: tuple, trainable) -> np.ndarray | None:
    """Flat indices covered by the trainable blocks; None means everything."""
    if trainable is None:
        return None
    if callable(trainable):
        names = {name for name, _, _ in table if trainable(name)}
    else:
        names = set(trainable)
    known = set(spec.block_names())
    unknown = names - known
    if unknown:
        raise StructuralError(f"unknown trainable blocks: {sorted(unknown)}")
    idx = []
    for name, offset, length in table:
        if name in names:
            idx.append(np.arange(offset, offset + length))
    if not idx:
        return np.empty(0, dtype=np.intp)
    return np.concatenate(idx)


def train(
    params: ParamVector,
    spec: ModelSpec,
    batch: Batch,
    task_weights: tuple,
    opt: OptConfig,
    trainable=None,
    offsets: tuple = (None, None),
) -> TrainResult:
    """SGD-with-momentum on w_a * BCE_A + w_b * BCE_B.

    Every sample contributes to both task terms (all-zero label rows just
    drop the positive part). Only parameters inside `trainable` blocks move;
    everything else is left bit-for-bit untouched. Mini-batch order is a
    seeded shuffle per epoch, so a fixed (config, seed) pair reproduces the
    trained parameters exactly.
    """
    _check_params(params, spec)
    w_a, w_b = float(task_weights[0]), float(task_weights[1])
    if w_a < 0 or w_b < 0:
        raise ConfigError("task weights must be nonnegative")
    if w_a == 0 and w_b == 0:
        raise ConfigError("at least one task weight must be positive")
    if w_a > 0 and w_b > 0 and abs(w_a + w_b - 1.0) > 1e-12:
        raise ConfigError("joint training requires w_a + w_b = 1")

    values = params.values.copy()
    current = ParamVector(values, params.block_index)
    idx = _trainable_indices(spec, params.block_index, trainable)
    velocity = np.zeros(values.size if idx is None else idx.size, dtype=np.float64)
    rng = np.random.default_rng(opt.seed)
    n = batch.n
    epoch_losses = []
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opt.batch_size):
            rows = order[start:start + opt.batch_size]
            sub = batch.take(rows)
            loss = 0.0
            grad = np.zeros_like(values)
            if w_a > 0:
                la, ga = bce_loss_grad(current, spec, sub, "A", offsets[0])
                loss += w_a * la
                grad += w_a * ga.values
            if w_b > 0:
                lb, gb = bce_loss_grad(current, spec, sub, "B", offsets[1])
                loss += w_b * lb
                grad += w_b * gb.values
            if not np.isfinite(loss):
                raise TrainingDivergenceError(epoch, loss)
            g = grad if idx is None else grad[idx]
            velocity = opt.momentum * velocity - opt.learning_rate * g
            if idx is None:
                values += velocity
            else:
                values[idx] += velocity
            total += loss * rows.size
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise TrainingDivergenceError(epoch, epoch_loss)
        epoch_losses.append(epoch_loss)
    return TrainResult(current, epoch_losses)
