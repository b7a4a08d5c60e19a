"""Minimal dense MLP numerics: forward/backward, SGD with momentum, schedules.

The model family is fixed on purpose: linear layers with ReLU activations,
a final linear (identity) embedding layer, and an optional linear head.
Backward passes are written by hand against this family rather than through
a general autodiff graph, so every gradient can be checked against finite
differences.

Precision is dual: float32 for ordinary training runs, float64 where runs
are compared pairwise and rounding noise must be minimized.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

CHECKPOINT_MAGIC = b"SMNW"
# Version doubles as the payload precision tag: 1 = float32, 2 = float64.
CHECKPOINT_VERSIONS = {1: np.float32, 2: np.float64}


@dataclass
class TrainConfig:
    """Hyperparameters for one training run (weights, scores, or both).

    ``lr`` is the score learning rate during masking and the weight
    learning rate during plain training. Heads and prototypes train with
    their own rates since they are ordinary (non-masked) parameters.
    """

    lr: float = 50.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    threshold: float = 0.0
    score_init: float = 1.0
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    temperature: float = 0.1
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3
    warmup_fraction: float = 0.0
    prototype_count: int = 500
    precision: str = "f32"
    head_lr: float = 0.15
    prototype_lr: float = 0.15
    queue_size: int = 0
    queue_start_epoch: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.sinkhorn_eps <= 0:
            raise ValueError(f"sinkhorn_eps must be positive, got {self.sinkhorn_eps}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction must lie in [0,1], got {self.warmup_fraction}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {self.precision}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class Layer:
    """One linear transform: y = x @ weights + bias, then the activation."""

    weights: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)
    activation: str = "relu"  # "relu" or "identity"
    maskable: bool = True

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class SmallModel:
    """An MLP backbone plus an optional linear head.

    Biases and the head are never maskable. The last backbone layer is the
    embedding layer and uses the identity activation by convention.
    """

    layers: list
    head: Layer | None = None

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].weights.shape[1]

    def astype(self, dtype) -> "SmallModel":
        layers = [
            Layer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation, l.maskable)
            for l in self.layers
        ]
        head = None
        if self.head is not None:
            head = Layer(
                self.head.weights.astype(dtype),
                self.head.bias.astype(dtype),
                self.head.activation,
                self.head.maskable,
            )
        return SmallModel(layers, head)

    def copy(self) -> "SmallModel":
        return self.astype(self.dtype)

    def maskable_param_count(self) -> int:
        return sum(l.weights.size for l in self.layers if l.maskable)


def init_model(dims, rng, dtype=np.float32, head_dim=None, head_rng=None) -> SmallModel:
    """He-initialized MLP with ReLU hidden layers and an identity embedding layer.

    ``dims`` is (input, hidden..., embed). If ``head_dim`` is given a linear
    classifier head embed -> head_dim is attached (never maskable).
    """
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    layers = []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        w = rng.standard_normal((dims[i], dims[i + 1])) * np.sqrt(2.0 / fan_in)
        b = np.zeros(dims[i + 1])
        act = "identity" if i == len(dims) - 2 else "relu"
        layers.append(Layer(w.astype(dtype), b.astype(dtype), act, maskable=True))
    head = None
    if head_dim is not None:
        head = make_head(dims[-1], head_dim, head_rng if head_rng is not None else rng, dtype)
    return SmallModel(layers, head)


def make_head(in_dim, out_dim, rng, dtype=np.float32) -> Layer:
    w = rng.standard_normal((in_dim, out_dim)) * np.sqrt(1.0 / in_dim)
    return Layer(w.astype(dtype), np.zeros(out_dim, dtype=dtype), "identity", maskable=False)


@dataclass
class ForwardRecord:
    """Everything backward needs: inputs and pre-activations of each layer."""

    model_token: int
    inputs: list  # input to each layer
    preacts: list  # pre-activation output of each layer
    embedding: np.ndarray  # output of the last backbone layer
    output: np.ndarray  # head output if a head is present, else embedding


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0)
    return z


def _activation_grad(dz, preact, activation):
    if activation == "relu":
        return dz * (preact > 0)
    return dz


def forward(model: SmallModel, batch: np.ndarray) -> ForwardRecord:
    """Run the model on a (batch, input_dim) matrix, keeping intermediates."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ValueError(
            f"batch shape {batch.shape} does not match model input dim {model.input_dim}"
        )
    x = batch.astype(model.dtype, copy=False)
    inputs, preacts = [], []
    for layer in model.layers:
        inputs.append(x)
        z = x @ layer.weights + layer.bias
        preacts.append(z)
        x = _activate(z, layer.activation)
    embedding = x
    output = embedding
    if model.head is not None:
        output = embedding @ model.head.weights + model.head.bias
    return ForwardRecord(id(model), inputs, preacts, embedding, output)


def backward(model: SmallModel, record: ForwardRecord, loss_grad: np.ndarray):
    """Gradients of the loss w.r.t. every weight and bias.

    ``loss_grad`` is d(loss)/d(output). Returns (layer_grads, head_grad)
    where layer_grads is a list of (dW, db) matching model.layers.
    """
    if record.model_token != id(model):
        raise ValueError("stale forward record: produced by a different model instance")
    d = np.asarray(loss_grad, dtype=model.dtype)
    head_grad = None
    if model.head is not None:
        dw_h = record.embedding.T @ d
        db_h = d.sum(axis=0)
        head_grad = (dw_h, db_h)
        d = d @ model.head.weights.T
    layer_grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        d = _activation_grad(d, record.preacts[i], layer.activation)
        dw = record.inputs[i].T @ d
        db = d.sum(axis=0)
        layer_grads[i] = (dw, db)
        d = d @ layer.weights.T
    return layer_grads, head_grad


class OptimizerState:
    """Momentum buffers for a flat list of parameters, zero at step 0."""

    def __init__(self, params):
        self.velocity = [np.zeros_like(p) for p in params]
        self.step_count = 0


def sgd_step(params, grads, state: OptimizerState, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD with momentum: v <- m*v + (g + wd*p); p <- p - lr*v."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter {i} at step {state.step_count} "
                f"(|g|_max={np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'nan'})"
            )
        v = state.velocity[i]
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v
    state.step_count += 1


def cosine_warmup_lr(step, total_steps, base_lr, warmup_fraction=0.0):
    """Linear ramp to base_lr over warmup_fraction of steps, then cosine to 0."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = warmup_fraction * total_steps
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch. Returns (loss, dloss/dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    p = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -(z[np.arange(n), labels] - np.log(expz.sum(axis=1)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(nll.mean()), grad / n


def train_classifier(model: SmallModel, x, y, config: TrainConfig, rng, trainable="all"):
    """Plain supervised training of model weights with SGD + momentum.

    ``trainable`` is "all" (full fine-tuning / pretraining) or "head"
    (linear probe style). Data order is reshuffled once per epoch from
    ``rng``; with a fixed seed the trajectory is bit-reproducible.
    Returns a list of per-epoch mean losses.
    """
    if model.head is None:
        raise ValueError("train_classifier needs a model with a classifier head")
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y)
    params = [model.head.weights, model.head.bias]
    if trainable == "all":
        for layer in model.layers:
            params.extend([layer.weights, layer.bias])
    state = OptimizerState(params)
    n = x.shape[0]
    steps_per_epoch = max(1, int(np.ceil(n / config.batch_size)))
    total_steps = config.epochs * steps_per_epoch
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            rec = forward(model, x[idx])
            loss, dlogits = softmax_cross_entropy(rec.output, y[idx])
            layer_grads, head_grad = backward(model, rec, dlogits)
            grads = [head_grad[0], head_grad[1]]
            if trainable == "all":
                for gw, gb in layer_grads:
                    grads.extend([gw, gb])
            lr = cosine_warmup_lr(state.step_count, total_steps, config.lr, config.warmup_fraction)
            sgd_step(params, grads, state, lr, config.momentum, config.weight_decay)
            epoch_loss += loss
        losses.append(epoch_loss / steps_per_epoch)
    return losses


def accuracy(model: SmallModel, x, y) -> float:
    rec = forward(model, np.asarray(x, dtype=model.dtype))
    return float((rec.output.argmax(axis=1) == np.asarray(y)).mean())


def save_checkpoint(path, model: SmallModel):
    """Write the model tensors in the SMNW container.

    Layout (little-endian): magic "SMNW", version u16 (1=f32 payload,
    2=f64 payload), backbone layer count u16, then per tensor: rank u8,
    each dim u32, raw IEEE-754 values. Tensors are the (weights, bias)
    pairs of each backbone layer, then the head pair if one exists.
    """
    tensors = []
    for layer in model.layers:
        tensors.extend([layer.weights, layer.bias])
    if model.head is not None:
        tensors.extend([model.head.weights, model.head.bias])
    version = 2 if model.dtype == np.float64 else 1
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<HH", version, len(model.layers))
    for t in tensors:
        out += struct.pack("<B", t.ndim)
        for dim in t.shape:
            out += struct.pack("<I", dim)
        out += np.ascontiguousarray(t, dtype=model.dtype).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def _read_tensor(data, off, dtype):
    (rank,) = struct.unpack_from("<B", data, off)
    off += 1
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    size = int(np.prod(shape)) if rank else 1
    end = off + size * dtype.itemsize
    if end > len(data):
        raise ValueError("truncated checkpoint payload")
    t = np.frombuffer(data, dtype=dtype, count=size, offset=off).reshape(shape)
    return t.astype(dtype.newbyteorder("=")), end


def load_checkpoint(path) -> SmallModel:
    """Inverse of save_checkpoint; reconstructs the fixed MLP family."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    version, n_layers = struct.unpack_from("<HH", data, 4)
    if version not in CHECKPOINT_VERSIONS:
        raise ValueError(f"unsupported checkpoint version {version}")
    dtype = np.dtype(CHECKPOINT_VERSIONS[version]).newbyteorder("<")
    off = 8
    layers = []
    for i in range(n_layers):
        w, off = _read_tensor(data, off, dtype)
        b, off = _read_tensor(data, off, dtype)
        act = "identity" if i == n_layers - 1 else "relu"
        layers.append(Layer(w, b, act, maskable=True))
    head = None
    if off < len(data):
        w, off = _read_tensor(data, off, dtype)
        b, off = _read_tensor(data, off, dtype)
        head = Layer(w, b, "identity", maskable=False)
    return SmallModel(layers, head)
