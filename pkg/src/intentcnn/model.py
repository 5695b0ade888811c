"""The trace classifier network: configuration, training, and binary model files.

Architecture (fixed topology, configurable widths): N repetitions of
[conv -> relu -> maxpool] over (channels, frames) input, one batch
normalization, flatten, a stack of relu dense layers, and a final dense
classifier read through softmax.  Batch normalization sits either directly
after the last pooling stage (normalizing each conv channel, the default) or
after flattening (normalizing each flattened entry).

All learnable parameters are float32; an alternative dtype can be requested
at build time for high-precision gradient verification.  Model files use the
``INTC`` container described next to :func:`serialize`.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass

import numpy as np

from .config import KeyReader
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
    TrainingError,
)
from .metrics import confusion_matrix, macro_f1
from .numerics import (
    GradCheckResult,
    batchnorm_backward,
    batchnorm_forward_infer,
    batchnorm_forward_train,
    batchnorm_update_running,
    categorical_cross_entropy,
    conv1d_backward,
    conv1d_forward,
    dense_backward,
    dense_forward,
    gradient_check,
    maxpool1d_backward,
    maxpool1d_forward,
    one_hot,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cce_logit_grad,
)

BATCHNORM_POSITIONS = ("after_last_conv", "before_first_fc")

MAGIC = b"INTC"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration and shape planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkConfig:
    """Widths and placement choices for the standard conv/pool/fc stack."""

    channels: int = 24
    input_frames: int = 2000
    conv_filters: tuple[int, ...] = (16, 32, 64, 64)
    kernel_width: int = 5
    pool: int = 2
    pool_stride: int = 2
    fc_sizes: tuple[int, ...] = (128, 64)
    num_classes: int = 6
    batchnorm_position: str = "after_last_conv"

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.input_frames < 1:
            raise ConfigError(f"input_frames must be >= 1, got {self.input_frames}")
        if not self.conv_filters or any(f < 1 for f in self.conv_filters):
            raise ConfigError(f"conv_filters must be a non-empty list of positive "
                              f"widths, got {self.conv_filters}")
        if self.kernel_width < 1:
            raise ConfigError(f"kernel_width must be >= 1, got {self.kernel_width}")
        if self.pool < 1 or self.pool_stride < 1:
            raise ConfigError(f"pool and pool_stride must be >= 1, got "
                              f"{self.pool}/{self.pool_stride}")
        if any(s < 1 for s in self.fc_sizes):
            raise ConfigError(f"fc_sizes must all be positive, got {self.fc_sizes}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.batchnorm_position not in BATCHNORM_POSITIONS:
            raise ConfigError(f"batchnorm_position must be one of {BATCHNORM_POSITIONS}, "
                              f"got {self.batchnorm_position!r}")


def plan_layers(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Walk the stack and return each layer's output shape; fail on underflow.

    Conv/pool entries report ``(channels, frames)``; flatten and dense entries
    report ``(width,)``.  A layer whose input is too short raises ConfigError
    naming that layer.
    """
    shapes: list[tuple[str, tuple[int, ...]]] = []
    channels, frames = config.channels, config.input_frames
    for n, filters in enumerate(config.conv_filters, start=1):
        if frames < config.kernel_width:
            raise ConfigError(f"conv{n} needs at least kernel_width={config.kernel_width} "
                              f"input frames but would receive {frames}")
        frames = frames - config.kernel_width + 1
        channels = filters
        shapes.append((f"conv{n}", (channels, frames)))
        if frames < config.pool:
            raise ConfigError(f"pool{n} needs at least pool={config.pool} input frames "
                              f"but would receive {frames}")
        frames = (frames - config.pool) // config.pool_stride + 1
        shapes.append((f"pool{n}", (channels, frames)))
    if config.batchnorm_position == "after_last_conv":
        shapes.append(("batchnorm", (channels, frames)))
    flat = channels * frames
    shapes.append(("flatten", (flat,)))
    if config.batchnorm_position == "before_first_fc":
        shapes.append(("batchnorm", (flat,)))
    for n, width in enumerate(config.fc_sizes, start=1):
        shapes.append((f"fc{n}", (width,)))
    shapes.append(("output", (config.num_classes,)))
    return shapes


def parse_network_config(reader: KeyReader, defaults: NetworkConfig | None = None,
                         prefix: str = "model.") -> NetworkConfig:
    """Read ``model.*`` keys from a KeyReader over flat key=value pairs."""
    base = defaults if defaults is not None else NetworkConfig()
    return NetworkConfig(
        channels=reader.take_int(prefix + "channels", base.channels),
        input_frames=reader.take_int(prefix + "input_frames", base.input_frames),
        conv_filters=tuple(reader.take_int_list(prefix + "conv_filters",
                                                list(base.conv_filters))),
        kernel_width=reader.take_int(prefix + "kernel_width", base.kernel_width),
        pool=reader.take_int(prefix + "pool", base.pool),
        pool_stride=reader.take_int(prefix + "pool_stride", base.pool_stride),
        fc_sizes=tuple(reader.take_int_list(prefix + "fc_sizes", list(base.fc_sizes))),
        num_classes=reader.take_int(prefix + "num_classes", base.num_classes),
        batchnorm_position=reader.take_str(prefix + "batchnorm_position",
                                           base.batchnorm_position),
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class ConvLayer:
    """Valid cross-correlation followed by relu."""

    def __init__(self, name: str, weights: np.ndarray, bias: np.ndarray):
        self.name = name
        self.weights = weights
        self.bias = bias

    def param_items(self):
        return [(f"{self.name}.weights", self.weights), (f"{self.name}.bias", self.bias)]

    def forward_train(self, x):
        pre = conv1d_forward(x, self.weights, self.bias)
        return relu_forward(pre), (x, pre)

    def forward_infer(self, x):
        return relu_forward(conv1d_forward(x, self.weights, self.bias))

    def backward(self, cache, upstream):
        x, pre = cache
        dpre = relu_backward(pre, upstream)
        dx, dw, db = conv1d_backward(x, self.weights, dpre)
        return dx, {f"{self.name}.weights": dw, f"{self.name}.bias": db}


class PoolLayer:
    """Temporal max pooling; no parameters."""

    def __init__(self, name: str, pool: int, stride: int):
        self.name = name
        self.pool = pool
        self.stride = stride

    def param_items(self):
        return []

    def forward_train(self, x):
        return maxpool1d_forward(x, self.pool, self.stride), x

    def forward_infer(self, x):
        return maxpool1d_forward(x, self.pool, self.stride)

    def backward(self, cache, upstream):
        return maxpool1d_backward(cache, self.pool, self.stride, upstream), {}


class BatchNormLayer:
    """Batch normalization over conv channels (per_channel) or flat entries.

    ``forward_train`` is side-effect free; the running statistics only move
    when the owner explicitly calls :meth:`update_running` with the cache.
    """

    def __init__(self, name: str, gamma: np.ndarray, beta: np.ndarray,
                 running_mean: np.ndarray, running_var: np.ndarray, per_channel: bool):
        self.name = name
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.per_channel = per_channel

    def param_items(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def _to_rows(self, x):
        if not self.per_channel:
            return x, None
        # (B, C, F) -> (B*F, C): every frame of every sample is one row
        batch, channels, frames = x.shape
        return x.transpose(0, 2, 1).reshape(batch * frames, channels), (batch, channels, frames)

    def _from_rows(self, rows, shape):
        if shape is None:
            return rows
        batch, channels, frames = shape
        return rows.reshape(batch, frames, channels).transpose(0, 2, 1)

    def forward_train(self, x):
        rows, shape = self._to_rows(x)
        out, cache = batchnorm_forward_train(rows, self.gamma, self.beta)
        return self._from_rows(out, shape), (cache, shape)

    def forward_infer(self, x):
        rows, shape = self._to_rows(x)
        out = batchnorm_forward_infer(rows, self.gamma, self.beta,
                                      self.running_mean, self.running_var)
        return self._from_rows(out, shape)

    def backward(self, cache, upstream):
        bn_cache, shape = cache
        rows, _ = self._to_rows(upstream)
        dx, dgamma, dbeta = batchnorm_backward(bn_cache, rows)
        return self._from_rows(dx, shape), {f"{self.name}.gamma": dgamma.astype(self.gamma.dtype),
                                            f"{self.name}.beta": dbeta.astype(self.beta.dtype)}

    def update_running(self, cache):
        bn_cache, _ = cache
        new_mean, new_var = batchnorm_update_running(bn_cache, self.running_mean.astype(np.float64),
                                                     self.running_var.astype(np.float64))
        self.running_mean = new_mean.astype(self.running_mean.dtype)
        self.running_var = new_var.astype(self.running_var.dtype)


class DenseLayer:
    """Affine map, optionally followed by relu (the classifier head omits it)."""

    def __init__(self, name: str, weights: np.ndarray, bias: np.ndarray, relu: bool):
        self.name = name
        self.weights = weights
        self.bias = bias
        self.relu = relu

    def param_items(self):
        return [(f"{self.name}.weights", self.weights), (f"{self.name}.bias", self.bias)]

    def forward_train(self, x):
        pre = dense_forward(x, self.weights, self.bias)
        return (relu_forward(pre) if self.relu else pre), (x, pre)

    def forward_infer(self, x):
        pre = dense_forward(x, self.weights, self.bias)
        return relu_forward(pre) if self.relu else pre

    def backward(self, cache, upstream):
        x, pre = cache
        dpre = relu_backward(pre, upstream) if self.relu else upstream
        dx, dw, db = dense_backward(x, self.weights, dpre)
        return dx, {f"{self.name}.weights": dw, f"{self.name}.bias": db}


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class Network:
    """Composed layer stacks plus the flatten point between them."""

    def __init__(self, config: NetworkConfig, conv_stack, fc_stack, dtype=np.float32):
        self.config = config
        self.conv_stack = list(conv_stack)
        self.fc_stack = list(fc_stack)
        self.dtype = np.dtype(dtype)
        plan = plan_layers(config)
        pooled = [shape for name, shape in plan if name.startswith("pool")][-1]
        self.conv_out_shape = pooled  # (channels, frames) entering flatten

    # -- structure ----------------------------------------------------------

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def layers(self):
        return self.conv_stack + self.fc_stack

    def param_items(self):
        items = []
        for layer in self.layers():
            items.extend(layer.param_items())
        return items

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.param_items())

    def snapshot(self):
        """Deep copy of every mutable tensor (parameters and running statistics)."""
        return copy.deepcopy((self.conv_stack, self.fc_stack))

    def restore(self, state) -> None:
        self.conv_stack, self.fc_stack = copy.deepcopy(state)

    # -- forward / backward --------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 3:
            raise DimensionError(f"network input must be (batch, channels, frames), "
                                 f"got shape {x.shape}")
        expected = (self.config.channels, self.config.input_frames)
        if x.shape[1:] != expected:
            raise DimensionError(f"network expects (channels, frames) = {expected}, "
                                 f"got {x.shape[1:]}")
        return x.astype(self.dtype, copy=False)

    def forward_train(self, x):
        """Logits plus the cache list needed by :meth:`backward`.  No side effects."""
        a = self._check_input(x)
        caches = []
        for layer in self.conv_stack:
            a, cache = layer.forward_train(a)
            caches.append(cache)
        a = a.reshape(a.shape[0], -1)
        for layer in self.fc_stack:
            a, cache = layer.forward_train(a)
            caches.append(cache)
        return a, caches

    def forward_infer(self, x):
        a = self._check_input(x)
        for layer in self.conv_stack:
            a = layer.forward_infer(a)
        a = a.reshape(a.shape[0], -1)
        for layer in self.fc_stack:
            a = layer.forward_infer(a)
        return a

    def backward(self, caches, dlogits):
        """Gradients for every parameter, keyed like the param_items names."""
        grads: dict[str, np.ndarray] = {}
        upstream = dlogits
        split = len(self.conv_stack)
        for layer, cache in zip(reversed(self.fc_stack), reversed(caches[split:])):
            upstream, layer_grads = layer.backward(cache, upstream)
            grads.update(layer_grads)
        channels, frames = self.conv_out_shape
        upstream = upstream.reshape(upstream.shape[0], channels, frames)
        for layer, cache in zip(reversed(self.conv_stack), reversed(caches[:split])):
            upstream, layer_grads = layer.backward(cache, upstream)
            grads.update(layer_grads)
        return grads

    def update_running_stats(self, caches) -> None:
        for layer, cache in zip(self.layers(), caches):
            if isinstance(layer, BatchNormLayer):
                layer.update_running(cache)

    # -- prediction -----------------------------------------------------------

    def predict_proba(self, x) -> np.ndarray:
        """Class probabilities, computed one sample at a time.

        Processing each sample through its own forward pass keeps the
        arithmetic (and therefore the exact float results) independent of how
        callers group samples into batches, so online single-window use and
        offline batch evaluation agree bit for bit.
        """
        x = self._check_input(np.asarray(x))
        rows = [softmax(self.forward_infer(x[i:i + 1]))[0] for i in range(x.shape[0])]
        return np.stack(rows)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1)


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Construct a network with He-uniform weights (bound sqrt(6/fan_in)), zero
    biases, unit batchnorm scale.  Draws happen in layer order from one seeded
    generator, so a given (config, seed) always yields the same parameters.
    """
    plan = plan_layers(config)
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)

    def he_uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    conv_stack = []
    in_channels = config.channels
    for n, filters in enumerate(config.conv_filters, start=1):
        weights = he_uniform((filters, in_channels, config.kernel_width),
                             in_channels * config.kernel_width)
        bias = np.zeros(filters, dtype=dtype)
        conv_stack.append(ConvLayer(f"conv{n}", weights, bias))
        conv_stack.append(PoolLayer(f"pool{n}", config.pool, config.pool_stride))
        in_channels = filters
    flat = next(shape[0] for name, shape in plan if name == "flatten")
    fc_stack = []
    if config.batchnorm_position == "after_last_conv":
        conv_stack.append(_fresh_batchnorm("batchnorm", in_channels, True, dtype))
    else:
        fc_stack.append(_fresh_batchnorm("batchnorm", flat, False, dtype))
    in_features = flat
    for n, width in enumerate(config.fc_sizes, start=1):
        fc_stack.append(DenseLayer(f"fc{n}", he_uniform((width, in_features), in_features),
                                   np.zeros(width, dtype=dtype), relu=True))
        in_features = width
    fc_stack.append(DenseLayer("output", he_uniform((config.num_classes, in_features), in_features),
                               np.zeros(config.num_classes, dtype=dtype), relu=False))
    return Network(config, conv_stack, fc_stack, dtype=dtype)


def _fresh_batchnorm(name: str, features: int, per_channel: bool, dtype) -> BatchNormLayer:
    return BatchNormLayer(name,
                          gamma=np.ones(features, dtype=dtype),
                          beta=np.zeros(features, dtype=dtype),
                          running_mean=np.zeros(features, dtype=dtype),
                          running_var=np.ones(features, dtype=dtype),
                          per_channel=per_channel)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSpec:
    """Optimization schedule; defaults follow the standard recipe."""

    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (batch statistics need at "
                              f"least two samples), got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float


@dataclass
class TrainResult:
    """Training history; the trained network itself is restored to best-epoch state."""

    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def parse_train_spec(reader: KeyReader, defaults: TrainSpec | None = None,
                     prefix: str = "train.") -> TrainSpec:
    base = defaults if defaults is not None else TrainSpec()
    return TrainSpec(
        epochs=reader.take_int(prefix + "epochs", base.epochs),
        batch_size=reader.take_int(prefix + "batch_size", base.batch_size),
        learning_rate=reader.take_float(prefix + "learning_rate", base.learning_rate),
        optimizer=reader.take_str(prefix + "optimizer", base.optimizer),
        patience=reader.take_int(prefix + "patience", base.patience),
        seed=reader.take_int(prefix + "seed", base.seed),
    )


class _Adam:
    def __init__(self, spec: TrainSpec):
        self.spec = spec
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def apply(self, params, grads) -> None:
        spec = self.spec
        self.step += 1
        bias1 = 1.0 - spec.beta1 ** self.step
        bias2 = 1.0 - spec.beta2 ** self.step
        for key, value in params:
            grad = grads[key]
            m = self.m.get(key)
            if m is None:
                m = np.zeros_like(value)
                self.m[key] = m
                self.v[key] = np.zeros_like(value)
            v = self.v[key]
            m *= spec.beta1
            m += (1.0 - spec.beta1) * grad
            v *= spec.beta2
            v += (1.0 - spec.beta2) * grad * grad
            update = (m / bias1) / (np.sqrt(v / bias2) + spec.adam_epsilon)
            value -= spec.learning_rate * update.astype(value.dtype, copy=False)


class _Sgd:
    def __init__(self, spec: TrainSpec):
        self.spec = spec

    def apply(self, params, grads) -> None:
        for key, value in params:
            value -= self.spec.learning_rate * grads[key].astype(value.dtype, copy=False)


def _batch_plan(n: int, batch_size: int):
    """Start offsets of each batch; a trailing single sample is dropped."""
    starts = list(range(0, n, batch_size))
    if starts and n - starts[-1] == 1 and len(starts) > 1:
        starts.pop()
    return starts


def train(network: Network, train_x, train_y, val_x, val_y, spec: TrainSpec) -> TrainResult:
    """Mini-batch training with early stopping on validation loss.

    The validation pass runs in inference mode every epoch.  The network is
    left holding the parameters (and running statistics) of the epoch with
    the strictly lowest validation loss; ties keep the earliest epoch.
    """
    train_x = np.asarray(train_x)
    train_y = np.asarray(train_y)
    val_x = np.asarray(val_x)
    val_y = np.asarray(val_y)
    if len(train_x) != len(train_y):
        raise DimensionError(f"{len(train_x)} training samples vs {len(train_y)} labels")
    if len(val_x) != len(val_y):
        raise DimensionError(f"{len(val_x)} validation samples vs {len(val_y)} labels")
    if len(train_x) < 2:
        raise InputError("training needs at least two samples")
    if len(val_x) == 0:
        raise InputError("training needs a non-empty validation set for early stopping")
    num_classes = network.num_classes
    for name, labels in (("training", train_y), ("validation", val_y)):
        if labels.min() < 0 or labels.max() >= num_classes:
            raise InputError(f"{name} labels outside [0, {num_classes})")

    optimizer = _Adam(spec) if spec.optimizer == "adam" else _Sgd(spec)
    rng = np.random.default_rng(spec.seed)
    history: list[EpochRecord] = []
    best_state = network.snapshot()
    best_val = np.inf
    best_epoch = -1
    stale = 0
    stopped_early = False

    for epoch in range(spec.epochs):
        perm = rng.permutation(len(train_x))
        loss_sum = 0.0
        sample_count = 0
        for batch_index, start in enumerate(_batch_plan(len(perm), spec.batch_size)):
            take = perm[start:start + spec.batch_size]
            xb = train_x[take]
            yb = one_hot(train_y[take], num_classes)
            try:
                logits, caches = network.forward_train(xb)
                probs = softmax(logits)
                loss = categorical_cross_entropy(probs, yb)
            except NumericError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch "
                                    f"{batch_index}: {exc}", epoch=epoch,
                                    batch=batch_index) from exc
            if not np.isfinite(loss.value):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {batch_index}",
                                    epoch=epoch, batch=batch_index)
            grads = network.backward(caches, softmax_cce_logit_grad(probs, yb))
            network.update_running_stats(caches)
            optimizer.apply(network.param_items(), grads)
            loss_sum += loss.value * loss.batch_size
            sample_count += loss.batch_size

        val_loss, val_f1 = _validate(network, val_x, val_y)
        record = EpochRecord(epoch=epoch, train_loss=loss_sum / sample_count,
                             val_loss=val_loss, val_macro_f1=val_f1)
        history.append(record)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = network.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                stopped_early = True
                break

    network.restore(best_state)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_loss=float(best_val), stopped_early=stopped_early)


def _validate(network: Network, val_x, val_y) -> tuple[float, float]:
    logits = network.forward_infer(val_x)
    probs = softmax(logits)
    loss = categorical_cross_entropy(probs, one_hot(val_y, network.num_classes))
    preds = np.argmax(probs, axis=-1)
    cm = confusion_matrix(np.asarray(val_y), preds, network.num_classes)
    return float(loss.value), macro_f1(cm)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def check_network_gradients(network: Network, x, labels, epsilon: float = 1e-5,
                            target_rel_tol: float | None = None) -> GradCheckResult:
    """Finite-difference check of every parameter gradient through the full loss.

    Runs one analytic forward/backward at the network's own precision, then
    probes each parameter coordinate with central differences of the
    train-mode softmax cross entropy.  For a float32 network the difference
    quotients are evaluated through a float64 twin that mirrors the exact
    (perturbed) float32 parameter values, so the reference derivative is far
    more accurate than the gradients it judges; the measured error is then
    genuinely the float32 backward pass's own.
    """
    x = np.asarray(x)
    targets = one_hot(np.asarray(labels), network.num_classes)
    names = [name for name, _ in network.param_items()]
    arrays = [arr for _, arr in network.param_items()]

    if network.dtype == np.float64:
        eval_net = network
        eval_arrays = arrays
    else:
        eval_net = build_network(network.config, seed=0, dtype=np.float64)
        eval_arrays = [arr for _, arr in eval_net.param_items()]
    x_eval = x.astype(np.float64)

    def loss_fn() -> float:
        if eval_net is not network:
            for dst, src in zip(eval_arrays, arrays):
                dst[...] = src  # float32 values are exact in float64
        logits, _ = eval_net.forward_train(x_eval)
        return categorical_cross_entropy(softmax(logits), targets).value

    logits, caches = network.forward_train(x)
    probs = softmax(logits)
    grads = network.backward(caches, softmax_cce_logit_grad(probs, targets))
    analytic = [grads[name].astype(arr.dtype) for name, arr in zip(names, arrays)]
    return gradient_check(loss_fn, arrays, analytic, epsilon=epsilon,
                          target_rel_tol=target_rel_tol,
                          loss_eps=float(np.finfo(np.float64).eps))


# ---------------------------------------------------------------------------
# model files (INTC container)
# ---------------------------------------------------------------------------
#
# Layout, all integers little-endian u32, all floats little-endian f32:
#   magic "INTC" | version | record_count
#   per record: 4-byte ASCII tag | ndims | ndims x u32 | payload floats
#     INPT (channels, frames)           no payload
#     CONV (out, in, kernel)            weights then bias
#     POOL (pool, stride)               no payload
#     BNRM (features, style)            gamma, beta, running_mean, running_var
#                                       style 0 = conv channels, 1 = flat entries
#     DENS (out, in)                    weights then bias
# Records appear in network order; relu is implied on every conv and on every
# dense except the last.

def serialize(network: Network) -> bytes:
    out = bytearray()
    out += MAGIC
    records = _records_of(network)
    out += struct.pack("<II", FORMAT_VERSION, len(records))
    for tag, dims, payloads in records:
        out += tag
        out += struct.pack("<I", len(dims))
        out += struct.pack(f"<{len(dims)}I", *dims)
        for arr in payloads:
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def _records_of(network: Network):
    config = network.config
    records = [(b"INPT", (config.channels, config.input_frames), [])]
    for layer in network.layers():
        if isinstance(layer, ConvLayer):
            records.append((b"CONV", layer.weights.shape, [layer.weights, layer.bias]))
        elif isinstance(layer, PoolLayer):
            records.append((b"POOL", (layer.pool, layer.stride), []))
        elif isinstance(layer, BatchNormLayer):
            records.append((b"BNRM", (layer.gamma.shape[0], 0 if layer.per_channel else 1),
                            [layer.gamma, layer.beta, layer.running_mean, layer.running_var]))
        elif isinstance(layer, DenseLayer):
            records.append((b"DENS", layer.weights.shape, [layer.weights, layer.bias]))
        else:  # pragma: no cover - the stacks only ever hold the four types above
            raise TypeError(f"unknown layer type {type(layer).__name__}")
    return records


def save_model(network: Network, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(network))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(f"model file truncated at byte {self.offset} while "
                              f"reading {what}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def deserialize(data: bytes) -> Network:
    cursor = _Cursor(data)
    magic = cursor.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    version = cursor.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at byte 4, "
                          f"expected {FORMAT_VERSION}")
    count = cursor.u32("record count")
    for index in range(count):
        record_offset = cursor.offset
        tag = cursor.take(4, f"tag of record {index}")
        try:
            name = tag.decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"unreadable record tag at byte {record_offset}") from None
        ndims = cursor.u32(f"dimension count of {name}")
        if ndims > 8:
            raise FormatError(f"record {name} at byte {record_offset} claims {ndims} "
                              f"dimensions")
        dims = tuple(cursor.u32(f"dimensions of {name}") for _ in range(ndims))
        _skip_payload(cursor, name, dims, record_offset)
    if cursor.offset != len(data):
        raise FormatError(f"{len(data) - cursor.offset} trailing bytes after the last "
                          f"record (at byte {cursor.offset})")
    return _rebuild(data, count)


def _payload_spec(name: str, dims, offset: int):
    """Expected payload arrays as (label, shape) pairs for a record type."""
    if name == "INPT":
        _need_dims(name, dims, 2, offset)
        return []
    if name == "CONV":
        _need_dims(name, dims, 3, offset)
        out, inp, kernel = dims
        return [("weights", (out, inp, kernel)), ("bias", (out,))]
    if name == "POOL":
        _need_dims(name, dims, 2, offset)
        return []
    if name == "BNRM":
        _need_dims(name, dims, 2, offset)
        features, style = dims
        if style not in (0, 1):
            raise FormatError(f"BNRM record at byte {offset} has unknown style {style}")
        return [(label, (features,)) for label in
                ("gamma", "beta", "running_mean", "running_var")]
    if name == "DENS":
        _need_dims(name, dims, 2, offset)
        out, inp = dims
        return [("weights", (out, inp)), ("bias", (out,))]
    raise FormatError(f"unknown record tag {name!r} at byte {offset}")


def _need_dims(name: str, dims, expected: int, offset: int) -> None:
    if len(dims) != expected:
        raise FormatError(f"{name} record at byte {offset} has {len(dims)} dimensions, "
                          f"expected {expected}")
    sizes = dims[:1] if name == "BNRM" else dims  # the BNRM style field may be 0
    if any(d == 0 for d in sizes):
        raise FormatError(f"{name} record at byte {offset} has a zero dimension")


def _skip_payload(cursor: _Cursor, name: str, dims, offset: int) -> None:
    for label, shape in _payload_spec(name, dims, offset):
        cursor.floats(int(np.prod(shape)), f"{name}.{label}")


def _rebuild(data: bytes, count: int) -> Network:
    """Second pass: reconstruct layers now that the container structure checks out."""
    cursor = _Cursor(data)
    cursor.take(4, "magic")
    cursor.u32("version")
    cursor.u32("record count")
    conv_stack: list = []
    fc_stack: list = []
    channels = frames = None
    conv_index = pool_index = dense_count = 0
    bn_records = 0
    in_fc = False
    dense_layers: list[DenseLayer] = []
    for index in range(count):
        offset = cursor.offset
        name = cursor.take(4, "tag").decode("ascii")
        ndims = cursor.u32("ndims")
        dims = tuple(cursor.u32("dims") for _ in range(ndims))
        payloads = [cursor.floats(int(np.prod(shape)), f"{name}.{label}").reshape(shape)
                    for label, shape in _payload_spec(name, dims, offset)]
        if name == "INPT":
            if index != 0:
                raise FormatError(f"INPT record at byte {offset} must come first")
            channels, frames = dims
        elif channels is None:
            raise FormatError("model file does not start with an INPT record")
        elif name == "CONV":
            if in_fc:
                raise FormatError(f"CONV record at byte {offset} after the flatten point")
            conv_index += 1
            conv_stack.append(ConvLayer(f"conv{conv_index}", payloads[0], payloads[1]))
        elif name == "POOL":
            if in_fc:
                raise FormatError(f"POOL record at byte {offset} after the flatten point")
            pool_index += 1
            conv_stack.append(PoolLayer(f"pool{pool_index}", dims[0], dims[1]))
        elif name == "BNRM":
            bn_records += 1
            if bn_records > 1:
                raise FormatError(f"second BNRM record at byte {offset}; the stack has "
                                  f"exactly one normalization")
            per_channel = dims[1] == 0
            layer = BatchNormLayer("batchnorm", payloads[0], payloads[1], payloads[2],
                                   payloads[3], per_channel)
            if per_channel:
                if in_fc:
                    raise FormatError(f"conv-style BNRM at byte {offset} after the "
                                      f"flatten point")
                conv_stack.append(layer)
            else:
                in_fc = True
                fc_stack.append(layer)
        elif name == "DENS":
            in_fc = True
            dense_count += 1
            dense_layers.append(DenseLayer("", payloads[0], payloads[1], relu=True))
            fc_stack.append(dense_layers[-1])
    if channels is None:
        raise FormatError("model file has no records")
    if not dense_layers:
        raise FormatError("model file has no DENS record; a classifier head is required")
    if bn_records == 0:
        raise FormatError("model file has no BNRM record; the stack has exactly one "
                          "normalization")
    for n, layer in enumerate(dense_layers[:-1], start=1):
        layer.name = f"fc{n}"
    dense_layers[-1].name = "output"
    dense_layers[-1].relu = False

    config = _config_from_layers(channels, frames, conv_stack, fc_stack)
    try:
        network = Network(config, conv_stack, fc_stack, dtype=np.float32)
    except ConfigError as exc:
        raise FormatError(f"stored architecture is invalid: {exc}") from exc
    _check_rebuilt_shapes(network)
    return network


def _config_from_layers(channels: int, frames: int, conv_stack, fc_stack) -> NetworkConfig:
    convs = [l for l in conv_stack if isinstance(l, ConvLayer)]
    pools = [l for l in conv_stack if isinstance(l, PoolLayer)]
    if len(convs) != len(pools):
        raise FormatError(f"{len(convs)} CONV records but {len(pools)} POOL records; "
                          f"the stack pairs them")
    if not convs:
        raise FormatError("model file has no CONV record")
    kernels = {c.weights.shape[2] for c in convs}
    if len(kernels) != 1:
        raise FormatError(f"mixed kernel widths {sorted(kernels)} are not supported")
    pool_sizes = {(p.pool, p.stride) for p in pools}
    if len(pool_sizes) != 1:
        raise FormatError(f"mixed pool geometries {sorted(pool_sizes)} are not supported")
    bn_in_conv = any(isinstance(l, BatchNormLayer) for l in conv_stack)
    denses = [l for l in fc_stack if isinstance(l, DenseLayer)]
    try:
        return NetworkConfig(
            channels=channels,
            input_frames=frames,
            conv_filters=tuple(c.weights.shape[0] for c in convs),
            kernel_width=convs[0].weights.shape[2],
            pool=pools[0].pool,
            pool_stride=pools[0].stride,
            fc_sizes=tuple(d.weights.shape[0] for d in denses[:-1]),
            num_classes=denses[-1].weights.shape[0],
            batchnorm_position="after_last_conv" if bn_in_conv else "before_first_fc",
        )
    except ConfigError as exc:
        raise FormatError(f"stored architecture is invalid: {exc}") from exc


def _check_rebuilt_shapes(network: Network) -> None:
    """Every stored tensor must agree with the shape plan of the stored config."""
    try:
        reference = build_network(network.config, seed=0)
    except ConfigError as exc:
        raise FormatError(f"stored architecture is invalid: {exc}") from exc
    stored = {name: arr.shape for name, arr in network.param_items()}
    expected = {name: arr.shape for name, arr in reference.param_items()}
    if stored != expected:
        bad = sorted(set(stored.items()) ^ set(expected.items()))
        raise FormatError(f"stored tensor shapes do not fit the architecture: {bad[:4]}")


def load_model(path: str) -> Network:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read model file {path!r}: {exc}") from exc
    return deserialize(data)
