"""Multi-channel autoencoder classifier.

One local classifier per feature channel (two pretrained layers, a
bottleneck, a hidden layer and a softmax output) plus a global classifier
fed by the concatenated bottleneck activations. All parameters live in one
flat float64 buffer; every layer's weights and biases are views into it, so
the optimizer, gradient checks and checkpoints can treat the model as a
single vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import unweighted_accuracy
from .nn_core import (
    AdamState,
    DenseLayer,
    LayerCache,
    NumericError,
    ShapeError,
    adam_step,
    batch_cross_entropy,
    dense_backward,
    dense_forward,
    glorot_init,
)

LOCAL_LAYERS = ("layer1", "layer2", "bottleneck", "hidden", "output")
GLOBAL_LAYERS = ("hidden", "output")


class ConfigError(ValueError):
    """Raised when model pieces do not fit together."""


@dataclass(frozen=True)
class Architecture:
    channel_dims: tuple[int, ...]
    layer1: int = 400
    layer2: int = 400
    bottleneck: int = 30
    local_hidden: int = 100
    global_hidden: int = 1000
    n_classes: int = 4
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channel_dims", tuple(int(d) for d in self.channel_dims))
        if not self.channel_dims:
            raise ConfigError("a model needs at least one channel")
        widths = (self.layer1, self.layer2, self.bottleneck, self.local_hidden,
                  self.global_hidden, self.n_classes, *self.channel_dims)
        if min(widths) < 1:
            raise ConfigError("all layer widths and channel dims must be >= 1")

    @property
    def n_channels(self) -> int:
        return len(self.channel_dims)

    def local_shapes(self, d_in: int):
        widths = (d_in, self.layer1, self.layer2, self.bottleneck, self.local_hidden,
                  self.n_classes)
        return [(widths[k + 1], widths[k]) for k in range(len(LOCAL_LAYERS))]

    def global_shapes(self):
        concat = self.n_channels * self.bottleneck
        return [(self.global_hidden, concat), (self.n_classes, self.global_hidden)]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter blocks in storage (and checkpoint) order."""
        blocks = []
        for i, d in enumerate(self.channel_dims):
            for name, (out, inp) in zip(LOCAL_LAYERS, self.local_shapes(d)):
                blocks.append((f"local{i:02d}.{name}.weight", (out, inp)))
                blocks.append((f"local{i:02d}.{name}.bias", (out,)))
        for name, (out, inp) in zip(GLOBAL_LAYERS, self.global_shapes()):
            blocks.append((f"global.{name}.weight", (out, inp)))
            blocks.append((f"global.{name}.bias", (out,)))
        return blocks

    @property
    def n_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


def block_views(arch: Architecture, flat: np.ndarray) -> dict[str, np.ndarray]:
    views, offset = {}, 0
    for name, shape in arch.layout():
        size = math.prod(shape)
        views[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return views


@dataclass
class LocalClassifier:
    layer1: DenseLayer
    layer2: DenseLayer
    bottleneck: DenseLayer
    hidden: DenseLayer
    output: DenseLayer

    @property
    def layers(self) -> tuple[DenseLayer, ...]:
        return (self.layer1, self.layer2, self.bottleneck, self.hidden, self.output)


@dataclass
class GlobalClassifier:
    hidden: DenseLayer
    output: DenseLayer

    @property
    def layers(self) -> tuple[DenseLayer, ...]:
        return (self.hidden, self.output)


class MtcAeModel:
    """All local classifiers and the global classifier over one parameter buffer."""

    def __init__(self, arch: Architecture, params: np.ndarray | None = None):
        self.arch = arch
        if params is None:
            params = np.zeros(arch.n_params)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ShapeError(f"expected {arch.n_params} parameters, got {params.shape}")
        self.params = params
        self.blocks = block_views(arch, params)
        self.locals = [self._local(i) for i in range(arch.n_channels)]
        self.global_clf = GlobalClassifier(
            self._layer("global.hidden", "elu"), self._layer("global.output", "softmax"))

    def _layer(self, prefix: str, activation: str) -> DenseLayer:
        return DenseLayer(self.blocks[prefix + ".weight"], self.blocks[prefix + ".bias"],
                          activation, self.arch.alpha)

    def _local(self, i: int) -> LocalClassifier:
        acts = ("elu", "elu", "elu", "elu", "softmax")
        return LocalClassifier(*(self._layer(f"local{i:02d}.{name}", act)
                                 for name, act in zip(LOCAL_LAYERS, acts)))

    @property
    def n_channels(self) -> int:
        return self.arch.n_channels

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def copy(self) -> "MtcAeModel":
        return MtcAeModel(self.arch, self.params.copy())

    def grad_views(self, flat_grad: np.ndarray) -> dict[str, np.ndarray]:
        return block_views(self.arch, flat_grad)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    bottleneck: int = 30
    local_hidden: int = 100
    global_hidden: int = 1000
    epochs: int = 1000
    lr: float = 3e-4
    batch_size: int = 64
    lam: float = 0.1
    gamma: float = 0.95
    local_mean: bool = False
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")


def build_model(manifest, stacks, config: TrainConfig, rng: np.random.Generator,
                sdae_hidden: int = 400, alpha: float = 1.0) -> MtcAeModel:
    """Assemble a model, copying pretrained encoders into layer1/layer2.

    ``manifest`` is a ChannelManifest or a plain sequence of channel widths.
    With ``stacks=None`` every layer is Glorot-initialized (no pretraining).
    """
    dims = tuple(manifest.widths) if hasattr(manifest, "widths") else tuple(manifest)
    if stacks is not None:
        if len(stacks) != len(dims):
            raise ConfigError(f"{len(stacks)} pretrained stacks for {len(dims)} channels")
        h1 = stacks[0].stages[0].hidden_dim
        h2 = stacks[0].stages[1].hidden_dim
    else:
        h1 = h2 = sdae_hidden
    arch = Architecture(dims, h1, h2, config.bottleneck, config.local_hidden,
                        config.global_hidden, 4, alpha)
    model = MtcAeModel(arch)
    for name, view in model.blocks.items():
        if name.endswith(".weight"):
            view[...] = glorot_init(view.shape[1], view.shape[0], rng)
    if stacks is not None:
        for i, (local, stack) in enumerate(zip(model.locals, stacks)):
            if len(stack.stages) != 2:
                raise ConfigError(f"channel {i}: expected 2 pretrained stages")
            for layer, dae in zip((local.layer1, local.layer2), stack.stages):
                enc = dae.encoder
                if enc.weights.shape != layer.weights.shape:
                    raise ConfigError(
                        f"channel {i}: encoder {enc.weights.shape} does not fit "
                        f"layer {layer.weights.shape}")
                layer.weights[...] = enc.weights
                layer.biases[...] = enc.biases
    return model


# ---------------------------------------------------------------------------
# Forward / loss / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    local_caches: list[list[LayerCache]]
    global_caches: list[LayerCache]
    bottleneck: np.ndarray  # [batch x N*B], post-activation
    local_probs: list[np.ndarray]
    global_probs: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.global_probs.shape[0]


def _check_batch(model: MtcAeModel, batch: Sequence[np.ndarray]):
    if len(batch) != model.n_channels:
        raise ShapeError(f"got {len(batch)} channel inputs, model has {model.n_channels}")
    rows = {np.shape(x)[0] for x in batch}
    if len(rows) != 1:
        raise ShapeError("channel inputs disagree on batch size")
    for i, (x, d) in enumerate(zip(batch, model.arch.channel_dims)):
        if np.ndim(x) != 2 or np.shape(x)[1] != d:
            raise ShapeError(f"channel {i}: expected [batch x {d}], got {np.shape(x)}")


def forward(model: MtcAeModel, batch: Sequence[np.ndarray]) -> ForwardCache:
    _check_batch(model, batch)
    local_caches, local_probs, bottlenecks = [], [], []
    for local, x in zip(model.locals, batch):
        caches = []
        h = x
        for layer in local.layers:
            c = dense_forward(layer, h)
            caches.append(c)
            h = c.post
        local_caches.append(caches)
        local_probs.append(caches[-1].post)
        bottlenecks.append(caches[2].post)
    concat = np.concatenate(bottlenecks, axis=1)
    g_hidden = dense_forward(model.global_clf.hidden, concat)
    g_out = dense_forward(model.global_clf.output, g_hidden.post)
    return ForwardCache(local_caches, [g_hidden, g_out], concat, local_probs, g_out.post)


def loss_terms(cache: ForwardCache, labels: np.ndarray) -> tuple[float, list[float]]:
    """Batch-mean cross-entropy of the global classifier and of each local one."""
    labels = np.asarray(labels)
    return (batch_cross_entropy(cache.global_probs, labels),
            [batch_cross_entropy(p, labels) for p in cache.local_probs])


def joint_loss(cache: ForwardCache, labels: np.ndarray, lam: float) -> float:
    """``lam * CE_global + (1 - lam) * sum_i CE_local_i``."""
    ce_global, ce_locals = loss_terms(cache, labels)
    return lam * ce_global + (1.0 - lam) * sum(ce_locals)


def _onehot_delta(probs: np.ndarray, labels: np.ndarray, scale: float) -> np.ndarray:
    delta = probs.copy()
    delta[np.arange(len(labels)), labels] -= 1.0
    delta *= scale
    return delta


def backward(model: MtcAeModel, cache: ForwardCache, labels: np.ndarray, lam: float,
             out: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``joint_loss`` as a flat array laid out like ``model.params``.

    Paths with zero weight are skipped, so their gradients are exactly zero.
    """
    labels = np.asarray(labels)
    n = cache.batch_size
    if out is None:
        out = np.zeros(model.arch.n_params)
    g = model.grad_views(out)
    B = model.arch.bottleneck

    def run(layer, layer_cache, up, name, need_input_grad=True):
        return dense_backward(layer, layer_cache, up, need_input_grad,
                              g[name + ".weight"], g[name + ".bias"])[2]

    def clear(*names):
        for name in names:
            g[name + ".weight"][...] = 0.0
            g[name + ".bias"][...] = 0.0

    d_concat = None
    if lam != 0.0:
        gl = model.global_clf
        delta = _onehot_delta(cache.global_probs, labels, lam / n)
        dh = run(gl.output, cache.global_caches[1], delta, "global.output")
        d_concat = run(gl.hidden, cache.global_caches[0], dh, "global.hidden")
    else:
        clear("global.output", "global.hidden")

    local_scale = (1.0 - lam) / n
    for i, (local, caches) in enumerate(zip(model.locals, cache.local_caches)):
        prefix = f"local{i:02d}."
        d_bottleneck = None
        if local_scale != 0.0:
            delta = _onehot_delta(caches[4].post, labels, local_scale)
            dh = run(local.output, caches[4], delta, prefix + "output")
            d_bottleneck = run(local.hidden, caches[3], dh, prefix + "hidden")
        else:
            clear(prefix + "output", prefix + "hidden")
        if d_concat is not None:
            from_global = d_concat[:, i * B:(i + 1) * B]
            d_bottleneck = from_global if d_bottleneck is None else d_bottleneck + from_global
        up = d_bottleneck
        for k, name in ((2, "bottleneck"), (1, "layer2"), (0, "layer1")):
            up = run(local.layers[k], caches[k], up, prefix + name, need_input_grad=k > 0)
    return out


def add_weight_decay(model: MtcAeModel, grad: np.ndarray, weight_decay: float) -> float:
    """Add ``weight_decay * sum ||W||^2`` gradients in place; return the penalty."""
    if weight_decay == 0.0:
        return 0.0
    g = model.grad_views(grad)
    penalty = 0.0
    for name, w in model.blocks.items():
        if name.endswith(".weight"):
            penalty += float(np.vdot(w, w))
            g[name] += 2.0 * weight_decay * w
    return weight_decay * penalty


# ---------------------------------------------------------------------------
# Fusion and prediction
# ---------------------------------------------------------------------------


def fuse(cache: ForwardCache, gamma: float, local_mean: bool = False) -> np.ndarray:
    """``gamma * q_global + (1 - gamma) * sum_i q_local_i`` (not renormalized).

    ``local_mean=True`` divides the local sum by the number of channels.
    """
    local_sum = np.sum(cache.local_probs, axis=0)
    if local_mean:
        local_sum = local_sum / len(cache.local_probs)
    return gamma * cache.global_probs + (1.0 - gamma) * local_sum


def predict_scores(model: MtcAeModel, batch: Sequence[np.ndarray], gamma: float,
                   local_mean: bool = False, chunk: int = 1024) -> np.ndarray:
    n = np.shape(batch[0])[0]
    parts = []
    for start in range(0, n, chunk):
        cache = forward(model, [x[start:start + chunk] for x in batch])
        parts.append(fuse(cache, gamma, local_mean))
    if not parts:
        return np.zeros((0, model.n_classes))
    return np.concatenate(parts, axis=0)


def predict(model: MtcAeModel, batch: Sequence[np.ndarray], gamma: float,
            local_mean: bool = False) -> np.ndarray:
    """Argmax of the fused scores; ties go to the lowest class index."""
    return np.argmax(predict_scores(model, batch, gamma, local_mean), axis=1)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class Split:
    channels: list[np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Split":
        return Split([x[idx] for x in self.channels], self.labels[idx])


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_ua: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_ua: float | None = None

    def to_dict(self) -> dict:
        return {"loss": self.loss, "val_ua": self.val_ua,
                "best_epoch": self.best_epoch, "best_val_ua": self.best_val_ua}


def train(model: MtcAeModel, train_set: Split, val_set: Split | None,
          config: TrainConfig, rng: np.random.Generator | None = None):
    """Joint fine-tuning with mini-batch Adam and validation-based selection.

    Returns ``(best_model, history)``. The snapshot with the highest fused
    validation UA wins (earliest epoch on ties); without a validation set
    the final parameters are returned. ``model`` itself is trained in place.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    state = AdamState()
    # one flat block: the optimizer runs a single fused pass over all parameters
    params = {"all": model.params}
    grad = np.zeros(model.arch.n_params)
    grads = {"all": grad}
    history = TrainHistory()
    best = model.copy()
    n = len(train_set)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = train_set.take(order[start:start + config.batch_size])
            cache = forward(model, batch.channels)
            loss = joint_loss(cache, batch.labels, config.lam)
            backward(model, cache, batch.labels, config.lam, out=grad)
            loss += add_weight_decay(model, grad, config.weight_decay)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite joint loss at epoch {epoch}, batch {b}")
            try:
                adam_step(state, params, grads, config.lr)
            except NumericError:
                bad = [k for k, v in model.grad_views(grad).items() if not np.isfinite(v).all()]
                raise NumericError(f"non-finite gradient in {bad[0]!r} at epoch {epoch}, "
                                   f"batch {b}") from None
            total += loss * len(batch)
        history.loss.append(total / n)

        if val_set is not None and len(val_set):
            pred = predict(model, val_set.channels, config.gamma, config.local_mean)
            ua = unweighted_accuracy(pred, val_set.labels, model.n_classes)
            history.val_ua.append(ua)
            if history.best_val_ua is None or ua > history.best_val_ua:
                history.best_val_ua = ua
                history.best_epoch = epoch
                best.params[...] = model.params
    if val_set is None or not len(val_set):
        best.params[...] = model.params
        history.best_epoch = config.epochs - 1 if config.epochs else None
    return best, history
