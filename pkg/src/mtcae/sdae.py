"""Denoising-autoencoder pretraining for one feature channel.

Each channel gets two autoencoders trained greedily: the first on the
standardized channel features, the second on the first one's encoding of the
clean inputs. Their encoders later become the two lowest layers of the
channel's local classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn_core import (
    AdamState,
    DenseLayer,
    NumericError,
    ShapeError,
    adam_step,
    dense_backward,
    dense_forward,
    init_dense,
    l2_penalty,
)


N_STAGES = 2


@dataclass(frozen=True)
class CorruptionSpec:
    """Masking noise: zero exactly ``floor(rate * dim)`` entries per vector."""

    rate: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"corruption rate must be in [0, 1], got {self.rate}")


@dataclass
class SdaeConfig:
    hidden: int = 400
    epochs: int = 200
    lr: float = 3e-4
    batch_size: int = 64
    corruption: float = 0.2
    beta: float = 1e-4
    alpha: float = 1.0


@dataclass
class DenoisingAutoencoder:
    encoder: DenseLayer  # [hidden x in], elu
    decoder: DenseLayer  # [in x hidden], elu

    def __post_init__(self):
        if (self.encoder.in_dim != self.decoder.out_dim
                or self.encoder.out_dim != self.decoder.in_dim):
            raise ShapeError("encoder and decoder dimensions do not mirror each other")

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def hidden_dim(self) -> int:
        return self.encoder.out_dim

    def params(self) -> dict[str, np.ndarray]:
        return {
            "encoder.weight": self.encoder.weights,
            "encoder.bias": self.encoder.biases,
            "decoder.weight": self.decoder.weights,
            "decoder.bias": self.decoder.biases,
        }

    def copy(self) -> "DenoisingAutoencoder":
        def dup(layer):
            return DenseLayer(layer.weights.copy(), layer.biases.copy(),
                              layer.activation, layer.alpha)
        return DenoisingAutoencoder(dup(self.encoder), dup(self.decoder))


@dataclass
class PretrainedStack:
    channel_id: int
    stages: list[DenoisingAutoencoder]
    histories: list[list[float]] = field(default_factory=list)


def init_dae(in_dim: int, hidden: int, rng: np.random.Generator,
             alpha: float = 1.0) -> DenoisingAutoencoder:
    encoder = init_dense(in_dim, hidden, rng, "elu", alpha)
    decoder = init_dense(hidden, in_dim, rng, "elu", alpha)
    return DenoisingAutoencoder(encoder, decoder)


def corrupt(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero ``floor(rate * dim)`` distinct, uniformly chosen positions.

    ``x`` may be one vector or a batch; each row is masked independently.
    The input is never modified.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = x[None, :] if x.ndim == 1 else x
    dim = rows.shape[1]
    k = math.floor(spec.rate * dim)
    out = rows.copy()
    if k > 0:
        # argsort of iid uniforms is a uniform random permutation per row
        idx = np.argsort(rng.random(rows.shape), axis=1)[:, :k]
        np.put_along_axis(out, idx, 0.0, axis=1)
    return out[0] if x.ndim == 1 else out


def dae_forward(dae: DenoisingAutoencoder, x_corrupted: np.ndarray):
    """Return ``(hidden, reconstruction)``."""
    h = dense_forward(dae.encoder, x_corrupted)
    r = dense_forward(dae.decoder, h.post)
    single = np.asarray(x_corrupted).ndim == 1
    if single:
        return h.post[0], r.post[0]
    return h.post, r.post


def reconstruction_error(x_clean: np.ndarray, reconstruction: np.ndarray) -> float:
    """Mean over examples of the squared Euclidean distance."""
    x = np.atleast_2d(x_clean)
    r = np.atleast_2d(reconstruction)
    if x.shape != r.shape:
        raise ShapeError(f"clean {x.shape} vs reconstruction {r.shape}")
    d = x - r
    return float(np.einsum("ij,ij->", d, d) / x.shape[0])


def dae_loss(dae: DenoisingAutoencoder, x_clean: np.ndarray, reconstruction: np.ndarray,
             beta: float) -> float:
    return reconstruction_error(x_clean, reconstruction) + l2_penalty(
        [dae.encoder.weights, dae.decoder.weights], beta)


def dae_loss_and_grads(dae: DenoisingAutoencoder, x_clean: np.ndarray,
                       x_corrupted: np.ndarray, beta: float):
    """Loss on one batch and its gradients keyed like ``dae.params()``."""
    x_clean = np.atleast_2d(x_clean)
    h = dense_forward(dae.encoder, x_corrupted)
    r = dense_forward(dae.decoder, h.post)
    n = x_clean.shape[0]
    recon = reconstruction_error(x_clean, r.post)
    loss = recon + l2_penalty([dae.encoder.weights, dae.decoder.weights], beta)

    upstream = (2.0 / n) * (r.post - x_clean)
    dw2, db2, dh = dense_backward(dae.decoder, r, upstream)
    dw1, db1, _ = dense_backward(dae.encoder, h, dh, need_input_grad=False)
    if beta:
        dw1 += 2.0 * beta * dae.encoder.weights
        dw2 += 2.0 * beta * dae.decoder.weights
    grads = {
        "encoder.weight": dw1,
        "encoder.bias": db1,
        "decoder.weight": dw2,
        "decoder.bias": db2,
    }
    return loss, recon, grads


def train_dae(data: np.ndarray, config: SdaeConfig, rng: np.random.Generator):
    """Train one denoising autoencoder with mini-batch Adam.

    Corruption is redrawn for every batch of every epoch. Returns the trained
    autoencoder and the per-epoch mean reconstruction error (measured on the
    corrupted batches seen during that epoch).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-d array")
    dae = init_dae(data.shape[1], config.hidden, rng, config.alpha)
    spec = CorruptionSpec(config.corruption)
    state = AdamState()
    params = dae.params()
    n = data.shape[0]
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            noisy = corrupt(batch, spec, rng)
            loss, recon, grads = dae_loss_and_grads(dae, batch, noisy, config.beta)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite autoencoder loss at epoch {epoch}")
            adam_step(state, params, grads, config.lr)
            total += recon * batch.shape[0]
        history.append(total / n)
    return dae, history


def encode(dae: DenoisingAutoencoder, x_clean: np.ndarray) -> np.ndarray:
    """Encoder output on uncorrupted inputs."""
    return dense_forward(dae.encoder, x_clean).post


def pretrain_stack(data: np.ndarray, config: SdaeConfig, rng: np.random.Generator,
                   channel_id: int = 0) -> PretrainedStack:
    """Greedy layer-wise pretraining of the two autoencoders for one channel."""
    stages, histories = [], []
    current = np.asarray(data, dtype=np.float64)
    for _ in range(N_STAGES):
        dae, hist = train_dae(current, config, rng)
        stages.append(dae)
        histories.append(hist)
        current = encode(dae, current)
    return PretrainedStack(channel_id, stages, histories)


def channel_rng(seed: int, fold: int, channel: int) -> np.random.Generator:
    """Independent generator for one channel, identical in any worker."""
    return np.random.default_rng([seed, 0x5DAE, fold, channel])


def _pretrain_job(args):
    data, config, seed, fold, channel = args
    return pretrain_stack(data, config, channel_rng(seed, fold, channel), channel)


def pretrain_channels(channels: list[np.ndarray], config: SdaeConfig, seed: int,
                      fold: int = 0, workers: int = 1) -> list[PretrainedStack]:
    """Pretrain every channel; ``workers > 1`` runs channels in worker processes.

    Results do not depend on ``workers``: each channel draws from its own
    generator keyed by ``(seed, fold, channel)``.
    """
    jobs = [(x, config, seed, fold, i) for i, x in enumerate(channels)]
    if workers <= 1 or len(jobs) <= 1:
        return [_pretrain_job(j) for j in jobs]
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(_pretrain_job, jobs))
