"""Stage 3: retrain the classification head on encoded + generated features."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .datasets import GENERATED, FeatureDataset
from .encoder import EncoderNet, TrainReport
from .errors import ConfigError, NumericError, ShapeError
from .nn import AdamState, adam_step, softmax_cross_entropy
from .rng import Rng


@dataclass
class FinetuneConfig:
    gamma: float = 0.05
    lr: float = 5e-4
    epochs: int = 100
    batch_size: int = 128

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ConfigError("gamma must be >= 0")


def loss_ft(logits_enc, labels_enc, logits_gen, labels_gen, gamma: float) -> float:
    """Mean CE over encoded features plus ``gamma`` times mean CE over generated ones."""
    if gamma < 0:
        raise ConfigError("gamma must be >= 0")
    loss = 0.0
    if len(labels_enc):
        loss, _ = softmax_cross_entropy(logits_enc, labels_enc)
    if len(labels_gen):
        gen, _ = softmax_cross_entropy(logits_gen, labels_gen)
        loss += gamma * gen
    return loss


def _batch_weights(n_enc: int, n_gen: int, gamma: float) -> np.ndarray:
    w = np.empty(n_enc + n_gen)
    w[:n_enc] = 1.0 / n_enc if n_enc else 0.0
    w[n_enc:] = gamma / n_gen if n_gen else 0.0
    return w


def finetune_head(net: EncoderNet, mixed: FeatureDataset, cfg: FinetuneConfig,
                  rng: Rng) -> tuple[EncoderNet, TrainReport]:
    """Minimize ``L_FT`` over the head only; the trunk is copied untouched.

    Every minibatch holds a slice of the encoded records and a slice of the
    generated ones. Encoded rows weigh ``1/n_enc`` and generated rows
    ``gamma/n_gen`` within the batch, so each batch loss is an unbiased
    estimate of ``L_FT``. The encoded order and batch boundaries depend only on
    the encoded records, which makes a ``gamma = 0`` run follow the same
    trajectory as a run without generated features.
    """
    if mixed.dim != net.latent_dim:
        raise ShapeError(f"features have dim {mixed.dim}, head expects {net.latent_dim}")
    if mixed.num_classes != net.num_classes:
        raise ShapeError("dataset and classifier disagree on K")
    if cfg.gamma < 0:
        raise ConfigError("gamma must be >= 0")
    t0 = time.perf_counter()
    out = net.copy()
    params = out.head.params()
    state = AdamState.for_params(params, cfg.lr)
    is_gen = mixed.provenance == GENERATED
    enc_idx = np.flatnonzero(~is_gen)
    gen_idx = np.flatnonzero(is_gen)
    enc_shuffle = rng.generator("encoded")
    gen_shuffle = rng.generator("generated")
    n_ref = enc_idx.size or gen_idx.size
    n_batches = max(1, -(-n_ref // cfg.batch_size))
    report = TrainReport(epochs=cfg.epochs, seed=rng.seed)
    x, y = mixed.features, mixed.labels
    for epoch in range(cfg.epochs):
        enc_order = enc_idx[enc_shuffle.permutation(enc_idx.size)]
        gen_order = gen_idx[gen_shuffle.permutation(gen_idx.size)]
        enc_parts = np.array_split(enc_order, n_batches)
        gen_parts = np.array_split(gen_order, n_batches)
        total = 0.0
        for e_part, g_part in zip(enc_parts, gen_parts):
            idx = np.concatenate([e_part, g_part])
            if idx.size == 0:
                continue
            logits, cache = out.head.forward_cached(x[idx])
            loss, dlogits = softmax_cross_entropy(logits, y[idx], _batch_weights(e_part.size, g_part.size, cfg.gamma))
            if not np.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at epoch {epoch}")
            grads, _ = out.head.backward(cache, dlogits)
            adam_step(params, grads, state)
            total += loss
        report.losses.append(total / n_batches)
    report.wall_time = time.perf_counter() - t0
    return out, report
