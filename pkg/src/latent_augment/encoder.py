"""Stage 1: train ``f = G(E(x))`` with cross entropy, then encode the training set."""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import modelio
from .datasets import ENCODED, RAW, FeatureDataset
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .nn import AdamState, Mlp, adam_step, softmax, softmax_cross_entropy
from .rng import Rng


@dataclass
class EncoderNet:
    trunk: Mlp  # E: raw dim -> latent dim
    head: Mlp  # G: latent dim -> K logits
    fingerprint: str | None = None

    def __post_init__(self):
        if self.trunk.dims[-1] != self.head.dims[0]:
            raise ShapeError("trunk output dim must equal head input dim")

    @classmethod
    def init(cls, in_dim: int, hidden: list[int], latent_dim: int, num_classes: int, rng: np.random.Generator,
             activation: str = "relu", latent_activation: str = "identity") -> "EncoderNet":
        trunk = Mlp.init([in_dim, *hidden, latent_dim], rng, activation, latent_activation)
        head = Mlp.init([latent_dim, num_classes], rng, "identity", "identity")
        return cls(trunk, head)

    @property
    def in_dim(self) -> int:
        return self.trunk.dims[0]

    @property
    def latent_dim(self) -> int:
        return self.head.dims[0]

    @property
    def num_classes(self) -> int:
        return self.head.dims[-1]

    def copy(self) -> "EncoderNet":
        return EncoderNet(self.trunk.copy(), self.head.copy(), self.fingerprint)

    def logits(self, batch: np.ndarray) -> np.ndarray:
        return self.head.forward(self.trunk.forward(batch))


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    final_accuracy: float | None = None
    epochs: int = 0
    seed: int = 0
    wall_time: float = 0.0

    def to_json(self) -> dict:
        # wall time stays out so persisted reports are byte-stable
        return {"epochs": self.epochs, "seed": self.seed, "losses": self.losses,
                "final_accuracy": self.final_accuracy}


@dataclass
class Stage1Config:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    latent_dim: int = 16
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 128
    dropout: float = 0.0


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss in {where}")


def train_stage1(raw: FeatureDataset, cfg: Stage1Config, rng: Rng) -> tuple[EncoderNet, TrainReport]:
    if len(raw) == 0 or np.any(raw.class_counts() == 0):
        raise ConfigError("every class needs at least one training sample")
    if np.any(raw.provenance != RAW):
        raise ConfigError("stage 1 trains on raw records only")
    t0 = time.perf_counter()
    net = EncoderNet.init(raw.dim, list(cfg.hidden), cfg.latent_dim, raw.num_classes, rng.generator("init"))
    params = net.trunk.params() + net.head.params()
    state = AdamState.for_params(params, cfg.lr)
    shuffle = rng.generator("shuffle")
    drop_rng = rng.generator("dropout")
    report = TrainReport(epochs=cfg.epochs, seed=rng.seed)
    n = len(raw)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            z, tcache = net.trunk.forward_cached(raw.features[idx], cfg.dropout, drop_rng)
            logits, hcache = net.head.forward_cached(z)
            loss, dlogits = softmax_cross_entropy(logits, raw.labels[idx])
            _check_finite(loss, f"stage 1 epoch {epoch}")
            hgrads, dz = net.head.backward(hcache, dlogits)
            tgrads, _ = net.trunk.backward(tcache, dz)
            adam_step(params, tgrads + hgrads, state)
            total += loss * len(idx)
        report.losses.append(total / n)
    pred, _ = classify(net, raw.features)
    report.final_accuracy = float(np.mean(pred == raw.labels))
    report.wall_time = time.perf_counter() - t0
    return net, report


def encode_dataset(net: EncoderNet, raw: FeatureDataset) -> FeatureDataset:
    if raw.dim != net.in_dim:
        raise ShapeError(f"dataset dim {raw.dim} != encoder input dim {net.in_dim}")
    z = net.trunk.forward(raw.features)
    return FeatureDataset(z, raw.labels.copy(), np.full(len(raw), ENCODED, np.uint8), raw.num_classes)


def classify(net: EncoderNet, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels and softmax scores of ``G(E(x))``."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        raise ShapeError(f"expected (n, {net.in_dim}) batch, got {batch.shape}")
    scores = softmax(net.logits(batch))
    return scores.argmax(axis=1), scores


# ------------------------------------------------------------ persistence

def encoder_bytes(net: EncoderNet) -> bytes:
    sections = {b"KIND": b"encoder", b"SPLT": struct.pack("<H", len(net.trunk.layers))}
    if net.fingerprint is not None:
        sections[b"CFGH"] = net.fingerprint.encode("ascii")
    return modelio.dumps(net.trunk.layers + net.head.layers, sections)


def save_encoder(net: EncoderNet, path: str | Path) -> None:
    Path(path).write_bytes(encoder_bytes(net))


def load_encoder(path: str | Path) -> EncoderNet:
    layers, sections = modelio.load(path)
    if modelio.require(sections, b"KIND") != b"encoder":
        raise FormatError(f"{path} is not an encoder model")
    (split,) = struct.unpack("<H", modelio.require(sections, b"SPLT"))
    if not 0 < split < len(layers):
        raise FormatError("bad trunk/head split")
    fp = sections.get(b"CFGH")
    return EncoderNet(Mlp(layers[:split]), Mlp(layers[split:]), fp.decode("ascii") if fp else None)
