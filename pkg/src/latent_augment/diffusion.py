"""Class-conditional latent DDIM.

Conventions: ``beta[t-1]`` is the per-step variance of step ``t`` (1-based) and
``alpha_bar[t] = prod_{s<=t} (1 - beta_s)`` with ``alpha_bar[0] = 1``. Every DDIM
formula here is written in terms of ``alpha_bar``.

The predictor works on standardized features; ``sample_features`` maps samples
back to the encoder's scale with the statistics stored on the predictor.
"""
from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels, modelio
from .datasets import ENCODED, GENERATED, FeatureDataset
from .encoder import TrainReport
from .errors import ArtifactError, ConfigError, FormatError, NumericError, ShapeError
from .nn import AdamState, Mlp, adam_step, mse_loss
from .rng import Rng


# --------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float
    kind: str = "linear"

    @property
    def hash(self) -> str:
        key = f"{self.kind}:{self.T}:{self.beta_start!r}:{self.beta_end!r}"
        return hashlib.sha256(key.encode()).hexdigest()


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar, float(beta_start), float(beta_end), kind)


def _check_step(sched: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"diffusion step outside 1..{sched.T}")
    return t


def forward_perturb(sched: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``. ``t`` may be scalar or one step per row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {z0.shape} vs eps {eps.shape}")
    t = _check_step(sched, t)
    ab = sched.alpha_bar[t]
    if ab.ndim == 1 and z0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_sigma(sched: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev))


def ddpm_posterior_std(sched: NoiseSchedule, t: int) -> float:
    """Std of ``q(z_{t-1} | z_t, z_0)`` for the Markov chain."""
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    return float(np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * sched.beta[t - 1]))


# -------------------------------------------------------------- predictor

def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, ``[sin(t w_i), cos(t w_i)]`` with geometric frequencies."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb


@dataclass
class NoisePredictor:
    """``eps_theta(z_t, t, y)``: an MLP on ``concat(z_t, time_emb(t), class_table[y])``."""

    core: Mlp
    class_table: np.ndarray  # (K, class_dim), learned
    time_dim: int
    mean: np.ndarray  # feature standardization
    std: np.ndarray
    schedule_hash: str = ""
    fingerprint: str | None = None

    def __post_init__(self):
        self.class_table = np.ascontiguousarray(self.class_table, dtype=np.float64)
        c = self.mean.shape[0]
        if self.core.dims[0] != c + self.time_dim + self.class_table.shape[1]:
            raise ShapeError("core input dim must be latent + time_dim + class_dim")
        if self.core.dims[-1] != c or self.std.shape[0] != c:
            raise ShapeError("core output dim must equal latent dim")

    @classmethod
    def init(cls, latent_dim: int, num_classes: int, hidden: Sequence[int], time_dim: int, class_dim: int,
             rng: np.random.Generator, mean=None, std=None, activation: str = "silu") -> "NoisePredictor":
        core = Mlp.init([latent_dim + time_dim + class_dim, *hidden, latent_dim], rng, activation)
        table = rng.standard_normal((num_classes, class_dim))
        mean = np.zeros(latent_dim) if mean is None else np.asarray(mean, dtype=np.float64)
        std = np.ones(latent_dim) if std is None else np.asarray(std, dtype=np.float64)
        return cls(core, table, time_dim, mean, std)

    @property
    def latent_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_table.shape[0]

    def params(self) -> list[np.ndarray]:
        return self.core.params() + [self.class_table]

    def copy(self) -> "NoisePredictor":
        return NoisePredictor(self.core.copy(), self.class_table.copy(), self.time_dim, self.mean.copy(),
                              self.std.copy(), self.schedule_hash, self.fingerprint)

    def _inputs(self, z_t, t, y) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        n = z_t.shape[0]
        if z_t.ndim != 2 or z_t.shape[1] != self.latent_dim:
            raise ShapeError(f"expected (n, {self.latent_dim}) noisy features, got {z_t.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
        if n and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("class label out of range")
        return np.hstack([z_t, timestep_embedding(t, self.time_dim), self.class_table[y]])

    def __call__(self, z_t, t, y) -> np.ndarray:
        return self.core.forward(self._inputs(z_t, t, y))

    def loss_and_grads(self, z_t, t, y, eps) -> tuple[float, list[np.ndarray]]:
        """Denoising loss ``mean ||eps - eps_theta||^2`` and grads for ``params()``."""
        x = self._inputs(z_t, t, y)
        out, cache = self.core.forward_cached(x)
        loss, dout = mse_loss(out, eps)
        grads, dx = self.core.backward(cache, dout)
        dtable = np.zeros_like(self.class_table)
        start = self.latent_dim + self.time_dim
        np.add.at(dtable, np.broadcast_to(np.asarray(y, dtype=np.int64), (x.shape[0],)), dx[:, start:])
        return loss, grads + [dtable]

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class DiffusionConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    time_dim: int = 32
    class_dim: int = 16
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 128


def feature_stats(ds: FeatureDataset) -> tuple[np.ndarray, np.ndarray]:
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    # constant dimensions are left unscaled
    std = np.where(std > 1e-8, std, 1.0)
    return mean, std


def train_ldm(encoded: FeatureDataset, sched: NoiseSchedule, cfg: DiffusionConfig,
              rng: Rng) -> tuple[NoisePredictor, TrainReport]:
    """Fit the class-conditional noise predictor with fresh ``(t, eps)`` per sample per step."""
    if len(encoded) == 0:
        raise ConfigError("cannot train a diffusion model on an empty dataset")
    if np.any(encoded.provenance != ENCODED):
        raise ConfigError("diffusion trains on encoded records only")
    t0 = time.perf_counter()
    mean, std = feature_stats(encoded)
    pred = NoisePredictor.init(encoded.dim, encoded.num_classes, cfg.hidden, cfg.time_dim, cfg.class_dim,
                               rng.generator("init"), mean, std)
    pred.schedule_hash = sched.hash
    z0_all = pred.standardize(encoded.features)
    params = pred.params()
    state = AdamState.for_params(params, cfg.lr)
    shuffle = rng.generator("shuffle")
    noise = rng.generator("noise")
    report = TrainReport(epochs=cfg.epochs, seed=rng.seed)
    n = len(encoded)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            t = noise.integers(1, sched.T + 1, size=idx.shape[0])
            eps = noise.standard_normal((idx.shape[0], encoded.dim))
            z_t = forward_perturb(sched, z0_all[idx], t, eps)
            loss, grads = pred.loss_and_grads(z_t, t, encoded.labels[idx], eps)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite diffusion loss at epoch {epoch}")
            adam_step(params, grads, state)
            total += loss * idx.shape[0]
        report.losses.append(total / n)
    report.wall_time = time.perf_counter() - t0
    return pred, report


def denoising_mse(pred: NoisePredictor, sched: NoiseSchedule, ds: FeatureDataset,
                  gen: np.random.Generator, draws: int = 4) -> float:
    """Monte Carlo estimate of the training objective on ``ds`` (in standardized space)."""
    z0 = np.repeat(pred.standardize(ds.features), draws, axis=0)
    y = np.repeat(ds.labels, draws)
    t = gen.integers(1, sched.T + 1, size=z0.shape[0])
    eps = gen.standard_normal(z0.shape)
    out = pred(forward_perturb(sched, z0, t, eps), t, y)
    return float(np.mean((out - eps) ** 2))


# ---------------------------------------------------------------- sampler

@dataclass(frozen=True)
class SamplerSpec:
    steps: tuple[int, ...]  # increasing reverse subsequence, last == T
    eta: float = 0.0
    seed: int = 0

    @classmethod
    def uniform(cls, T: int, num_steps: int, eta: float = 0.0, seed: int = 0) -> "SamplerSpec":
        if num_steps < 1:
            raise ConfigError("need at least one reverse step")
        num_steps = min(num_steps, T)
        steps = np.unique(np.round(np.linspace(T / num_steps, T, num_steps)).astype(np.int64))
        return cls(tuple(int(s) for s in steps), eta, seed)

    def validate(self, sched: NoiseSchedule) -> None:
        s = self.steps
        if not s or s[-1] != sched.T or s[0] < 1 or any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"reverse steps must increase within 1..{sched.T} and end at T")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")


Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def ddim_step(sched: NoiseSchedule, pred: Predictor, z_t: np.ndarray, t: int, t_prev: int, y, eta: float = 0.0,
              noise: np.ndarray | np.random.Generator | None = None) -> np.ndarray:
    """One DDIM move from step ``t`` to ``t_prev`` (``t_prev = 0`` yields the clean estimate).

    ``pred`` is any callable ``(z_t, t, y) -> eps``. With ``eta > 0`` the fresh noise
    comes from ``noise`` (an array shaped like ``z_t`` or a generator).
    """
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    z_t = np.ascontiguousarray(z_t, dtype=np.float64)
    squeeze = z_t.ndim == 1
    if squeeze:
        z_t = z_t[None, :]
    n = z_t.shape[0]
    eps_hat = np.ascontiguousarray(pred(z_t, np.full(n, t), np.broadcast_to(np.asarray(y), (n,))),
                                   dtype=np.float64)
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    sigma = ddim_sigma(sched, t, t_prev, eta)
    dir_coef = np.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    if sigma > 0.0:
        if isinstance(noise, np.random.Generator):
            noise = noise.standard_normal(z_t.shape)
        elif noise is None:
            raise ValueError("eta > 0 needs noise or a generator")
        fresh = np.ascontiguousarray(np.reshape(noise, z_t.shape), dtype=np.float64)
    else:
        fresh = eps_hat
    out = kernels.ddim_update(z_t, eps_hat, float(np.sqrt(ab_t)), float(np.sqrt(1.0 - ab_t)),
                              float(np.sqrt(ab_prev)), float(dir_coef), float(sigma), fresh)
    return out[0] if squeeze else out


def sample_features(sched: NoiseSchedule, pred: NoisePredictor, spec: SamplerSpec, labels: Sequence[int],
                    chunk: int = 4096) -> FeatureDataset:
    """Generate one pseudo-feature per requested label.

    Sample ``i`` draws all of its randomness from its own substream keyed by
    ``(spec.seed, i)``, so results do not depend on chunking or ordering.
    """
    spec.validate(sched)
    if pred.schedule_hash and pred.schedule_hash != sched.hash:
        raise ArtifactError("predictor was trained under a different noise schedule")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    c = pred.latent_dim
    if labels.size == 0:
        return FeatureDataset.empty(c, pred.num_classes)
    if labels.min() < 0 or labels.max() >= pred.num_classes:
        raise ValueError("label out of range")
    path = list(reversed(spec.steps)) + [0]
    root = Rng(spec.seed)
    out = np.empty((labels.size, c))
    for lo in range(0, labels.size, chunk):
        hi = min(lo + chunk, labels.size)
        gens = [root.generator("ddim-sample", i) for i in range(lo, hi)]
        z = np.vstack([g.standard_normal(c) for g in gens])
        y = labels[lo:hi]
        for t, t_prev in zip(path[:-1], path[1:]):
            noise = None
            if spec.eta > 0 and ddim_sigma(sched, t, t_prev, spec.eta) > 0:
                noise = np.vstack([g.standard_normal(c) for g in gens])
            z = ddim_step(sched, pred, z, t, t_prev, y, spec.eta, noise)
        out[lo:hi] = pred.destandardize(z)
    if not np.all(np.isfinite(out)):
        raise NumericError("sampler produced non-finite features")
    return FeatureDataset(out, labels, np.full(labels.size, GENERATED, np.uint8), pred.num_classes)


# ------------------------------------------------------------ persistence

def predictor_bytes(pred: NoisePredictor) -> bytes:
    c = pred.latent_dim
    k, e = pred.class_table.shape
    sections = {
        b"KIND": b"predictor",
        b"TEMB": struct.pack("<I", pred.time_dim),
        b"CEMB": struct.pack("<II", k, e) + pred.class_table.astype("<f8").tobytes(),
        b"STDZ": struct.pack("<I", c) + pred.mean.astype("<f8").tobytes() + pred.std.astype("<f8").tobytes(),
        b"SCHH": pred.schedule_hash.encode("ascii"),
    }
    if pred.fingerprint is not None:
        sections[b"CFGH"] = pred.fingerprint.encode("ascii")
    return modelio.dumps(pred.core.layers, sections)


def save_predictor(pred: NoisePredictor, path: str | Path) -> None:
    Path(path).write_bytes(predictor_bytes(pred))


def load_predictor(path: str | Path, sched: NoiseSchedule | None = None) -> NoisePredictor:
    """Load a predictor; with ``sched`` given, its hash must match the stored one."""
    layers, sections = modelio.load(path)
    if modelio.require(sections, b"KIND") != b"predictor":
        raise FormatError(f"{path} is not a noise predictor model")
    try:
        (time_dim,) = struct.unpack("<I", modelio.require(sections, b"TEMB"))
        cemb = modelio.require(sections, b"CEMB")
        k, e = struct.unpack("<II", cemb[:8])
        table = np.frombuffer(cemb[8:], dtype="<f8").astype(np.float64).reshape(k, e)
        stdz = modelio.require(sections, b"STDZ")
        (c,) = struct.unpack("<I", stdz[:4])
        stats = np.frombuffer(stdz[4:], dtype="<f8").astype(np.float64).reshape(2, c)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"corrupt predictor sections: {exc}") from exc
    sched_hash = modelio.require(sections, b"SCHH").decode("ascii")
    if sched is not None and sched_hash != sched.hash:
        raise ArtifactError(f"{path}: noise schedule hash mismatch")
    fp = sections.get(b"CFGH")
    return NoisePredictor(Mlp(layers), table, time_dim, stats[0].copy(), stats[1].copy(), sched_hash,
                          fp.decode("ascii") if fp else None)
