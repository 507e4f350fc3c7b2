"""Run configuration: one JSON document with a section per pipeline stage."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augmentation import MODES, TARGETS, AugmentPolicy
from .diffusion import DiffusionConfig, SamplerSpec, make_schedule
from .encoder import Stage1Config
from .errors import ConfigError
from .finetune import FinetuneConfig


@dataclass
class DatasetSection:
    num_classes: int = 10
    dim: int = 16
    n_max: int = 500
    imbalance: float = 100.0
    sigma: float = 1.0
    mean_radius: float = 3.0
    test_per_class: int = 100


@dataclass
class EncoderSection:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    latent_dim: int = 16
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 128
    dropout: float = 0.0


@dataclass
class DiffusionSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    time_dim: int = 32
    class_dim: int = 16
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 128
    reverse_steps: int = 500
    eta: float = 1.0


@dataclass
class AugmentSection:
    target: str | list[int] = "few"
    ratio: float = 0.2
    mode: str = "proportional"


@dataclass
class FinetuneSection:
    gamma: float = 0.05
    lr: float = 5e-4
    epochs: int = 100
    batch_size: int = 128


@dataclass
class EvalSection:
    grouping: str = "thresholds"
    low: float = 20
    high: float = 100


_SECTIONS = {
    "dataset": DatasetSection,
    "encoder": EncoderSection,
    "diffusion": DiffusionSection,
    "augment": AugmentSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
}

# config sections each artifact depends on; eval grouping decides augmentation targets
SCOPES = {
    "data": ("seed", "dataset"),
    "encoder": ("seed", "dataset", "encoder"),
    "diffusion": ("seed", "dataset", "encoder", "diffusion"),
    "generate": ("seed", "dataset", "encoder", "diffusion", "augment", "eval"),
    "finetune": ("seed", "dataset", "encoder", "diffusion", "augment", "eval", "finetune"),
}


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---------------------------------------------------------- (de)serialize

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - {"seed", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "seed" in data:
            kwargs["seed"] = data["seed"]
        for name, section_cls in _SECTIONS.items():
            body = data.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(section_cls)}
            extra = set(body) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            kwargs[name] = section_cls(**body)
        cfg = cls(**kwargs)
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"config value of the wrong type: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["seed"] = seed
        return ExperimentConfig.from_dict(data)

    def updated(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields replaced, e.g. ``updated(augment={"ratio": 0})``."""
        data = self.to_dict()
        for name, changes in sections.items():
            if name == "seed":
                data["seed"] = changes
            else:
                data[name].update(changes)
        return ExperimentConfig.from_dict(data)

    def fingerprint(self, scope: str | None = None) -> str:
        data = self.to_dict()
        if scope is not None:
            if scope not in SCOPES:
                raise ValueError(f"unknown scope {scope!r}")
            data = {k: data[k] for k in SCOPES[scope]}
        return hashlib.sha256(_canonical(data)).hexdigest()

    # -------------------------------------------------------------- checks

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        d = self.dataset
        need(d.num_classes >= 2, "dataset.num_classes must be >= 2")
        need(d.dim >= 1 and d.n_max >= 1 and d.test_per_class >= 1, "dataset sizes must be positive")
        need(d.imbalance >= 1, "dataset.imbalance must be >= 1")
        need(d.sigma > 0 and d.mean_radius > 0, "dataset.sigma and mean_radius must be positive")
        e = self.encoder
        need(e.latent_dim >= 1 and all(h >= 1 for h in e.hidden), "encoder dims must be positive")
        need(e.lr > 0 and e.epochs >= 0 and e.batch_size >= 1, "encoder lr/epochs/batch_size out of range")
        need(0 <= e.dropout < 1, "encoder.dropout must be in [0, 1)")
        f = self.diffusion
        try:
            make_schedule(f.T, f.beta_start, f.beta_end, f.schedule)
        except ConfigError as exc:
            raise ConfigError(f"diffusion schedule: {exc}") from exc
        need(all(h >= 1 for h in f.hidden) and f.time_dim >= 1 and f.class_dim >= 1, "diffusion dims must be positive")
        need(f.lr > 0 and f.epochs >= 0 and f.batch_size >= 1, "diffusion lr/epochs/batch_size out of range")
        need(1 <= f.reverse_steps <= f.T, "diffusion.reverse_steps must be in 1..T")
        need(f.eta >= 0, "diffusion.eta must be >= 0")
        a = self.augment
        if isinstance(a.target, str):
            need(a.target in TARGETS, f"augment.target must be one of {TARGETS} or a class list")
        else:
            need(all(isinstance(k, int) and 0 <= k < d.num_classes for k in a.target),
                 "augment.target class list out of range")
        need(a.ratio >= 0, "augment.ratio must be >= 0")
        need(a.mode in MODES, f"augment.mode must be one of {MODES}")
        t = self.finetune
        need(t.gamma >= 0, "finetune.gamma must be >= 0")
        need(t.lr > 0 and t.epochs >= 0 and t.batch_size >= 1, "finetune lr/epochs/batch_size out of range")
        v = self.eval
        need(v.grouping in ("thresholds", "terciles"), "eval.grouping must be thresholds or terciles")
        need(v.low < v.high, "eval thresholds need low < high")

    # ----------------------------------------------------- module configs

    def stage1(self) -> Stage1Config:
        e = self.encoder
        return Stage1Config(list(e.hidden), e.latent_dim, e.lr, e.epochs, e.batch_size, e.dropout)

    def schedule(self):
        f = self.diffusion
        return make_schedule(f.T, f.beta_start, f.beta_end, f.schedule)

    def diffusion_train(self) -> DiffusionConfig:
        f = self.diffusion
        return DiffusionConfig(list(f.hidden), f.time_dim, f.class_dim, f.lr, f.epochs, f.batch_size)

    def sampler(self) -> SamplerSpec:
        f = self.diffusion
        return SamplerSpec.uniform(f.T, f.reverse_steps, f.eta, self.seed)

    def policy(self) -> AugmentPolicy:
        a = self.augment
        target = a.target if isinstance(a.target, str) else frozenset(a.target)
        return AugmentPolicy(target, a.ratio, a.mode)

    def finetune_config(self) -> FinetuneConfig:
        t = self.finetune
        return FinetuneConfig(t.gamma, t.lr, t.epochs, t.batch_size)
