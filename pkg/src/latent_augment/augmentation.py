"""Which classes get pseudo-features, and how many."""
from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .datasets import GENERATED, GROUPS, ClassProfile, FeatureDataset
from .diffusion import NoisePredictor, NoiseSchedule, SamplerSpec, sample_features
from .errors import PolicyError, ShapeError

TARGETS = ("all",) + GROUPS
MODES = ("proportional", "balanced")


@dataclass(frozen=True)
class AugmentPolicy:
    """``target`` is one of ``TARGETS`` or an explicit collection of class indices.

    ``ratio`` is relative to each targeted class's own count (proportional mode)
    or to the mean class count (balanced mode).
    """

    target: str | frozenset = "few"
    ratio: float = 0.2
    mode: str = "proportional"

    def __post_init__(self):
        if isinstance(self.target, str):
            if self.target not in TARGETS:
                raise PolicyError(f"unknown target {self.target!r}")
        else:
            object.__setattr__(self, "target", frozenset(int(k) for k in self.target))
        if not self.ratio >= 0:
            raise PolicyError("ratio must be >= 0")
        if self.mode not in MODES:
            raise PolicyError(f"unknown mode {self.mode!r}")

    def classes(self, profile: ClassProfile) -> list[int]:
        if self.target == "all":
            chosen = list(range(profile.num_classes))
        elif isinstance(self.target, str):
            chosen = profile.members(self.target)
        else:
            if any(k < 0 or k >= profile.num_classes for k in self.target):
                raise PolicyError("custom target class out of range")
            chosen = sorted(self.target)
        if not chosen:
            raise PolicyError(f"target group {self.target!r} has no classes")
        return chosen


def _round_half_up(x: Decimal) -> int:
    return int(x.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def plan_counts(policy: AugmentPolicy, profile: ClassProfile) -> np.ndarray:
    """Number of pseudo-features to generate per class."""
    chosen = policy.classes(profile)
    ratio = Decimal(repr(float(policy.ratio)))
    out = np.zeros(profile.num_classes, dtype=np.int64)
    if ratio == 0:
        return out
    counts = profile.counts
    mean = Decimal(int(counts.sum())) / Decimal(len(counts))
    for k in chosen:
        base = Decimal(int(counts[k])) if policy.mode == "proportional" else mean
        # tiny tail classes are never silently skipped
        out[k] = max(_round_half_up(ratio * base), 1)
    return out


def plan_labels(policy: AugmentPolicy, profile: ClassProfile) -> list[int]:
    counts = plan_counts(policy, profile)
    return [k for k in range(len(counts)) for _ in range(int(counts[k]))]


def augment(encoded: FeatureDataset, pred: NoisePredictor, sched: NoiseSchedule, spec: SamplerSpec,
            policy: AugmentPolicy, profile: ClassProfile) -> FeatureDataset:
    """Encoded records followed by freshly generated ones, provenance-tagged."""
    if profile.num_classes != encoded.num_classes:
        raise ShapeError("profile and dataset disagree on K")
    if pred.latent_dim != encoded.dim:
        raise ShapeError("predictor latent dim differs from encoded features")
    generated = sample_features(sched, pred, spec, plan_labels(policy, profile))
    return encoded.concat(generated)


def generated_counts(ds: FeatureDataset) -> np.ndarray:
    return np.bincount(ds.labels[ds.provenance == GENERATED], minlength=ds.num_classes)
