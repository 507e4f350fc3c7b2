"""Accuracy reports, ratio sweeps, and 2-D projections of feature sets."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .augmentation import AugmentPolicy, augment
from .datasets import GROUPS, PROVENANCE, ClassProfile, FeatureDataset
from .diffusion import NoisePredictor, NoiseSchedule, SamplerSpec
from .encoder import EncoderNet, classify
from .errors import ShapeError
from .finetune import FinetuneConfig, finetune_head
from .rng import Rng


@dataclass
class EvalReport:
    overall: float
    per_class: list[float | None]
    groups: dict[str, float | None]
    confusion: list[list[int]]  # rows: true class, cols: predicted
    group_of_class: list[str]
    fingerprint: str | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "overall": self.overall,
            "groups": self.groups,
            "per_class": self.per_class,
            "group_of_class": self.group_of_class,
            "confusion": self.confusion,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            **self.extra,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def evaluate(net: EncoderNet, test: FeatureDataset, profile: ClassProfile,
             fingerprint: str | None = None, seed: int | None = None) -> EvalReport:
    """Accuracy of ``net`` on ``test``; groups come from the training-set ``profile``."""
    if test.dim != net.in_dim:
        raise ShapeError(f"test dim {test.dim} != classifier input dim {net.in_dim}")
    k = net.num_classes
    if test.num_classes != k or profile.num_classes != k:
        raise ShapeError("classifier, test set and profile disagree on K")
    pred, _ = classify(net, test.features) if len(test) else (np.zeros(0, np.int64), None)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (test.labels, pred), 1)
    support = confusion.sum(axis=1)
    correct = np.diag(confusion)
    per_class = [float(correct[c] / support[c]) if support[c] else None for c in range(k)]
    groups: dict[str, float | None] = {}
    for g in GROUPS:
        members = profile.members(g)
        n = int(support[members].sum()) if members else 0
        groups[g] = float(correct[members].sum() / n) if n else None
    overall = float(correct.sum() / support.sum()) if support.sum() else 0.0
    return EvalReport(overall, per_class, groups, confusion.tolist(), list(profile.groups), fingerprint, seed)


# ------------------------------------------------------------- projection

@dataclass
class Projection:
    coords: np.ndarray  # (n, 2)
    labels: np.ndarray
    provenance: np.ndarray
    axes: np.ndarray  # (dim, 2)
    variances: np.ndarray  # (2,)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "label", "provenance"])
            for (x, y), lab, p in zip(self.coords, self.labels, self.provenance):
                w.writerow([repr(float(x)), repr(float(y)), int(lab), PROVENANCE[p]])


def principal_axes(cov: np.ndarray, count: int = 2, rel_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Top principal axes of a covariance matrix via Jacobi rotations.

    Zero-variance directions fall back to canonical basis vectors in index
    order (orthogonalized against the axes already chosen). Each axis is signed
    so its largest-magnitude component is positive.
    """
    dim = cov.shape[0]
    w, v = kernels.jacobi_eigh(np.ascontiguousarray(cov, dtype=np.float64))
    order = sorted(range(dim), key=lambda i: (-w[i], i))
    scale = max(float(np.max(np.abs(w))), 0.0)
    axes, values = [], []
    for i in order[:count]:
        if w[i] <= rel_tol * scale or scale == 0.0:
            break
        axes.append(v[:, i].copy())
        values.append(float(w[i]))
    basis = 0
    while len(axes) < count:
        e = np.zeros(dim)
        e[basis] = 1.0
        basis += 1
        for a in axes:
            e -= np.dot(a, e) * a
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            axes.append(e / norm)
            values.append(0.0)
    out = np.column_stack(axes)
    for j in range(out.shape[1]):
        if out[np.argmax(np.abs(out[:, j])), j] < 0:
            out[:, j] = -out[:, j]
    return out, np.array(values)


def project_2d(features: FeatureDataset) -> Projection:
    """Project records onto the top two principal components of the whole set."""
    if len(features) < 2 or features.dim < 2:
        raise ShapeError("projection needs at least 2 records of dim >= 2")
    x = features.features
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    axes, variances = principal_axes(cov)
    return Projection(centered @ axes, features.labels.copy(), features.provenance.copy(), axes, variances)


# ------------------------------------------------------------------ sweep

SWEEP_HEADER = ("ratio", "acc_all", "acc_many", "acc_medium", "acc_few")


@dataclass
class SweepInputs:
    """Everything Stage 3 + evaluation need, with the seeds the pipeline would use."""

    net: EncoderNet
    encoded: FeatureDataset
    predictor: NoisePredictor
    schedule: NoiseSchedule
    sampler: SamplerSpec
    policy: AugmentPolicy
    profile: ClassProfile
    finetune: FinetuneConfig
    finetune_rng: Rng
    test: FeatureDataset


def run_ratio(inputs: SweepInputs, ratio: float) -> EvalReport:
    policy = replace(inputs.policy, ratio=ratio)
    mixed = augment(inputs.encoded, inputs.predictor, inputs.schedule, inputs.sampler, policy, inputs.profile)
    net, _ = finetune_head(inputs.net, mixed, inputs.finetune, inputs.finetune_rng)
    return evaluate(net, inputs.test, inputs.profile)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LATENT_AUGMENT_THREADS", "1")))
    except ValueError:
        return 1


def ratio_sweep(inputs: SweepInputs, ratios: Sequence[float]) -> list[tuple]:
    """One ``(ratio, acc_all, acc_many, acc_medium, acc_few)`` row per ratio.

    Each ratio reuses the pipeline's seeds, so a row equals a full pipeline run
    configured with that ratio. Rows do not depend on the thread count.
    """
    ratios = [float(r) for r in ratios]
    workers = min(_threads(), len(ratios)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(lambda r: run_ratio(inputs, r), ratios))
    else:
        reports = [run_ratio(inputs, r) for r in ratios]
    return [(r, rep.overall, rep.groups["many"], rep.groups["medium"], rep.groups["few"])
            for r, rep in zip(ratios, reports)]


def write_sweep_csv(rows: Sequence[tuple], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for row in rows:
            w.writerow(["" if v is None else repr(float(v)) for v in row])


def read_sweep_csv(path: str | Path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != SWEEP_HEADER:
        raise ValueError("not a sweep table")
    return [tuple(float(v) if v else None for v in row) for row in rows[1:]]
