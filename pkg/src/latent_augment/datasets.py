"""Synthetic long-tailed data, class statistics, and feature-file persistence."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

PROVENANCE = ("raw", "encoded", "generated")
RAW, ENCODED, GENERATED = 0, 1, 2
GROUPS = ("many", "medium", "few")

MAGIC = b"LDMF"
VERSION = 1
_HASH_TAG = b"CFGH"


@dataclass(eq=False)
class FeatureDataset:
    """Labelled vectors sharing one latent/raw space.

    ``provenance`` holds codes into ``PROVENANCE`` per record. ``fingerprint`` is
    the config hash of the run that produced the data; it travels with the file
    but is not part of record equality.
    """

    features: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    num_classes: int
    fingerprint: str | None = field(default=None)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D array")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8).reshape(-1)
        n = self.features.shape[0]
        if self.labels.shape[0] != n or self.provenance.shape[0] != n:
            raise ShapeError("features, labels and provenance differ in length")
        if self.num_classes < 1:
            raise ShapeError("num_classes must be >= 1")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError(f"label outside [0, {self.num_classes})")
        if n and self.provenance.max() >= len(PROVENANCE):
            raise ShapeError("unknown provenance code")

    @classmethod
    def empty(cls, dim: int, num_classes: int) -> "FeatureDataset":
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, np.uint8), num_classes)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def select(self, mask_or_index) -> "FeatureDataset":
        return FeatureDataset(
            self.features[mask_or_index], self.labels[mask_or_index],
            self.provenance[mask_or_index], self.num_classes, self.fingerprint,
        )

    def with_provenance(self, code: int) -> "FeatureDataset":
        return self.select(self.provenance == code)

    def concat(self, other: "FeatureDataset") -> "FeatureDataset":
        if other.dim != self.dim or other.num_classes != self.num_classes:
            raise ShapeError("cannot concatenate datasets of different dim or K")
        return FeatureDataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.provenance, other.provenance]),
            self.num_classes, self.fingerprint,
        )

    def same_records(self, other: "FeatureDataset") -> bool:
        """Bit-exact equality of dim, K and the record sequence."""
        return (
            self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.provenance, other.provenance)
        )


# ------------------------------------------------------------- statistics

def longtail_counts(num_classes: int, n_max: int, imbalance: float) -> np.ndarray:
    """Exponential profile ``n_k = round(n_max * IF**(-k/(K-1)))``, floored at 1."""
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    if not imbalance >= 1.0:
        raise ConfigError("imbalance factor must be >= 1")
    k = np.arange(num_classes)
    raw = n_max * float(imbalance) ** (-k / (num_classes - 1))
    counts = np.floor(raw + 0.5).astype(np.int64)
    counts[0] = n_max
    return np.maximum(counts, 1)


def group_classes(counts: Sequence[int], thresholds: tuple[float, float] = (20, 100)) -> list[str]:
    """many if n > high, few if n < low, else medium."""
    low, high = thresholds
    if not low < high:
        raise ConfigError("grouping thresholds need low < high")
    out = []
    for n in counts:
        out.append("many" if n > high else "few" if n < low else "medium")
    return out


def group_classes_terciles(counts: Sequence[int]) -> list[str]:
    """Top/middle/bottom third of classes by count (ties broken by class index)."""
    counts = np.asarray(counts)
    order = sorted(range(len(counts)), key=lambda k: (-counts[k], k))
    out = [""] * len(counts)
    for name, part in zip(GROUPS, np.array_split(np.array(order, dtype=np.int64), 3)):
        for k in part:
            out[int(k)] = name
    return out


@dataclass
class ClassProfile:
    counts: np.ndarray
    groups: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.groups) != len(self.counts):
            raise ShapeError("one group per class required")
        if any(g not in GROUPS for g in self.groups):
            raise ShapeError("unknown group name")

    @classmethod
    def from_counts(cls, counts, grouping: str = "thresholds", thresholds=(20, 100)) -> "ClassProfile":
        if grouping == "thresholds":
            groups = group_classes(counts, thresholds)
        elif grouping == "terciles":
            groups = group_classes_terciles(counts)
        else:
            raise ConfigError(f"unknown grouping {grouping!r}")
        return cls(np.asarray(counts), groups)

    @classmethod
    def from_dataset(cls, ds: FeatureDataset, grouping: str = "thresholds", thresholds=(20, 100)):
        return cls.from_counts(ds.class_counts(), grouping, thresholds)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def imbalance_factor(self) -> float:
        nonzero = self.counts[self.counts > 0]
        return float(nonzero.max() / nonzero.min())

    def members(self, group: str) -> list[int]:
        return [k for k, g in enumerate(self.groups) if g == group]


# -------------------------------------------------------------- synthetic

@dataclass
class MixtureSpec:
    means: np.ndarray  # (K, d)
    sigma: float

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.sigma <= 0:
            raise ConfigError("sigma_data must be positive")
        k = self.means.shape[0]
        for i in range(k):
            for j in range(i + 1, k):
                if np.array_equal(self.means[i], self.means[j]):
                    raise ConfigError(f"class means {i} and {j} coincide")

    @classmethod
    def on_sphere(cls, num_classes: int, dim: int, sigma: float, radius: float, rng: np.random.Generator):
        """Class means drawn uniformly on the sphere of the given radius."""
        v = rng.standard_normal((num_classes, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return cls(radius * v, sigma)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def generate_mixture(spec: MixtureSpec, counts: Sequence[int], rng: np.random.Generator) -> FeatureDataset:
    """Class-ordered samples, ``counts[k]`` of them from ``N(mean_k, sigma^2 I)``."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape[0] != spec.num_classes:
        raise ShapeError("one count per class required")
    labels = np.repeat(np.arange(spec.num_classes), counts)
    noise = rng.standard_normal((labels.shape[0], spec.dim))
    x = spec.means[labels] + spec.sigma * noise
    return FeatureDataset(x, labels, np.full(labels.shape[0], RAW, np.uint8), spec.num_classes)


# ------------------------------------------------------------ persistence

def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("prov", "u1"), ("x", "<f8", (dim,))])


def dumps_features(ds: FeatureDataset) -> bytes:
    head = MAGIC + struct.pack("<HIIQ", VERSION, ds.dim, ds.num_classes, len(ds))
    rec = np.empty(len(ds), dtype=_record_dtype(ds.dim))
    rec["label"] = ds.labels
    rec["prov"] = ds.provenance
    rec["x"] = ds.features
    tail = b""
    if ds.fingerprint is not None:
        fp = ds.fingerprint.encode("ascii")
        tail = _HASH_TAG + struct.pack("<H", len(fp)) + fp
    return head + rec.tobytes() + tail


def loads_features(data: bytes) -> FeatureDataset:
    if data[:4] != MAGIC:
        raise FormatError("not an LDMF feature file (bad magic)")
    hsize = 4 + struct.calcsize("<HIIQ")
    if len(data) < hsize:
        raise FormatError("truncated feature file header")
    version, dim, k, count = struct.unpack("<HIIQ", data[4:hsize])
    if version != VERSION:
        raise FormatError(f"unsupported LDMF version {version}")
    dt = _record_dtype(dim)
    end = hsize + count * dt.itemsize
    if len(data) < end:
        raise FormatError("truncated feature file body")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=hsize)
    fingerprint = None
    tail = data[end:]
    if tail:
        if tail[:4] != _HASH_TAG or len(tail) < 6:
            raise FormatError("unexpected trailing bytes in feature file")
        (n,) = struct.unpack("<H", tail[4:6])
        if len(tail) != 6 + n:
            raise FormatError("malformed fingerprint trailer")
        fingerprint = tail[6:].decode("ascii")
    try:
        return FeatureDataset(
            rec["x"].astype(np.float64).reshape(count, dim), rec["label"].astype(np.int64),
            rec["prov"].copy(), k, fingerprint,
        )
    except ShapeError as exc:
        raise FormatError(f"invalid records: {exc}") from exc


def save_features(ds: FeatureDataset, path: str | Path) -> None:
    Path(path).write_bytes(dumps_features(ds))


def load_features(path: str | Path) -> FeatureDataset:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"feature file not found: {path}") from exc
    return loads_features(data)


def export_csv(ds: FeatureDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "provenance"] + [f"f{i}" for i in range(ds.dim)])
        for x, y, p in zip(ds.features, ds.labels, ds.provenance):
            w.writerow([int(y), PROVENANCE[p]] + [repr(float(v)) for v in x])


def import_csv(path: str | Path, num_classes: int | None = None) -> FeatureDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["label", "provenance"]:
        raise FormatError("CSV header must start with label,provenance")
    dim = len(rows[0]) - 2
    body = rows[1:]
    try:
        labels = np.array([int(r[0]) for r in body], dtype=np.int64)
        prov = np.array([PROVENANCE.index(r[1]) for r in body], dtype=np.uint8)
        x = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), dim)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"bad CSV row: {exc}") from exc
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return FeatureDataset(x, labels, prov, num_classes)
