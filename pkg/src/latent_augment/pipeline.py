"""Stage runners shared by the ``pipeline`` and ``stage`` commands.

Every stage reads its inputs from one directory and writes to another. Inputs
are validated (presence, format, config fingerprint) before any compute starts.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import __version__, kernels
from .augmentation import augment, generated_counts, plan_counts
from .config import ExperimentConfig
from .datasets import (ClassProfile, FeatureDataset, MixtureSpec, generate_mixture, load_features,
                       longtail_counts, save_features)
from .diffusion import load_predictor, save_predictor, train_ldm
from .encoder import EncoderNet, encode_dataset, load_encoder, save_encoder, train_stage1
from .errors import ArtifactError, FormatError, LatentAugmentError
from .evaluation import SweepInputs, evaluate, project_2d, ratio_sweep, write_sweep_csv
from .finetune import finetune_head
from .rng import Rng

# name -> (file name, config scope of its fingerprint)
ARTIFACTS = {
    "raw_train": ("raw_train.ldmf", "data"),
    "raw_test": ("raw_test.ldmf", "data"),
    "encoder": ("encoder.ldmn", "encoder"),
    "encoded": ("encoded.ldmf", "encoder"),
    "stage1_report": ("stage1_report.json", "encoder"),
    "predictor": ("predictor.ldmn", "diffusion"),
    "diffusion_report": ("diffusion_report.json", "diffusion"),
    "augmented": ("augmented.ldmf", "generate"),
    "finetuned": ("finetuned.ldmn", "finetune"),
    "finetune_report": ("finetune_report.json", "finetune"),
    "eval_baseline": ("eval_baseline.json", "finetune"),
    "eval_ldmlr": ("eval_ldmlr.json", "finetune"),
    "projection": ("projection.csv", "finetune"),
    "sweep": ("sweep.csv", "finetune"),
}

STAGES = ("encode", "train-diffusion", "generate", "finetune", "eval", "sweep")
DEFAULT_RATIOS = (0.0, 0.1, 0.2, 0.4, 0.8)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunManifest:
    config_fingerprint: str
    artifacts: dict[str, dict] = field(default_factory=dict)
    stage_timings: dict[str, float] = field(default_factory=dict)
    status: str = "complete"
    failed_stage: str | None = None
    error: str | None = None
    tool_version: str = __version__
    backend: str = field(default_factory=kernels.backend)

    def record(self, name: str, path: Path, cfg: ExperimentConfig) -> None:
        self.artifacts[name] = {
            "path": str(path),
            "sha256": _sha256(path),
            "fingerprint": cfg.fingerprint(ARTIFACTS[name][1]),
        }

    def to_json(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "artifacts": self.artifacts,
            "stage_timings": self.stage_timings,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "tool_version": self.tool_version,
            "backend": self.backend,
        }

    def write(self, path: Path) -> None:
        _write_json(path, self.to_json())


# ------------------------------------------------------------------ data

def synthetic_data(cfg: ExperimentConfig) -> tuple[MixtureSpec, FeatureDataset, FeatureDataset]:
    """Long-tailed training set and balanced test set drawn from one Gaussian mixture."""
    d = cfg.dataset
    rng = Rng(cfg.seed).child("dataset")
    spec = MixtureSpec.on_sphere(d.num_classes, d.dim, d.sigma, d.mean_radius, rng.generator("means"))
    train = generate_mixture(spec, longtail_counts(d.num_classes, d.n_max, d.imbalance), rng.generator("train"))
    test = generate_mixture(spec, [d.test_per_class] * d.num_classes, rng.generator("test"))
    return spec, train, test


def class_profile(cfg: ExperimentConfig, raw_train: FeatureDataset) -> ClassProfile:
    e = cfg.eval
    return ClassProfile.from_dataset(raw_train, e.grouping, (e.low, e.high))


def stage_rng(cfg: ExperimentConfig, stage: str) -> Rng:
    return Rng(cfg.seed).child(stage)


# ------------------------------------------------------------ validation

class _Inputs:
    """Loads and checks upstream artifacts for one stage."""

    def __init__(self, cfg: ExperimentConfig, in_dir: Path):
        self.cfg = cfg
        self.in_dir = in_dir

    def path(self, name: str) -> Path:
        p = self.in_dir / ARTIFACTS[name][0]
        if not p.exists():
            raise ArtifactError(f"missing artifact {name!r} ({p})")
        return p

    def _check_fp(self, name: str, fp: str | None) -> None:
        want = self.cfg.fingerprint(ARTIFACTS[name][1])
        if fp != want:
            raise ArtifactError(f"artifact {name!r} was produced under a different config "
                                f"(fingerprint {fp or 'missing'} != {want[:12]}...)")

    def features(self, name: str) -> FeatureDataset:
        try:
            ds = load_features(self.path(name))
        except FormatError as exc:
            raise ArtifactError(f"artifact {name!r}: {exc}") from exc
        self._check_fp(name, ds.fingerprint)
        return ds

    def encoder(self, name: str = "encoder") -> EncoderNet:
        try:
            net = load_encoder(self.path(name))
        except FormatError as exc:
            raise ArtifactError(f"artifact {name!r}: {exc}") from exc
        self._check_fp(name, net.fingerprint)
        return net

    def predictor(self):
        try:
            pred = load_predictor(self.path("predictor"), self.cfg.schedule())
        except FormatError as exc:
            raise ArtifactError(f"artifact 'predictor': {exc}") from exc
        self._check_fp("predictor", pred.fingerprint)
        return pred


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ArtifactError(msg)


# ---------------------------------------------------------------- stages

def run_encode(cfg: ExperimentConfig, in_dir: Path, out_dir: Path, manifest: RunManifest) -> None:
    _, train, test = synthetic_data(cfg)
    net, report = train_stage1(train, cfg.stage1(), stage_rng(cfg, "stage1"))
    encoded = encode_dataset(net, train)
    data_fp, enc_fp = cfg.fingerprint("data"), cfg.fingerprint("encoder")
    train.fingerprint = test.fingerprint = data_fp
    encoded.fingerprint = net.fingerprint = enc_fp
    outputs = {
        "raw_train": lambda p: save_features(train, p),
        "raw_test": lambda p: save_features(test, p),
        "encoder": lambda p: save_encoder(net, p),
        "encoded": lambda p: save_features(encoded, p),
        "stage1_report": lambda p: _write_json(p, {**report.to_json(), "fingerprint": enc_fp}),
    }
    _emit(outputs, cfg, out_dir, manifest)


def run_train_diffusion(cfg: ExperimentConfig, in_dir: Path, out_dir: Path, manifest: RunManifest) -> None:
    encoded = _Inputs(cfg, in_dir).features("encoded")
    pred, report = train_ldm(encoded, cfg.schedule(), cfg.diffusion_train(), stage_rng(cfg, "diffusion"))
    fp = cfg.fingerprint("diffusion")
    pred.fingerprint = fp
    _emit({
        "predictor": lambda p: save_predictor(pred, p),
        "diffusion_report": lambda p: _write_json(p, {**report.to_json(), "fingerprint": fp}),
    }, cfg, out_dir, manifest)


def run_generate(cfg: ExperimentConfig, in_dir: Path, out_dir: Path, manifest: RunManifest) -> None:
    inp = _Inputs(cfg, in_dir)
    raw_train = inp.features("raw_train")
    encoded = inp.features("encoded")
    pred = inp.predictor()
    _require(pred.latent_dim == encoded.dim, "predictor latent dim does not match encoded features")
    _require(pred.num_classes == encoded.num_classes, "predictor K does not match encoded features")
    mixed = augment(encoded, pred, cfg.schedule(), cfg.sampler(), cfg.policy(), class_profile(cfg, raw_train))
    mixed.fingerprint = cfg.fingerprint("generate")
    _emit({"augmented": lambda p: save_features(mixed, p)}, cfg, out_dir, manifest)


def run_finetune(cfg: ExperimentConfig, in_dir: Path, out_dir: Path, manifest: RunManifest) -> None:
    inp = _Inputs(cfg, in_dir)
    net = inp.encoder()
    mixed = inp.features("augmented")
    _require(mixed.dim == net.latent_dim, "augmented features do not match the encoder's latent dim")
    ft_cfg = cfg.finetune_config()
    tuned, report = finetune_head(net, mixed, ft_cfg, stage_rng(cfg, "finetune"))
    fp = cfg.fingerprint("finetune")
    tuned.fingerprint = fp
    _emit({
        "finetuned": lambda p: save_encoder(tuned, p),
        "finetune_report": lambda p: _write_json(p, {**report.to_json(), "gamma": ft_cfg.gamma, "fingerprint": fp}),
    }, cfg, out_dir, manifest)


def run_eval(cfg: ExperimentConfig, in_dir: Path, out_dir: Path, manifest: RunManifest,
             test_path: Path | None = None) -> None:
    inp = _Inputs(cfg, in_dir)
    baseline = inp.encoder("encoder")
    tuned = inp.encoder("finetuned")
    raw_train = inp.features("raw_train")
    mixed = inp.features("augmented")
    if test_path is None:
        test = inp.features("raw_test")
    else:
        # externally supplied test data: shape checks only
        try:
            test = load_features(test_path)
        except FormatError as exc:
            raise ArtifactError(f"test file {test_path}: {exc}") from exc
    _require(test.dim == baseline.in_dim, "test set dim does not match the classifier")
    _require(test.num_classes == baseline.num_classes, "test set K does not match the classifier")
    profile = class_profile(cfg, raw_train)
    fp = cfg.fingerprint("finetune")
    base_rep = evaluate(baseline, test, profile, fp, cfg.seed)
    base_rep.extra = {"model": "stage1", "grouping": cfg.eval.grouping}
    ld_rep = evaluate(tuned, test, profile, fp, cfg.seed)
    ld_rep.extra = {
        "model": "ldmlr",
        "grouping": cfg.eval.grouping,
        "policy": {"target": cfg.augment.target, "ratio": cfg.augment.ratio, "mode": cfg.augment.mode},
        "gamma": cfg.finetune.gamma,
        "generated_counts": generated_counts(mixed).tolist(),
        "planned_counts": plan_counts(cfg.policy(), profile).tolist(),
    }
    outputs = {
        "eval_baseline": lambda p: p.write_text(base_rep.dumps()),
        "eval_ldmlr": lambda p: p.write_text(ld_rep.dumps()),
    }
    if len(mixed) >= 2 and mixed.dim >= 2:
        outputs["projection"] = lambda p: project_2d(mixed).to_csv(p)
    _emit(outputs, cfg, out_dir, manifest)


def sweep_inputs(cfg: ExperimentConfig, in_dir: Path) -> SweepInputs:
    inp = _Inputs(cfg, in_dir)
    net = inp.encoder()
    encoded = inp.features("encoded")
    pred = inp.predictor()
    raw_train = inp.features("raw_train")
    test = inp.features("raw_test")
    return SweepInputs(net, encoded, pred, cfg.schedule(), cfg.sampler(), cfg.policy(),
                       class_profile(cfg, raw_train), cfg.finetune_config(), stage_rng(cfg, "finetune"), test)


def run_sweep(cfg: ExperimentConfig, in_dir: Path, out_dir: Path, manifest: RunManifest,
              ratios: Sequence[float] = DEFAULT_RATIOS) -> None:
    inputs = sweep_inputs(cfg, in_dir)
    rows = ratio_sweep(inputs, ratios)
    _emit({"sweep": lambda p: write_sweep_csv(rows, p)}, cfg, out_dir, manifest)


RUNNERS: dict[str, Callable] = {
    "encode": run_encode,
    "train-diffusion": run_train_diffusion,
    "generate": run_generate,
    "finetune": run_finetune,
    "eval": run_eval,
    "sweep": run_sweep,
}


def _emit(outputs: dict, cfg: ExperimentConfig, out_dir: Path, manifest: RunManifest) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, write in outputs.items():
        path = out_dir / ARTIFACTS[name][0]
        write(path)
        manifest.record(name, path, cfg)


# ------------------------------------------------------------- commands

def _tagged(stage: str, exc: LatentAugmentError) -> LatentAugmentError:
    try:
        return type(exc)(f"[{stage}] {exc}")
    except TypeError:  # pragma: no cover - all package errors take one message
        return exc


def cmd_stage(stage: str, cfg: ExperimentConfig, in_dir: str | Path, out_dir: str | Path,
              **options) -> RunManifest:
    if stage not in RUNNERS:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    manifest = RunManifest(cfg.fingerprint())
    t0 = time.perf_counter()
    try:
        RUNNERS[stage](cfg, in_dir, out_dir, manifest, **options)
    except LatentAugmentError as exc:
        manifest.status, manifest.failed_stage, manifest.error = "failed", stage, str(exc)
        if manifest.artifacts:
            out_dir.mkdir(parents=True, exist_ok=True)
            manifest.write(out_dir / f"manifest_{stage}.json")
        raise _tagged(stage, exc) from exc
    manifest.stage_timings[stage] = time.perf_counter() - t0
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.write(out_dir / f"manifest_{stage}.json")
    return manifest


def cmd_pipeline(cfg: ExperimentConfig, out_dir: str | Path) -> RunManifest:
    """Stage 1 -> diffusion -> augmentation -> Stage 3 -> evaluation, all in ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.fingerprint())
    for stage in ("encode", "train-diffusion", "generate", "finetune", "eval"):
        t0 = time.perf_counter()
        try:
            RUNNERS[stage](cfg, out_dir, out_dir, manifest)
        except LatentAugmentError as exc:
            manifest.status, manifest.failed_stage, manifest.error = "failed", stage, str(exc)
            for entry in manifest.artifacts.values():
                entry["partial_run"] = True
            manifest.write(out_dir / "manifest.json")
            raise _tagged(stage, exc) from exc
        manifest.stage_timings[stage] = time.perf_counter() - t0
    (out_dir / "config.json").write_text(cfg.dumps())
    manifest.write(out_dir / "manifest.json")
    return manifest
