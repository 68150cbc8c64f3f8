"""Stage wiring: extract, correct, augment, train, and their provenance."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import SyntheticBatch, resolve_thresholds, synthesize
from .autoencoder import AeModel, encode_batch, train_ae
from .config import PipelineConfig, config_hash
from .density import fit_density
from .detector import DetectorModel, train_detector, train_plain
from .flows import Flow, tokenize_many
from .relabel import (CorrectionConfig, CorrectionReport, CorrectionResult, LabeledSample, correct_labels,
                      correction_report)

log = logging.getLogger(__name__)


def tokens_of(flows: Sequence[Flow], cfg: PipelineConfig) -> np.ndarray:
    return np.array([s.tokens for s in tokenize_many(flows, cfg.flows.n, cfg.flows.max_len)], dtype=np.int64)


def fit_autoencoder(flows: Sequence[Flow], cfg: PipelineConfig, seed: int) -> AeModel:
    a = cfg.autoencoder
    return train_ae(tokens_of(flows, cfg), cfg.ae_spec(), epochs=a.epochs, batch_size=a.batch_size, lr=a.lr,
                    seed=seed)


def extract_features(train_flows: Sequence[Flow], others: Sequence[Sequence[Flow]], cfg: PipelineConfig,
                     seed: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Fit the autoencoder on the training flows and encode them plus every other flow set."""
    model = fit_autoencoder(train_flows, cfg, seed)
    X = encode_batch(model, tokens_of(train_flows, cfg))
    return X, [encode_batch(model, tokens_of(f, cfg)) for f in others]


def correct(X: np.ndarray, noisy: np.ndarray, cfg: PipelineConfig, seed: int,
            ids: Sequence[str] | None = None) -> CorrectionResult:
    ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(len(X))]
    samples = [LabeledSample(i, x, int(y)) for i, x, y in zip(ids, X, noisy)]
    return correct_labels(samples, CorrectionConfig(cfg.relabel.alpha), density=cfg.density_kwargs(), seed=seed)


def per_region_count(cfg: PipelineConfig, labels: np.ndarray) -> int:
    if cfg.augment.m >= 0:
        return cfg.augment.m
    # mirror the class sizes: three regions per instance, eta instances
    return max(1, int(round(len(labels) / 2 / 3 / cfg.augment.eta)))


def augment(X: np.ndarray, y: np.ndarray, cfg: PipelineConfig, seed: int) -> SyntheticBatch:
    y = np.asarray(y)
    if not ((y == 0).sum() >= 2 and (y == 1).sum() >= 2):
        raise ValueError("augmentation needs at least two samples of each corrected class")
    dk = cfg.density_kwargs()
    pn = fit_density(X[y == 0], seed=seed, **dk)
    pm = fit_density(X[y == 1], seed=seed + 1, **dk)
    a = cfg.augment
    t = resolve_thresholds(pn, pm, X[y == 0], X[y == 1], a.gamma, (a.omega1, a.omega2, a.omega3))
    return synthesize(X, y, pn, pm, t, eta=a.eta, m=per_region_count(cfg, y), config=cfg.gan_config(), seed=seed)


@dataclass
class PipelineOutput:
    detector: DetectorModel
    correction: CorrectionResult | None
    synthetic: SyntheticBatch | None
    report: CorrectionReport | None


def run_pipeline(X: np.ndarray, noisy: np.ndarray, cfg: PipelineConfig, seed: int,
                 true_labels: np.ndarray | None = None) -> PipelineOutput:
    """Correct, augment and train on one feature matrix.

    With ``true_labels`` the correction report is computed and the remaining
    noise estimate sets the co-teaching forget rate.
    """
    noisy = np.asarray(noisy, dtype=np.int64)
    result = report = None
    labels = noisy
    if cfg.detector.correction:
        result = correct(X, noisy, cfg, seed)
        labels = result.labels
        if true_labels is not None:
            ids = result.ids
            samples = [LabeledSample(i, X[k], int(noisy[k]), int(true_labels[k])) for k, i in enumerate(ids)]
            report = correction_report(result, samples)
    synth = None
    train_X, train_y = X, labels
    if cfg.augment.enabled:
        synth = augment(X, labels, cfg, seed)
        if len(synth):
            train_X = np.vstack([X, synth.vectors])
            train_y = np.concatenate([labels, synth.labels])
    remaining = report.remaining_noise_ratio if report is not None else None
    det = train_detector(train_X, train_y, cfg.schedule(remaining), cfg.detector_config(), seed)
    return PipelineOutput(det, result, synth, report)


def run_control(X: np.ndarray, noisy: np.ndarray, cfg: PipelineConfig, seed: int) -> DetectorModel:
    """Single network on the uncorrected labels, no augmentation."""
    return train_plain(X, noisy, cfg.detector_config(), seed)


# ---------------------------------------------------------------------------
# provenance

def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(stage: str, cfg: PipelineConfig, seed: int, inputs: Sequence[str | Path]) -> dict:
    """Enough to rerun a stage: which stage, config digest, seed and input digests."""
    return {
        "stage": stage,
        "config_sha256": config_hash(cfg),
        "seed": int(seed),
        "inputs": {Path(p).name: file_hash(p) for p in inputs},
    }


def provenance_header(prov: dict) -> list[str]:
    return ["provenance: " + json.dumps(prov, sort_keys=True)]


def read_provenance(path: str | Path) -> dict | None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            if line.startswith("# provenance: "):
                return json.loads(line[len("# provenance: "):])
    return None
