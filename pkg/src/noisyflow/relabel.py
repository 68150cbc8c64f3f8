"""Density-guided label-noise correction.

A density model is fit on the normal-labeled samples only. The densest
samples seed a confident normal set, the samples farthest from it seed a
confident malicious set of the same size, and a seven-member classifier
ensemble trained on the two seed sets labels everything else.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Hashable, Sequence

import numpy as np
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.ensemble import AdaBoostClassifier, GradientBoostingClassifier, RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.naive_bayes import GaussianNB
from sklearn.svm import SVC

from .density import fit_density, log_density_batch

log = logging.getLogger(__name__)

NORMAL_SEED, MALICIOUS_SEED, INFERRED = "N_s", "M_s", "inferred"


@dataclass
class LabeledSample:
    id: Hashable
    features: np.ndarray
    noisy_label: int
    true_label: int | None = None

    def __post_init__(self):
        if self.noisy_label not in (0, 1):
            raise ValueError(f"sample {self.id}: noisy label must be 0 or 1")
        if self.true_label not in (None, 0, 1):
            raise ValueError(f"sample {self.id}: true label must be 0 or 1")


@dataclass(frozen=True)
class CorrectionConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass
class CorrectionResult:
    ids: list                      # input order
    labels: np.ndarray             # corrected labels, aligned with ids
    provenance: list[str]          # N_s / M_s / inferred
    n_high: int
    n_normal_seed: int
    n_malicious_seed: int
    log_densities: np.ndarray = field(repr=False, default=None)

    def label_of(self, sample_id) -> int:
        return int(self.labels[self.ids.index(sample_id)])

    def as_dict(self) -> dict:
        return dict(zip(self.ids, (int(y) for y in self.labels)))


def ensemble_members(seed: int = 0) -> list[tuple[str, Any]]:
    return [
        ("lda", LinearDiscriminantAnalysis()),
        ("adaboost", AdaBoostClassifier(random_state=seed)),
        ("random_forest", RandomForestClassifier(random_state=seed)),
        ("logistic", LogisticRegression()),
        ("gaussian_nb", GaussianNB()),
        ("svc", SVC(random_state=seed)),
        ("gradient_boosting", GradientBoostingClassifier(random_state=seed)),
    ]


def majority_vote(X_train: np.ndarray, y_train: np.ndarray, X_query: np.ndarray, seed: int = 0) -> np.ndarray:
    """Unweighted hard vote of the seven ensemble members (odd count, so no ties)."""
    if len(X_query) == 0:
        return np.zeros(0, dtype=np.int64)
    votes = np.zeros(len(X_query), dtype=np.int64)
    members = ensemble_members(seed)
    for name, clf in members:
        clf.fit(X_train, y_train)
        pred = np.asarray(clf.predict(X_query), dtype=np.int64)
        votes += pred
        log.debug("ensemble member %s votes malicious on %d/%d", name, int(pred.sum()), len(pred))
    return (2 * votes > len(members)).astype(np.int64)


def _mean_dist_to_others(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2).sum(1) / max(len(X) - 1, 1)


def _mean_dist_to(X: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] + (ref * ref).sum(1)[None, :] - 2.0 * X @ ref.T
    return np.sqrt(np.maximum(d2, 0.0)).mean(1)


def select_seeds(log_dens: np.ndarray, X: np.ndarray, alpha: float):
    """Return (high, normal_seed, malicious_seed) index arrays into X.

    Rows must already be in canonical id order: every ranking breaks ties by
    row position.
    """
    n = len(X)
    n_high = math.ceil(alpha * n)
    rows = np.arange(n)
    high = np.lexsort((rows, -log_dens))[:n_high]
    n_seed = n_high // 2
    if n_seed == 0:
        raise ValueError("alpha too small for dataset size")
    high_sorted = np.sort(high)
    spread = _mean_dist_to_others(X[high_sorted])
    normal_seed = high_sorted[np.lexsort((high_sorted, spread))[:n_seed]]
    rest = np.setdiff1d(rows, normal_seed)
    far = _mean_dist_to(X[rest], X[normal_seed])
    malicious_seed = rest[np.lexsort((rest, -far))[:n_seed]]
    return high, normal_seed, malicious_seed


def correct_labels(samples: Sequence[LabeledSample], cfg: CorrectionConfig = CorrectionConfig(), *,
                   density: dict | None = None, seed: int = 0) -> CorrectionResult:
    """Relabel a noisy training set.

    ``density`` holds keyword arguments for :func:`fit_density` (components,
    hidden widths, epochs, ...). Results do not depend on the input order.
    """
    if len(samples) < 8:
        raise ValueError("need at least 8 samples")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    canon = sorted(range(len(samples)), key=lambda i: ids[i])
    X = np.stack([np.asarray(samples[i].features, dtype=np.float64) for i in canon])
    noisy = np.array([samples[i].noisy_label for i in canon], dtype=np.int64)
    if not (noisy == 0).any():
        raise ValueError("no normal-labeled samples")

    made = fit_density(X[noisy == 0], seed=seed, **(density or {}))
    log_dens = log_density_batch(made, X)
    high, normal_seed, malicious_seed = select_seeds(log_dens, X, cfg.alpha)

    labels = np.empty(len(X), dtype=np.int64)
    prov = np.full(len(X), INFERRED, dtype=object)
    labels[normal_seed], prov[normal_seed] = 0, NORMAL_SEED
    labels[malicious_seed], prov[malicious_seed] = 1, MALICIOUS_SEED
    rest = np.setdiff1d(np.arange(len(X)), np.concatenate([normal_seed, malicious_seed]))
    train_idx = np.concatenate([normal_seed, malicious_seed])
    y_train = np.r_[np.zeros(len(normal_seed)), np.ones(len(malicious_seed))].astype(np.int64)
    labels[rest] = majority_vote(X[train_idx], y_train, X[rest], seed)
    log.info("correction: |H|=%d |N_s|=%d |M_s|=%d inferred=%d", len(high), len(normal_seed),
             len(malicious_seed), len(rest))

    back = np.empty(len(X), dtype=np.int64)
    back[np.asarray(canon)] = np.arange(len(X))
    return CorrectionResult(ids, labels[back], list(prov[back]), len(high), len(normal_seed),
                            len(malicious_seed), log_dens[back])


@dataclass(frozen=True)
class CorrectionReport:
    remaining_noise_ratio: float
    corrected_noise_proportion: float
    original_noise_ratio: float


def correction_report(result: CorrectionResult, samples: Sequence[LabeledSample]) -> CorrectionReport:
    """Noise left after correction and the share of originally wrong labels that got fixed.

    ``corrected_noise_proportion`` is NaN when no label was wrong to begin with.
    """
    by_id = {s.id: s for s in samples}
    if set(by_id) != set(result.ids):
        raise ValueError("result and samples cover different ids")
    true = np.empty(len(result.ids), dtype=np.int64)
    noisy = np.empty(len(result.ids), dtype=np.int64)
    for k, sid in enumerate(result.ids):
        s = by_id[sid]
        if s.true_label is None:
            raise ValueError(f"sample {sid} has no true label")
        true[k], noisy[k] = s.true_label, s.noisy_label
    wrong_before = noisy != true
    wrong_after = result.labels != true
    n_wrong = int(wrong_before.sum())
    fixed = int((wrong_before & ~wrong_after).sum())
    return CorrectionReport(
        remaining_noise_ratio=float(wrong_after.mean()),
        corrected_noise_proportion=fixed / n_wrong if n_wrong else float("nan"),
        original_noise_ratio=float(wrong_before.mean()),
    )


def save_correction_report(path: str | Path, result: CorrectionResult, noisy_labels: Sequence[int],
                           report: CorrectionReport | None = None, header: Sequence[str] = ()) -> None:
    from .flows import _write_lines
    lines = [f"{sid},{int(n)},{int(c)},{p}"
             for sid, n, c, p in zip(result.ids, noisy_labels, result.labels, result.provenance)]
    lines += [f"# size_high = {result.n_high}", f"# size_normal_seed = {result.n_normal_seed}",
              f"# size_malicious_seed = {result.n_malicious_seed}"]
    if report is not None:
        lines += [f"# original_noise_ratio = {report.original_noise_ratio!r}",
                  f"# remaining_noise_ratio = {report.remaining_noise_ratio!r}",
                  f"# corrected_noise_proportion = {report.corrected_noise_proportion!r}"]
    _write_lines(path, lines, header)
