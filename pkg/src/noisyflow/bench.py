"""Desk-scale evaluation harness: synthetic corpora, label noise, metrics and experiment grids."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .flows import Flow, FlowKey, DEFAULT_MAX_LEN

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# corpus

@dataclass(frozen=True)
class CorpusConfig:
    normal_templates: int = 3
    normal_jitter: int = 3
    normal_jitter_prob: float = 0.15     # share of positions perturbed in a normal flow
    malicious_templates: int = 12
    malicious_jitter: int = 150
    drift_templates: int = 3
    drift_jitter: int = 3
    drift_edits: int = 16                # packets rewritten relative to the normal template
    drift_fraction: float = 0.5          # share of test malicious flows drawn from drift templates
    train_normal: int = 500
    train_malicious: int = 500
    test_normal: int = 1000
    test_malicious: int = 100
    n: int = 50
    max_len: int = DEFAULT_MAX_LEN
    seed: int = 0

    def __post_init__(self):
        counts = (self.normal_templates, self.malicious_templates, self.train_normal, self.train_malicious)
        if min(counts) < 1:
            raise ValueError("template and training counts must be >= 1")
        if min(self.normal_jitter, self.malicious_jitter, self.drift_jitter) < 0:
            raise ValueError("jitter must be non-negative")
        if min(self.test_normal, self.test_malicious, self.drift_templates, self.drift_edits) < 0:
            raise ValueError("test counts must be non-negative")
        if not 0.0 <= self.normal_jitter_prob <= 1.0:
            raise ValueError("normal_jitter_prob must lie in [0, 1]")
        if not 0.0 <= self.drift_fraction <= 1.0:
            raise ValueError("drift_fraction must lie in [0, 1]")
        if self.drift_fraction > 0 and self.drift_templates == 0 and self.test_malicious > 0:
            raise ValueError("drift_fraction > 0 needs at least one drift template")


@dataclass(frozen=True)
class Template:
    name: str
    label: int
    base: tuple[int, ...]
    jitter: int
    count_jitter: int
    jitter_prob: float = 1.0


@dataclass
class Dataset:
    flows: list[Flow]
    labels: np.ndarray
    templates: list[str]

    def __len__(self) -> int:
        return len(self.flows)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset([self.flows[i] for i in idx], self.labels[idx], [self.templates[i] for i in idx])


def _make_templates(cfg: CorpusConfig, rng: np.random.Generator) -> dict[str, Template]:
    out = {}
    hi = cfg.max_len
    # normal templates are variants of one service skeleton, so normal traffic stays similar
    skeleton = rng.integers(40, hi + 1, size=cfg.n)
    for k in range(cfg.normal_templates):
        count = int(rng.integers(cfg.n // 2, cfg.n + 1))
        base = skeleton[:count].copy()
        edit = rng.random(count) < 0.2
        base[edit] = rng.integers(40, hi + 1, size=int(edit.sum()))
        out[f"N{k}"] = Template(f"N{k}", 0, tuple(int(v) for v in base), cfg.normal_jitter, 0,
                                cfg.normal_jitter_prob)
    for k in range(cfg.malicious_templates):
        count = int(rng.integers(6, cfg.n + 1))
        base = tuple(int(v) for v in rng.integers(40, hi + 1, size=count))
        out[f"M{k}"] = Template(f"M{k}", 1, base, cfg.malicious_jitter, max(2, count // 4))
    normals = [t for t in out.values() if t.label == 0]
    # separate stream: drift settings never perturb the training flows
    drng = np.random.default_rng([cfg.seed, 1])
    for k in range(cfg.drift_templates):
        # malicious traffic dressed up as a normal template: same skeleton, a few rewritten packets
        src = normals[k % len(normals)]
        base = np.array(src.base)
        pos = drng.choice(len(base), size=min(cfg.drift_edits, len(base)), replace=False)
        base[pos] = drng.integers(40, hi + 1, size=len(pos))
        out[f"D{k}"] = Template(f"D{k}", 1, tuple(int(v) for v in base), cfg.drift_jitter, 0,
                                cfg.normal_jitter_prob)
    return out


def _draw(t: Template, rng: np.random.Generator, max_len: int) -> tuple[int, ...]:
    count = len(t.base) + int(rng.integers(-t.count_jitter, t.count_jitter + 1))
    count = max(1, count)
    base = np.resize(np.array(t.base), count)          # cycles the skeleton when stretched
    noise = rng.integers(-t.jitter, t.jitter + 1, size=count)
    if t.jitter_prob < 1.0:
        noise = noise * (rng.random(count) < t.jitter_prob)
    return tuple(int(v) for v in np.clip(base + noise, 1, max_len))


def _flows_for(names: Sequence[str], templates: dict[str, Template], t0: float, t1: float,
               rng: np.random.Generator, max_len: int, host_offset: int) -> list[tuple[Flow, str]]:
    stamps = np.sort(rng.uniform(t0, t1, size=len(names)))
    out = []
    for k, (name, ts) in enumerate(zip(names, stamps)):
        h = host_offset + k
        key = FlowKey(f"10.{(h >> 16) & 255}.{(h >> 8) & 255}.{h & 255}", f"192.0.2.{1 + h % 250}",
                      1024 + h % 60000, 443, "TCP")
        out.append((Flow(key, float(ts), _draw(templates[name], rng, max_len)), name))
    return out


def _assign(count: int, names: Sequence[str], rng: np.random.Generator) -> list[str]:
    if count == 0:
        return []
    return [names[i] for i in rng.integers(0, len(names), size=count)]


def synth_corpus(cfg: CorpusConfig = CorpusConfig()) -> tuple[Dataset, Dataset]:
    """Training and test sets drawn from length-sequence templates.

    Training flows occupy the first half of the timeline and test flows the
    second, so a timestamp split reproduces the two sets. Drift templates only
    appear in the test period.
    """
    rng = np.random.default_rng(cfg.seed)
    templates = _make_templates(cfg, rng)
    normal = [n for n, t in templates.items() if n.startswith("N")]
    malicious = [n for n, t in templates.items() if n.startswith("M")]
    drift = [n for n, t in templates.items() if n.startswith("D")]

    train_names = _assign(cfg.train_normal, normal, rng) + _assign(cfg.train_malicious, malicious, rng)
    n_drift = int(round(cfg.test_malicious * cfg.drift_fraction)) if drift else 0
    test_names = (_assign(cfg.test_normal, normal, rng) + _assign(cfg.test_malicious - n_drift, malicious, rng)
                  + _assign(n_drift, drift, rng))
    rng.shuffle(train_names)
    rng.shuffle(test_names)
    pooled = (_flows_for(train_names, templates, 0.0, 1000.0, rng, cfg.max_len, 0)
              + _flows_for(test_names, templates, 1000.0, 2000.0, rng, cfg.max_len, len(train_names)))
    flows = [f for f, _ in pooled]
    names = [n for _, n in pooled]
    labels = np.array([templates[n].label for n in names], dtype=np.int64)
    everything = Dataset(flows, labels, names)
    return split_by_time(everything, 1000.0)


def split_by_time(data: Dataset, cutoff: float) -> tuple[Dataset, Dataset]:
    """Flows starting before ``cutoff`` train, the rest test; each side ordered by first timestamp."""
    order = sorted(range(len(data)), key=lambda i: (data.flows[i].first_ts, i))
    early = [i for i in order if data.flows[i].first_ts < cutoff]
    late = [i for i in order if data.flows[i].first_ts >= cutoff]
    return data.subset(early), data.subset(late)


def cluster_scatter_corpus(n_normal: int = 500, n_malicious: int = 500, d: int = 32, spread: float = 0.1,
                           seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Feature-space corpus: normals from one tight Gaussian, malicious uniform on [-1, 1]^d."""
    rng = np.random.default_rng(seed)
    center = rng.uniform(-0.5, 0.5, size=d)
    X = np.vstack([center + rng.normal(scale=spread, size=(n_normal, d)),
                   rng.uniform(-1.0, 1.0, size=(n_malicious, d))])
    y = np.r_[np.zeros(n_normal, dtype=np.int64), np.ones(n_malicious, dtype=np.int64)]
    return X, y


def make_test_subsets(labels: np.ndarray, count: int = 5, fraction: float = 0.5, malicious_per_normal: float = 0.1,
                      seed: int = 0) -> list[np.ndarray]:
    """Independent uniform subsets of a test pool at a fixed malicious:normal ratio."""
    labels = np.asarray(labels)
    norm_idx = np.flatnonzero(labels == 0)
    mal_idx = np.flatnonzero(labels == 1)
    n_norm = max(1, int(round(len(norm_idx) * fraction)))
    n_mal = min(len(mal_idx), max(1, int(round(n_norm * malicious_per_normal))))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        pick = np.concatenate([rng.choice(norm_idx, n_norm, replace=False), rng.choice(mal_idx, n_mal, replace=False)])
        out.append(np.sort(pick))
    return out


# ---------------------------------------------------------------------------
# label noise

@dataclass(frozen=True)
class NoiseSpec:
    mode: str = "symmetric"
    ratio: float = 0.0
    withheld: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in ("symmetric", "template"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if not 0.0 <= self.ratio < 0.5:
            raise ValueError(f"noise ratio must lie in [0, 0.5), got {self.ratio}")


def _floor(x: float) -> int:
    return math.floor(round(x, 9))


def inject_noise(labels, spec: NoiseSpec, seed: int = 0, templates: Sequence[str] | None = None) -> np.ndarray:
    """Return noisy labels; the input array is left untouched."""
    true = np.asarray(labels, dtype=np.int64)
    noisy = true.copy()
    if spec.ratio == 0.0:
        return noisy
    rng = np.random.default_rng(seed)
    if spec.mode == "symmetric":
        for cls in (0, 1):
            idx = np.flatnonzero(true == cls)
            k = _floor(spec.ratio * len(idx))
            flip = rng.choice(idx, size=k, replace=False)
            noisy[flip] = 1 - cls
        return noisy
    if templates is None:
        raise ValueError("template-mode noise needs per-sample template names")
    withheld = spec.withheld or default_withheld(true, templates, spec.ratio, seed)
    budget = _floor(spec.ratio * len(true))
    for name in withheld:
        idx = np.flatnonzero(np.asarray(templates) == name)
        take = idx[:max(0, budget)]
        noisy[take] = 1 - true[take]
        budget -= len(take)
        if budget <= 0:
            break
    return noisy


def default_withheld(labels, templates: Sequence[str], ratio: float, seed: int = 0) -> tuple[str, ...]:
    """Malicious templates for about half the flip budget, normal templates for the rest."""
    labels = np.asarray(labels)
    names = np.asarray(templates)
    budget = _floor(ratio * len(labels))
    rng = np.random.default_rng(seed)
    chosen = []
    for cls, share in ((1, budget - budget // 2), (0, budget // 2)):
        pool = sorted(set(names[labels == cls]))
        pool = [pool[i] for i in rng.permutation(len(pool))]
        got = 0
        for name in pool:
            if got >= share:
                break
            chosen.append(name)
            got += int((names == name).sum())
    # order malicious-first as chosen; the budget walk in inject_noise then honours the split
    return tuple(chosen)


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> MetricsReport:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(tp, fp, fn, tn, precision, recall, f1)


def compute_metrics(pred, truth, pred_ids: Sequence | None = None, truth_ids: Sequence | None = None) -> MetricsReport:
    """Malicious is the positive class."""
    if pred_ids is not None or truth_ids is not None:
        if pred_ids is None or truth_ids is None or list(pred_ids) != list(truth_ids):
            raise ValueError("prediction and truth ids do not match")
    p = np.asarray(pred, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError("prediction and truth lengths differ")
    tp = int(((p == 1) & (t == 1)).sum())
    fp = int(((p == 1) & (t == 0)).sum())
    fn = int(((p == 0) & (t == 1)).sum())
    tn = int(((p == 0) & (t == 0)).sum())
    return metrics_from_counts(tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# experiment grid

@dataclass(frozen=True)
class Grid:
    sizes: tuple[int, ...] = (500,)
    ratios: tuple[float, ...] = (0.3,)
    modes: tuple[str, ...] = ("symmetric",)
    trials: int = 1
    control: bool = False

    def __post_init__(self):
        if not self.sizes or not self.ratios or not self.modes or self.trials < 1:
            raise ValueError("grid needs at least one size, ratio, mode and trial")


@dataclass
class CellResult:
    size: int
    ratio: float
    mode: str
    seed: int
    variant: str
    metrics: MetricsReport
    remaining_noise: float = float("nan")
    corrected_proportion: float = float("nan")
    per_subset: list[MetricsReport] = field(default_factory=list)


class CellError(RuntimeError):
    pass


COLUMNS = ("size", "ratio", "mode", "seed", "variant", "precision", "recall", "f1",
           "remaining_noise", "corrected_proportion")


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def format_table(rows: Sequence[CellResult]) -> str:
    """Comma-separated table: one row per cell plus a mean±std row per (size, ratio, mode, variant)."""
    lines = [",".join(COLUMNS)]
    for r in rows:
        lines.append(",".join([str(r.size), f"{r.ratio:.2f}", r.mode, str(r.seed), r.variant,
                               _fmt(r.metrics.precision), _fmt(r.metrics.recall), _fmt(r.metrics.f1),
                               _fmt(r.remaining_noise), _fmt(r.corrected_proportion)]))
    groups: dict[tuple, list[CellResult]] = {}
    for r in rows:
        groups.setdefault((r.size, r.ratio, r.mode, r.variant), []).append(r)
    for (size, ratio, mode, variant), rs in groups.items():
        cols = []
        for vals in ([r.metrics.precision for r in rs], [r.metrics.recall for r in rs], [r.metrics.f1 for r in rs],
                     [r.remaining_noise for r in rs], [r.corrected_proportion for r in rs]):
            arr = np.array(vals, dtype=np.float64)
            if np.isnan(arr).all():
                cols.append("nan")
            else:
                arr = arr[~np.isnan(arr)]
                cols.append(f"{arr.mean():.4f}±{arr.std():.4f}")
        lines.append(",".join([str(size), f"{ratio:.2f}", mode, "mean±std", variant] + cols))
    return "\n".join(lines) + "\n"


def average_metrics(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Counts summed, ratio metrics averaged over subsets."""
    return MetricsReport(
        sum(r.tp for r in reports), sum(r.fp for r in reports), sum(r.fn for r in reports),
        sum(r.tn for r in reports),
        float(np.mean([r.precision for r in reports])), float(np.mean([r.recall for r in reports])),
        float(np.mean([r.f1 for r in reports])))


def run_experiment(grid: Grid, config, seed: int = 0, feature_cache: dict | None = None) -> list[CellResult]:
    """Run every (size, ratio, mode, trial) cell; cell seed = ``seed`` + trial index.

    ``config`` is a :class:`noisyflow.config.PipelineConfig`. Autoencoder
    features depend only on the corpus, so cells sharing a corpus reuse them
    through ``feature_cache``.
    """
    from .pipeline import extract_features, run_control, run_pipeline

    cache = {} if feature_cache is None else feature_cache
    rows = []
    for size in grid.sizes:
        for trial in range(grid.trials):
            cell_seed = seed + trial
            ccfg = replace(config.corpus(), train_normal=size, train_malicious=size, seed=cell_seed)
            key = (ccfg, config.autoencoder)
            if key not in cache:
                train, test = synth_corpus(ccfg)
                tr_X, te_X = extract_features(train.flows, [test.flows], config, cell_seed)
                cache[key] = (train, test, tr_X, te_X[0])
            train, test, tr_X, te_X = cache[key]
            subsets = make_test_subsets(test.labels, config.bench.test_subsets, config.bench.subset_fraction,
                                        config.bench.malicious_per_normal, cell_seed)
            for ratio in grid.ratios:
                for mode in grid.modes:
                    where = f"cell size={size} ratio={ratio} mode={mode} seed={cell_seed}"
                    try:
                        noisy = inject_noise(train.labels, NoiseSpec(mode, ratio), cell_seed, train.templates)
                        out = run_pipeline(tr_X, noisy, config, cell_seed, true_labels=train.labels)
                        rows.append(_score(size, ratio, mode, cell_seed, "pipeline", out.detector, te_X,
                                           test.labels, subsets, out.report))
                        if grid.control:
                            ctl = run_control(tr_X, noisy, config, cell_seed)
                            rows.append(_score(size, ratio, mode, cell_seed, "control", ctl, te_X,
                                               test.labels, subsets, None))
                    except Exception as exc:
                        raise CellError(f"{where}: {exc}") from exc
                    log.info("%s done: f1=%.4f", where, rows[-1].metrics.f1)
    return rows


def _score(size, ratio, mode, seed, variant, detector, X_test, y_test, subsets, report) -> CellResult:
    from .detector import predict
    labels = predict(detector, X_test).labels
    per = [compute_metrics(labels[s], y_test[s]) for s in subsets]
    rem = report.remaining_noise_ratio if report is not None else float("nan")
    cor = report.corrected_noise_proportion if report is not None else float("nan")
    return CellResult(size, ratio, mode, seed, variant, average_metrics(per), rem, cor, per)
