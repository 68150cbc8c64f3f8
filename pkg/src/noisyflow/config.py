"""Pipeline configuration: ``key = value`` sections, one per module.

Keys may also appear before any section header; they are then routed to the
single section that owns them (``alpha`` goes to ``relabel`` and so on).
The feature dimension ``d`` is always recomputed as ``2 * B * H``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import GanConfig
from .autoencoder import AeSpec
from .bench import CorpusConfig
from .detector import ForgetSchedule, TrainConfig


class ConfigError(ValueError):
    def __init__(self, section: str, key: str, reason: str):
        super().__init__(f"[{section}] {key}: {reason}")
        self.section = section
        self.key = key


@dataclass(frozen=True)
class FlowsSection:
    n: int = 50
    max_len: int = 1500


@dataclass(frozen=True)
class AutoencoderSection:
    V: int = 32
    H: int = 8
    B: int = 2
    head_width: int = 32
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3

    @property
    def d(self) -> int:
        return 2 * self.B * self.H


@dataclass(frozen=True)
class DensitySection:
    K: int = 10
    hidden: int = 0            # 0 = 8 * d per hidden layer
    layers: int = 2
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    val_fraction: float = 0.1
    patience: int = 10


@dataclass(frozen=True)
class RelabelSection:
    alpha: float = 0.5


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    gamma: float = 0.05
    omega1: float = 0.1
    omega2: float = 0.2
    omega3: float = 0.3
    eta: int = 5
    m: int = -1                # -1 = training-class size / 3
    latent_dim: int = 16
    gan_hidden: int = 32
    steps: int = 2000
    gan_batch_size: int = 64
    gan_lr: float = 1e-4
    output_scale: float = 1.0


@dataclass(frozen=True)
class DetectorSection:
    forget_rate: float = -1.0  # -1 = remaining-noise estimate when truth is known, else 0.1
    ramp_epochs: int = 10
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    correction: bool = True


@dataclass(frozen=True)
class BenchSection:
    normal_templates: int = 3
    normal_jitter: int = 3
    normal_jitter_prob: float = 0.15
    malicious_templates: int = 12
    malicious_jitter: int = 150
    drift_templates: int = 3
    drift_jitter: int = 3
    drift_edits: int = 16
    drift_fraction: float = 0.5
    test_normal: int = 1000
    test_malicious: int = 100
    test_subsets: int = 5
    subset_fraction: float = 0.5
    malicious_per_normal: float = 0.1


SECTIONS = {
    "flows": FlowsSection, "autoencoder": AutoencoderSection, "density": DensitySection,
    "relabel": RelabelSection, "augment": AugmentSection, "detector": DetectorSection, "bench": BenchSection,
}


@dataclass(frozen=True)
class PipelineConfig:
    flows: FlowsSection = field(default_factory=FlowsSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    density: DensitySection = field(default_factory=DensitySection)
    relabel: RelabelSection = field(default_factory=RelabelSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def __post_init__(self):
        _validate(self)

    @property
    def d(self) -> int:
        return self.autoencoder.d

    def ae_spec(self) -> AeSpec:
        a = self.autoencoder
        return AeSpec(vocab=self.flows.max_len + 1, embed_dim=a.V, hidden=a.H, layers=a.B,
                      seq_len=self.flows.n, head_width=a.head_width)

    def density_kwargs(self) -> dict:
        s = self.density
        hidden = None if s.hidden == 0 else (s.hidden,) * s.layers
        if hidden is None and s.layers != 2:
            hidden = (8 * self.d,) * s.layers
        return dict(n_components=s.K, hidden=hidden, epochs=s.epochs, batch_size=s.batch_size, lr=s.lr,
                    val_fraction=s.val_fraction, patience=s.patience)

    def gan_config(self) -> GanConfig:
        a = self.augment
        return GanConfig(latent_dim=a.latent_dim, hidden=a.gan_hidden, steps=a.steps,
                         batch_size=a.gan_batch_size, lr=a.gan_lr, output_scale=a.output_scale)

    def detector_config(self) -> TrainConfig:
        s = self.detector
        return TrainConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr)

    def schedule(self, remaining_noise: float | None = None) -> ForgetSchedule:
        rate = self.detector.forget_rate
        if rate < 0:
            rate = 0.1 if remaining_noise is None else remaining_noise
        return ForgetSchedule(min(rate, 0.99), self.detector.ramp_epochs)

    def corpus(self) -> CorpusConfig:
        b = self.bench
        return CorpusConfig(
            normal_templates=b.normal_templates, normal_jitter=b.normal_jitter,
            normal_jitter_prob=b.normal_jitter_prob,
            malicious_templates=b.malicious_templates, malicious_jitter=b.malicious_jitter,
            drift_templates=b.drift_templates, drift_jitter=b.drift_jitter, drift_edits=b.drift_edits,
            drift_fraction=b.drift_fraction,
            test_normal=b.test_normal, test_malicious=b.test_malicious, n=self.flows.n,
            max_len=self.flows.max_len)

    def with_values(self, **sections: dict) -> "PipelineConfig":
        """Copy with per-section overrides, e.g. ``with_values(augment={"eta": 2})``."""
        parts = {}
        for name, values in sections.items():
            if name not in SECTIONS:
                raise ConfigError(name, "*", "unknown section")
            current = getattr(self, name)
            for key in values:
                if key not in {f.name for f in fields(current)}:
                    raise ConfigError(name, key, "unknown key")
            parts[name] = dataclasses.replace(current, **values)
        return dataclasses.replace(self, **parts)


def _validate(cfg: PipelineConfig) -> None:
    def need(ok: bool, section: str, key: str, reason: str):
        if not ok:
            raise ConfigError(section, key, reason)

    need(0.0 < cfg.relabel.alpha < 1.0, "relabel", "alpha", "must lie in (0, 1)")
    a = cfg.augment
    for key in ("gamma", "omega1", "omega2", "omega3"):
        need(0.0 < getattr(a, key) <= 1.0, "augment", key, "percentile fraction must lie in (0, 1]")
    need(a.omega1 < a.omega2 < a.omega3, "augment", "omega1", "omega1 < omega2 < omega3 required")
    need(a.eta >= 1, "augment", "eta", "must be >= 1")
    need(a.m >= -1, "augment", "m", "must be >= 0 or -1 for automatic")
    for key in ("V", "H", "B", "epochs", "batch_size"):
        need(getattr(cfg.autoencoder, key) >= 1, "autoencoder", key, "must be >= 1")
    need(cfg.flows.n >= 1 and cfg.flows.max_len >= 1, "flows", "n", "n and max_len must be >= 1")
    need(cfg.density.K >= 1, "density", "K", "must be >= 1")
    need(cfg.density.layers >= 1, "density", "layers", "must be >= 1")
    need(cfg.detector.forget_rate < 1.0, "detector", "forget_rate", "must be below 1")


def _owner_index() -> dict[str, str]:
    owners: dict[str, list[str]] = {}
    for sec, cls in SECTIONS.items():
        for f in fields(cls):
            owners.setdefault(f.name, []).append(sec)
    return {k: v[0] for k, v in owners.items() if len(v) == 1}


_TOP = "__top__"


def _coerce(section: str, key: str, raw: str, typ):
    text = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(section, key, f"cannot read {text!r} as {getattr(typ, '__name__', typ)}") from None
    return text


def parse_config_text(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(f"[{_TOP}]\n" + text)
    owners = _owner_index()
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for sec in parser.sections():
        for key, raw in parser.items(sec):
            if sec == _TOP:
                if key == "d":
                    raise ConfigError("autoencoder", "d", "derived as 2*B*H; do not set it")
                if key not in owners:
                    raise ConfigError(sec, key, "unknown or ambiguous top-level key")
                target = owners[key]
            elif sec not in SECTIONS:
                raise ConfigError(sec, key, "unknown section")
            else:
                target = sec
                if key == "d" and sec == "autoencoder":
                    raise ConfigError(sec, key, "derived as 2*B*H; do not set it")
            types = {f.name: f.type for f in fields(SECTIONS[target])}
            if key not in types:
                raise ConfigError(target, key, "unknown key")
            if key in values[target]:
                raise ConfigError(target, key, "set twice")
            values[target][key] = _coerce(target, key, raw, types[key])
    parts = {s: SECTIONS[s](**v) for s, v in values.items()}
    return PipelineConfig(**parts)


def parse_config(path: str | Path | None) -> PipelineConfig:
    """Read a config file; ``None`` or an empty file yields all defaults."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def serialize(cfg: PipelineConfig) -> str:
    buf = io.StringIO()
    for name in SECTIONS:
        section = getattr(cfg, name)
        buf.write(f"[{name}]\n")
        for f in fields(section):
            v = getattr(section, f.name)
            buf.write(f"{f.name} = {repr(v) if isinstance(v, float) else v}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()
