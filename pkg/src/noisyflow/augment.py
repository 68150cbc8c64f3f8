"""Feature-space augmentation in density-defined target regions.

Regions are defined on log-densities of two density models, one fit on the
corrected normal samples (``pn``) and one on the corrected malicious samples
(``pm``):

* ``M_B`` -- malicious boundary just outside the normal mass
* ``M_O`` -- malicious outside: away from normal and malicious mass
* ``N_B`` -- normal boundary just inside the normal mass

Every GAN instance has one generator per region plus a shared discriminator.
Generators minimise a KL-style objective (pull-away diversity plus density
penalties for leaving the region) and a feature-matching term against the
real samples that already fall in their region.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

EPS = 1e-7


class Region(str, enum.Enum):
    M_B = "M_B"
    M_O = "M_O"
    N_B = "N_B"

    def __str__(self) -> str:
        return self.value

    @property
    def label(self) -> int:
        return 0 if self is Region.N_B else 1


REGIONS = (Region.M_B, Region.M_O, Region.N_B)


class DensityModel(Protocol):
    def log_prob(self, x: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class RegionThresholds:
    gamma: float
    omega1: float
    omega2: float
    omega3: float

    def __post_init__(self):
        if not self.omega1 < self.omega2 < self.omega3:
            raise ValueError(f"normal-density cutoffs must increase strictly: {self}")

    def bounds(self, region: Region) -> tuple[float, float]:
        """(theta1, theta2) on normal log-density for a region."""
        if region is Region.M_B:
            return self.omega1, self.omega2
        if region is Region.M_O:
            return -math.inf, self.omega1
        return self.omega2, self.omega3


def nearest_rank(values, pct: float) -> float:
    vals = np.sort(np.asarray(values, dtype=np.float64))
    if vals.size == 0:
        raise ValueError("empty value set")
    if not 0.0 < pct <= 1.0:
        raise ValueError(f"percentile fraction must lie in (0, 1], got {pct}")
    rank = max(1, math.ceil(round(pct * vals.size, 9)))
    return float(vals[rank - 1])


def _log_dens(model, X) -> np.ndarray:
    with torch.no_grad():
        return model.log_prob(torch.as_tensor(np.asarray(X, dtype=np.float64))).double().numpy()


def resolve_thresholds(pn: DensityModel, pm: DensityModel, X_normal, X_malicious,
                       gamma_pct: float = 0.05,
                       omega_pcts: Sequence[float] = (0.1, 0.2, 0.3)) -> RegionThresholds:
    if len(X_normal) == 0 or len(X_malicious) == 0:
        raise ValueError("both corrected classes must be non-empty")
    mal = _log_dens(pm, X_malicious)
    nor = _log_dens(pn, X_normal)
    omegas = [nearest_rank(nor, p) for p in omega_pcts]
    for k in (1, 2):
        if omegas[k] <= omegas[k - 1]:
            # duplicated vectors share a density; the band between tied cutoffs is left empty
            log.warning("normal-density cutoffs %d and %d tie at %.6g; separating by one ulp", k, k + 1, omegas[k])
            omegas[k] = float(np.nextafter(omegas[k - 1], np.inf))
    return RegionThresholds(nearest_rank(mal, gamma_pct), *omegas)


def region_masks(log_pn, log_pm, t: RegionThresholds) -> dict[Region, np.ndarray]:
    log_pn = np.asarray(log_pn, dtype=np.float64)
    low_m = np.asarray(log_pm, dtype=np.float64) < t.gamma
    return {
        Region.M_B: low_m & (t.omega1 <= log_pn) & (log_pn < t.omega2),
        Region.M_O: low_m & (log_pn < t.omega1),
        Region.N_B: low_m & (t.omega2 <= log_pn) & (log_pn < t.omega3),
    }


def classify_scores(log_pn, log_pm, t: RegionThresholds) -> np.ndarray:
    """Region name per point as a string array; ``""`` outside all regions."""
    out = np.full(np.shape(log_pn), "", dtype="<U3")
    for region, m in region_masks(log_pn, log_pm, t).items():
        out[m] = region.value
    return out


def region_of(x, pn: DensityModel, pm: DensityModel, t: RegionThresholds) -> Region | None:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    name = classify_scores(_log_dens(pn, x), _log_dens(pm, x), t)[0]
    return Region(name) if name else None


# ---------------------------------------------------------------------------
# losses

def pull_away(f: torch.Tensor) -> torch.Tensor:
    """Mean squared cosine similarity over ordered pairs i != j (0 for fewer than two rows)."""
    n = f.shape[0]
    if n < 2:
        return f.sum() * 0.0
    unit = f / f.norm(dim=1, keepdim=True).clamp_min(1e-12)
    cos = unit @ unit.T
    return ((cos * cos).sum() - (cos.diagonal() ** 2).sum()) / (n * (n - 1))


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        return values.sum() * 0.0
    return values[mask].mean()


def kl_terms(batch: torch.Tensor, log_pn: torch.Tensor, log_pm: torch.Tensor,
             t: RegionThresholds, region: Region) -> torch.Tensor:
    """Region objective: diversity penalty plus density penalties for out-of-region samples."""
    theta1, theta2 = t.bounds(region)
    with torch.no_grad():
        high_m = log_pm >= t.gamma
        too_sparse = ~high_m & (log_pn < theta1)
        too_dense = ~high_m & (log_pn >= theta2)
    return (pull_away(batch)
            + _masked_mean(log_pm, high_m)
            - _masked_mean(log_pn, too_sparse)
            + _masked_mean(log_pn, too_dense))


def feature_matching(disc: "Discriminator", batch: torch.Tensor, x_in: torch.Tensor | None) -> torch.Tensor:
    if x_in is None or x_in.shape[0] == 0:
        return batch.sum() * 0.0
    return torch.linalg.vector_norm(disc.features(batch).mean(0) - disc.features(x_in).mean(0))


def generator_loss(batch: torch.Tensor, pn: DensityModel, pm: DensityModel, t: RegionThresholds,
                   region: Region, disc: "Discriminator", x_in: torch.Tensor | None) -> torch.Tensor:
    return (kl_terms(batch, pn.log_prob(batch), pm.log_prob(batch), t, region)
            + feature_matching(disc, batch, x_in))


def _mean_log(p: torch.Tensor) -> torch.Tensor:
    if p.numel() == 0:
        return p.sum() * 0.0
    return torch.log(p.clamp(EPS, 1.0 - EPS)).mean()


def discriminator_loss(x_normal, x_malicious, g_mb, g_mo, g_nb, disc) -> torch.Tensor:
    """Discriminator objective; training maximises it.

    Normal-side inputs (real normal, N_B samples) enter through log D and
    malicious-side inputs through log(1 - D).
    """
    return (_mean_log(disc(x_normal)) + _mean_log(1 - disc(x_malicious)) + _mean_log(1 - disc(g_mb))
            + _mean_log(1 - disc(g_mo)) + _mean_log(disc(g_nb)))


# ---------------------------------------------------------------------------
# networks

class Generator(nn.Module):
    def __init__(self, latent: int, hidden: int, d: int, output_scale: float = 1.0):
        super().__init__()
        self.output_scale = output_scale
        self.net = nn.Sequential(nn.Linear(latent, hidden), nn.LeakyReLU(0.2),
                                 nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
                                 nn.Linear(hidden, d))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.output_scale * torch.tanh(self.net(z))


class Discriminator(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.first = nn.Sequential(nn.Linear(d, hidden), nn.LeakyReLU(0.2))
        self.rest = nn.Sequential(nn.Linear(hidden, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 1))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.first(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.rest(self.first(x))).squeeze(-1)


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 16
    hidden: int = 32
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    output_scale: float = 1.0


@dataclass
class GanInstance:
    generators: dict[Region, Generator]
    discriminator: Discriminator
    config: GanConfig
    seed: int
    d_history: list[float] = field(default_factory=list)
    g_history: dict[Region, list[float]] = field(default_factory=lambda: {r: [] for r in REGIONS})
    warnings: list[str] = field(default_factory=list)

    def sample(self, region: Region, m: int, seed: int = 0) -> np.ndarray:
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(m, self.config.latent_dim, generator=gen)
        with torch.no_grad():
            return self.generators[region](z).double().numpy()


def _frozen(model: DensityModel) -> DensityModel:
    return model.frozen(torch.float32) if hasattr(model, "frozen") else model


def region_members(X: np.ndarray, pn: DensityModel, pm: DensityModel, t: RegionThresholds):
    return region_masks(_log_dens(pn, X), _log_dens(pm, X), t)


def train_gan(X: np.ndarray, y: np.ndarray, pn: DensityModel, pm: DensityModel, t: RegionThresholds,
              config: GanConfig = GanConfig(), seed: int = 0) -> GanInstance:
    """Alternate one discriminator ascent step and one generator descent step per iteration."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if not ((y == 0).any() and (y == 1).any()):
        raise ValueError("both classes must be present")
    d = X.shape[1]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gens = {r: Generator(config.latent_dim, config.hidden, d, config.output_scale) for r in REGIONS}
        disc = Discriminator(d, config.hidden)
    inst = GanInstance(gens, disc, config, seed)
    fpn, fpm = _frozen(pn), _frozen(pm)

    masks = region_members(X, pn, pm, t)
    x_in = {r: torch.from_numpy(X[m]).float() for r, m in masks.items()}
    for r, xr in x_in.items():
        if xr.shape[0] == 0:
            msg = f"no training samples inside region {r.value}; feature matching disabled"
            inst.warnings.append(msg)
            log.warning(msg)
    if not (_log_dens(pm, X) < t.gamma).any():
        msg = "gamma lies below every training density; region penalties are vacuous"
        inst.warnings.append(msg)
        log.warning(msg)

    x_norm = torch.from_numpy(X[y == 0]).float()
    x_mal = torch.from_numpy(X[y == 1]).float()
    g_opt = torch.optim.Adam([p for g in gens.values() for p in g.parameters()], lr=config.lr,
                             betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(0.5, 0.999))
    rng = torch.Generator().manual_seed(seed)
    bs = config.batch_size

    def draw():
        z = {r: torch.randn(bs, config.latent_dim, generator=rng) for r in REGIONS}
        rn = x_norm[torch.randint(len(x_norm), (bs,), generator=rng)]
        rm = x_mal[torch.randint(len(x_mal), (bs,), generator=rng)]
        return z, rn, rm

    def g_losses(fake):
        # one density pass over the three batches; same values as generator_loss per region
        stacked = torch.cat([fake[r] for r in REGIONS])
        lpn = fpn.log_prob(stacked).split(bs)
        lpm = fpm.log_prob(stacked).split(bs)
        return {r: kl_terms(fake[r], lpn[k], lpm[k], t, r) + feature_matching(disc, fake[r], x_in[r])
                for k, r in enumerate(REGIONS)}

    z, rn, rm = draw()
    with torch.no_grad():
        fake = {r: gens[r](z[r]) for r in REGIONS}
        inst.d_history.append(discriminator_loss(rn, rm, fake[Region.M_B], fake[Region.M_O],
                                                 fake[Region.N_B], disc).item())
    for r, v in g_losses(fake).items():
        inst.g_history[r].append(v.item())

    for _ in range(config.steps):
        z, rn, rm = draw()
        with torch.no_grad():
            fake = {r: gens[r](z[r]) for r in REGIONS}
        objective = discriminator_loss(rn, rm, fake[Region.M_B], fake[Region.M_O], fake[Region.N_B], disc)
        d_opt.zero_grad()
        (-objective).backward()
        d_opt.step()
        inst.d_history.append(objective.item())

        fake = {r: gens[r](z[r]) for r in REGIONS}
        losses = g_losses(fake)
        g_opt.zero_grad()
        sum(losses.values()).backward()
        g_opt.step()
        for r, v in losses.items():
            inst.g_history[r].append(v.item())
    return inst


@dataclass
class SyntheticBatch:
    vectors: np.ndarray
    labels: np.ndarray
    regions: list[Region]

    def __len__(self) -> int:
        return len(self.labels)


def derived_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def synthesize(X: np.ndarray, y: np.ndarray, pn: DensityModel, pm: DensityModel, t: RegionThresholds,
               eta: int = 5, m: int = 100, config: GanConfig = GanConfig(), seed: int = 0) -> SyntheticBatch:
    """Train ``eta`` independent GANs and pool ``m`` samples per region from each."""
    if eta < 1 or m < 0:
        raise ValueError("need eta >= 1 and m >= 0")
    d = np.asarray(X).shape[1]
    if m == 0:
        return SyntheticBatch(np.zeros((0, d)), np.zeros(0, dtype=np.int64), [])
    vecs, labels, regions = [], [], []
    for k, s in enumerate(derived_seeds(seed, eta)):
        inst = train_gan(X, y, pn, pm, t, config, seed=s)
        for j, r in enumerate(REGIONS):
            vecs.append(inst.sample(r, m, seed=s + j + 1))
            labels += [r.label] * m
            regions += [r] * m
        log.info("gan %d/%d done: final losses %s", k + 1, eta,
                 {r.value: round(h[-1], 4) for r, h in inst.g_history.items()})
    return SyntheticBatch(np.vstack(vecs), np.array(labels, dtype=np.int64), regions)


def save_gan(inst: GanInstance, path: str | Path, provenance: dict | None = None) -> None:
    c = inst.config
    torch.save({
        "kind": "gan",
        "config": {"latent_dim": c.latent_dim, "hidden": c.hidden, "steps": c.steps,
                   "batch_size": c.batch_size, "lr": c.lr, "output_scale": c.output_scale},
        "d": inst.discriminator.first[0].in_features,
        "seed": inst.seed,
        "generators": {r.value: g.state_dict() for r, g in inst.generators.items()},
        "discriminator": inst.discriminator.state_dict(),
        "provenance": provenance or {},
    }, path)


def load_gan(path: str | Path) -> GanInstance:
    blob = torch.load(path, weights_only=True)
    if blob.get("kind") != "gan":
        raise ValueError(f"{path} is not a GAN checkpoint")
    cfg = GanConfig(**blob["config"])
    gens = {}
    for r in REGIONS:
        g = Generator(cfg.latent_dim, cfg.hidden, blob["d"], cfg.output_scale)
        g.load_state_dict(blob["generators"][r.value])
        gens[r] = g
    disc = Discriminator(blob["d"], cfg.hidden)
    disc.load_state_dict(blob["discriminator"])
    return GanInstance(gens, disc, cfg, blob["seed"])
