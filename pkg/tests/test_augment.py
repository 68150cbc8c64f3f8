import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from noisyflow.augment import (EPS, REGIONS, Discriminator, GanConfig, Region, RegionThresholds, classify_scores,
                               discriminator_loss, generator_loss, load_gan, nearest_rank, pull_away,
                               region_of, resolve_thresholds, save_gan, synthesize, train_gan)


class Coord:
    """Stand-in density whose log value is one coordinate of the input."""

    def __init__(self, axis):
        self.axis = axis

    def log_prob(self, x):
        return x[:, self.axis]


PN, PM = Coord(0), Coord(1)
T = RegionThresholds(gamma=0.0, omega1=1.0, omega2=2.0, omega3=3.0)


class ConstDisc(torch.nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)

    def features(self, x):
        return x


def test_nearest_rank_on_one_to_hundred():
    vals = np.arange(100, 0, -1).astype(float)
    assert nearest_rank(vals, 0.05) == 5.0
    assert [nearest_rank(vals, p) for p in (0.1, 0.2, 0.3)] == [10.0, 20.0, 30.0]
    assert nearest_rank(vals, 1.0) == 100.0
    with pytest.raises(ValueError):
        nearest_rank([], 0.5)


def test_resolve_thresholds_uses_each_model_on_its_class():
    normal = np.column_stack([np.arange(1, 101), np.zeros(100)]).astype(float)
    malicious = np.column_stack([np.zeros(100), np.arange(1, 101)]).astype(float)
    t = resolve_thresholds(PN, PM, normal, malicious)
    assert (t.gamma, t.omega1, t.omega2, t.omega3) == (5.0, 10.0, 20.0, 30.0)
    with pytest.raises(ValueError):
        resolve_thresholds(PN, PM, normal[:0], malicious)


def test_thresholds_must_increase():
    with pytest.raises(ValueError):
        RegionThresholds(0.0, 2.0, 1.0, 3.0)


@pytest.mark.parametrize("pn, pm, want", [
    (0.5, -1.0, Region.M_O),
    (1.0, -1.0, Region.M_B),
    (1.9, -1.0, Region.M_B),
    (2.0, -1.0, Region.N_B),
    (3.0, -1.0, None),
    (0.5, 0.0, None),
    (2.5, 4.0, None),
])
def test_region_predicates(pn, pm, want):
    assert region_of([pn, pm], PN, PM, T) == want


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 40, elements=st.floats(-5, 5)), arrays(np.float64, 40, elements=st.floats(-5, 5)))
def test_regions_are_disjoint(log_pn, log_pm):
    names = classify_scores(log_pn, log_pm, T)
    for r in REGIONS:
        hit = names == r.value
        assert np.all(log_pm[hit] < T.gamma)
    assert set(names) <= {"", "M_B", "M_O", "N_B"}


def test_region_labels():
    assert [r.label for r in REGIONS] == [1, 1, 0]


def test_pull_away_values():
    assert pull_away(torch.tensor([[1.0, 0.0], [0.0, 1.0]])).item() == pytest.approx(0.0)
    assert pull_away(torch.tensor([[1.0, 0.0], [1.0, 0.0]])).item() == pytest.approx(1.0)
    assert pull_away(torch.tensor([[3.0, 4.0]])).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(0.1, 10)),
       arrays(np.int8, (6, 3), elements=st.sampled_from([-1, 1])))
def test_pull_away_is_bounded(mag, sign):
    v = pull_away(torch.from_numpy(mag * sign)).item()
    assert -1e-12 <= v <= 1 + 1e-12


def test_in_region_batch_loss_is_only_diversity_term():
    batch = torch.tensor([[2.5, -1.0], [2.2, -3.0], [2.9, -0.5]])   # N_B for every row
    disc = ConstDisc(lambda x: torch.full((x.shape[0],), 0.5))
    loss = generator_loss(batch, PN, PM, T, Region.N_B, disc, None)
    assert loss.item() == pytest.approx(pull_away(batch).item())


def test_generator_loss_term_by_term():
    # row 0: p_M >= gamma; row 1: too sparse for M_B; row 2: too dense for M_B
    batch = torch.tensor([[1.5, 0.5], [0.2, -1.0], [2.7, -2.0]], dtype=torch.float64)
    x_in = torch.tensor([[1.2, -1.0], [1.8, -4.0]], dtype=torch.float64)
    disc = ConstDisc(lambda x: torch.sigmoid(x.sum(1)))
    got = generator_loss(batch, PN, PM, T, Region.M_B, disc, x_in).item()

    rows = batch.numpy()
    cos = [[np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b) for b in rows] for a in rows]
    pt = sum(cos[i][j] ** 2 for i in range(3) for j in range(3) if i != j) / 6
    fm = np.linalg.norm(rows.mean(0) - x_in.numpy().mean(0))
    want = pt + 0.5 - 0.2 + 2.7 + fm
    assert got == pytest.approx(want, abs=1e-9)


def test_discriminator_loss_at_half():
    half = ConstDisc(lambda x: torch.full((x.shape[0],), 0.5))
    xs = [torch.randn(4, 2) for _ in range(5)]
    assert discriminator_loss(*xs, half).item() == pytest.approx(5 * math.log(0.5), abs=1e-6)


def test_discriminator_loss_worst_case_clamps():
    # normal-side rows carry a 0 marker, malicious-side rows a 1
    normal, g_nb = torch.zeros(3, 1), torch.zeros(3, 1)
    malicious = torch.ones(3, 1)
    bad = ConstDisc(lambda x: x[:, 0])
    total = discriminator_loss(normal, malicious, malicious, malicious, g_nb, bad).item()
    assert total == pytest.approx(5 * math.log(EPS), rel=1e-4)


def test_discriminator_loss_term_by_term():
    torch.manual_seed(0)
    disc = Discriminator(3, 8).double()
    xs = [torch.randn(5, 3, dtype=torch.float64) for _ in range(5)]
    with torch.no_grad():
        p = [disc(x).numpy() for x in xs]
        want = (np.log(p[0]).mean() + np.log(1 - p[1]).mean() + np.log(1 - p[2]).mean()
                + np.log(1 - p[3]).mean() + np.log(p[4]).mean())
        assert discriminator_loss(*xs, disc).item() == pytest.approx(want, abs=1e-6)


def _toy(seed=0):
    rng = np.random.default_rng(seed)
    normal = rng.normal(scale=0.1, size=(60, 2))
    ang = rng.uniform(0, 2 * np.pi, 60)
    ring = 0.7 * np.column_stack([np.cos(ang), np.sin(ang)])
    X = np.vstack([normal, ring])
    y = np.r_[np.zeros(60), np.ones(60)].astype(int)
    return X, y


def test_zero_steps_records_initial_losses_only():
    X, y = _toy()
    inst = train_gan(X, y, PN, PM, T, GanConfig(steps=0, hidden=8), seed=0)
    assert len(inst.d_history) == 1
    assert all(len(h) == 1 for h in inst.g_history.values())
    assert inst.sample(Region.M_B, 5).shape == (5, 2)


def test_training_is_seed_deterministic():
    X, y = _toy()
    a = train_gan(X, y, PN, PM, T, GanConfig(steps=5, hidden=8), seed=3)
    b = train_gan(X, y, PN, PM, T, GanConfig(steps=5, hidden=8), seed=3)
    assert a.d_history == b.d_history
    for r in REGIONS:
        assert np.array_equal(a.sample(r, 4, seed=1), b.sample(r, 4, seed=1))


def test_vacuous_gamma_is_warned():
    X, y = _toy()
    t = RegionThresholds(gamma=-100.0, omega1=1.0, omega2=2.0, omega3=3.0)
    inst = train_gan(X, y, PN, PM, t, GanConfig(steps=1, hidden=8), seed=0)
    assert any("gamma" in w for w in inst.warnings)


def test_single_class_rejected():
    X, _ = _toy()
    with pytest.raises(ValueError):
        train_gan(X, np.zeros(len(X)), PN, PM, T, GanConfig(steps=0))


def test_synthesize_counts_and_labels():
    X, y = _toy()
    batch = synthesize(X, y, PN, PM, T, eta=5, m=100, config=GanConfig(steps=0, hidden=8), seed=0)
    assert len(batch) == 1500 and batch.vectors.shape == (1500, 2)
    assert int(batch.labels.sum()) == 1000
    assert all(lab == r.label for lab, r in zip(batch.labels, batch.regions))


def test_synthesize_empty_and_deterministic():
    X, y = _toy()
    assert len(synthesize(X, y, PN, PM, T, eta=3, m=0)) == 0
    cfg = GanConfig(steps=3, hidden=8)
    a = synthesize(X, y, PN, PM, T, eta=2, m=7, config=cfg, seed=11)
    b = synthesize(X, y, PN, PM, T, eta=2, m=7, config=cfg, seed=11)
    assert np.array_equal(a.vectors, b.vectors)
    with pytest.raises(ValueError):
        synthesize(X, y, PN, PM, T, eta=0, m=1)


def test_checkpoint_round_trip(tmp_path):
    X, y = _toy()
    inst = train_gan(X, y, PN, PM, T, GanConfig(steps=2, hidden=8), seed=0)
    save_gan(inst, tmp_path / "g.pt")
    again = load_gan(tmp_path / "g.pt")
    for r in REGIONS:
        assert np.array_equal(inst.sample(r, 3, seed=2), again.sample(r, 3, seed=2))


def test_tied_cutoffs_are_separated():
    normal = np.column_stack([np.r_[np.ones(50), np.arange(50) + 2.0], np.zeros(100)])
    malicious = np.column_stack([np.zeros(10), np.arange(10.0)])
    t = resolve_thresholds(PN, PM, normal, malicious)
    assert t.omega1 == 1.0 and t.omega1 < t.omega2 < t.omega3
