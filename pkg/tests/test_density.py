import math

import numpy as np
import pytest
import torch

from noisyflow.density import (conditional_params, fit_density, load_made, log_density, log_density_batch,
                               mask_check, save_made)


def _mixture_logpdf(x, w, mu, s):
    """Per-vector log density from explicit per-dimension mixture parameters."""
    comp = -0.5 * ((x[..., None] - mu) / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi)
    top = comp.max(-1, keepdims=True)
    per_dim = np.log((w * np.exp(comp - top)).sum(-1)) + top[..., 0]
    return per_dim.sum(-1)


@pytest.fixture(scope="module")
def gauss2d():
    rng = np.random.default_rng(0)
    train = rng.normal(size=(2000, 2))
    model = fit_density(train, n_components=5, epochs=60, seed=0)
    return model, rng.normal(size=(500, 2))


def test_standard_normal_is_recovered(gauss2d):
    model, held = gauss2d
    true = -0.5 * (held ** 2).sum(1) - math.log(2 * math.pi)
    assert abs(log_density_batch(model, held).mean() - true.mean()) < 0.3


def test_pinned_single_component_is_standard_normal():
    model = fit_density(np.random.default_rng(1).normal(size=(30, 2)), n_components=1, epochs=1)
    with torch.no_grad():
        for p in model.net.parameters():
            p.zero_()
    assert log_density(model, [0.0, 0.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-9)
    assert log_density(model, [1.0, 0.0]) == pytest.approx(-math.log(2 * math.pi) - 0.5, abs=1e-9)


def test_matches_explicit_mixture_formula(gauss2d):
    model, held = gauss2d
    w, mu, s = conditional_params(model, held[:50])
    assert np.allclose(w.sum(-1), 1.0)
    oracle = _mixture_logpdf(held[:50], w, mu, s)
    assert np.allclose(log_density_batch(model, held[:50]), oracle, rtol=1e-6)


def test_density_integrates_to_one(gauss2d):
    model, _ = gauss2d
    grid = np.linspace(-8, 8, 321)
    xx, yy = np.meshgrid(grid, grid)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    total = np.exp(log_density_batch(model, pts)).sum() * (grid[1] - grid[0]) ** 2
    assert total == pytest.approx(1.0, rel=0.02)


def test_autoregressive_masks_hold():
    model = fit_density(np.random.default_rng(2).normal(size=(40, 5)), n_components=3, epochs=2)
    report = mask_check(model)
    assert report.ok and report.checked == 5 * 6 // 2


def test_mask_check_catches_broken_mask():
    model = fit_density(np.random.default_rng(2).normal(size=(40, 5)), n_components=3, epochs=2)
    for layer in model.net.layers:
        layer.mask.fill_(1.0)
    assert not mask_check(model).ok


def test_custom_ordering_respected():
    model = fit_density(np.random.default_rng(3).normal(size=(40, 4)), n_components=2, epochs=1,
                        ordering=[3, 1, 0, 2])
    assert mask_check(model).ok


def test_tight_cluster_outscores_scatter():
    rng = np.random.default_rng(4)
    center = rng.uniform(-1, 1, size=8)
    model = fit_density(center + rng.normal(scale=0.1, size=(400, 8)), n_components=3, epochs=40, seed=0)
    inside = log_density_batch(model, center + rng.normal(scale=0.1, size=(100, 8)))
    outside = log_density_batch(model, rng.uniform(-1, 1, size=(100, 8)))
    assert np.median(inside) > np.max(outside)


def test_seed_determinism():
    X = np.random.default_rng(5).normal(size=(60, 3))
    a = fit_density(X, n_components=2, epochs=3, seed=9)
    b = fit_density(X, n_components=2, epochs=3, seed=9)
    assert np.array_equal(log_density_batch(a, X), log_density_batch(b, X))


def test_identical_vectors_warn_but_fit():
    model = fit_density(np.ones((10, 2)), n_components=1, epochs=2)
    assert model.warnings
    assert np.isfinite(log_density(model, [1.0, 1.0]))


@pytest.mark.parametrize("bad", [np.ones((1, 3)), np.array([[1.0, np.nan], [0.0, 1.0]]), np.ones((2, 2, 2))])
def test_invalid_training_input(bad):
    with pytest.raises(ValueError):
        fit_density(bad, epochs=1)


def test_dimension_mismatch_on_query():
    model = fit_density(np.random.default_rng(6).normal(size=(20, 3)), n_components=1, epochs=1)
    with pytest.raises(ValueError, match="dimension"):
        log_density(model, [0.0, 1.0])


def test_checkpoint_round_trip(tmp_path):
    X = np.random.default_rng(7).normal(size=(30, 3))
    model = fit_density(X, n_components=2, epochs=2)
    save_made(model, tmp_path / "m.pt")
    again = load_made(tmp_path / "m.pt")
    assert np.array_equal(log_density_batch(model, X), log_density_batch(again, X))
