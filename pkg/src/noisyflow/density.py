"""Masked autoregressive density estimation with Gaussian-mixture conditionals.

Each variable ``x_i`` gets a K-component mixture whose weights, means and
log-scales are produced by a masked feed-forward network that only sees the
variables earlier in the ordering, so ``log p(x)`` is the sum of the
per-variable log mixture densities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-3
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: np.ndarray):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.mask, self.bias)


def _degrees(d: int, hidden: Sequence[int], ordering: Sequence[int]):
    in_deg = np.empty(d, dtype=np.int64)
    in_deg[np.asarray(ordering)] = np.arange(1, d + 1)
    span = max(d - 1, 1)
    hid_deg = [np.arange(h) % span + 1 for h in hidden]
    return in_deg, hid_deg


class MixtureMade(nn.Module):
    """Masked network emitting (logits, means, log_scales), each shaped (N, d, K)."""

    def __init__(self, d: int, hidden: Sequence[int], n_components: int,
                 ordering: Sequence[int] | None = None, scale_floor: float = SCALE_FLOOR):
        super().__init__()
        if d < 1 or n_components < 1 or not hidden:
            raise ValueError("need d >= 1, K >= 1 and at least one hidden layer")
        self.d, self.K = d, n_components
        self.hidden = tuple(int(h) for h in hidden)
        self.ordering = tuple(range(d)) if ordering is None else tuple(int(i) for i in ordering)
        if sorted(self.ordering) != list(range(d)):
            raise ValueError("ordering must be a permutation of range(d)")
        self.log_floor = math.log(scale_floor)
        self.scale_floor = scale_floor

        in_deg, hid_deg = _degrees(d, self.hidden, self.ordering)
        layers = []
        prev_deg, prev_width = in_deg, d
        for deg, width in zip(hid_deg, self.hidden):
            layers.append(MaskedLinear(prev_width, width, deg[:, None] >= prev_deg[None, :]))
            prev_deg, prev_width = deg, width
        n_out = 3 * n_components * d
        out_var = np.arange(n_out) % d          # output unit -> variable it parameterizes
        layers.append(MaskedLinear(prev_width, n_out, in_deg[out_var][:, None] > prev_deg[None, :]))
        self.layers = nn.ModuleList(layers)
        self.double()

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h).view(x.shape[0], 3, self.K, self.d)

    def forward(self, x: torch.Tensor):
        out = self.raw(x).permute(0, 1, 3, 2)           # (N, 3, d, K)
        logits, means, log_scales = out[:, 0], out[:, 1], out[:, 2]
        return logits, means, log_scales.clamp(min=self.log_floor)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        logits, means, log_scales = self(x)
        z = (x.unsqueeze(-1) - means) * torch.exp(-log_scales)
        comp = -0.5 * z * z - log_scales - _HALF_LOG_2PI
        return torch.logsumexp(F.log_softmax(logits, dim=-1) + comp, dim=-1).sum(-1)


@dataclass
class MadeModel:
    net: MixtureMade
    seed: int
    loss_history: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.net.d

    @property
    def n_components(self) -> int:
        return self.net.K

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable log-density; accepts any float dtype and returns the same dtype."""
        return self.net.log_prob(x.double()).to(x.dtype)

    def frozen(self, dtype: torch.dtype = torch.float32) -> "FrozenMade":
        return FrozenMade(self.net, dtype)


class FrozenMade:
    """Parameter-free snapshot of a fitted network.

    Gradients flow to the inputs only, which is what generator training needs;
    masked weights are materialised once.
    """

    def __init__(self, net: MixtureMade, dtype: torch.dtype = torch.float32):
        self.d, self.K, self.log_floor = net.d, net.K, net.log_floor
        with torch.no_grad():
            self.weights = [((layer.weight * layer.mask).to(dtype), layer.bias.to(dtype)) for layer in net.layers]

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for w, b in self.weights[:-1]:
            h = torch.relu(F.linear(h, w, b))
        w, b = self.weights[-1]
        out = F.linear(h, w, b).view(x.shape[0], 3, self.K, self.d).permute(0, 1, 3, 2)
        logits, means, log_scales = out[:, 0], out[:, 1], out[:, 2].clamp(min=self.log_floor)
        z = (x.unsqueeze(-1) - means) * torch.exp(-log_scales)
        comp = -0.5 * z * z - log_scales - _HALF_LOG_2PI
        return torch.logsumexp(F.log_softmax(logits, dim=-1) + comp, dim=-1).sum(-1)


def _as_matrix(X, d: int | None = None) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array of feature vectors")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"dimension {arr.shape[1]} != model dimension {d}")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite input")
    return arr


def fit_density(X, n_components: int = 10, hidden: Sequence[int] | None = None, *,
                epochs: int = 100, batch_size: int = 64, lr: float = 1e-3, weight_decay: float = 0.0,
                ordering: Sequence[int] | None = None, scale_floor: float = SCALE_FLOOR,
                val_fraction: float = 0.1, patience: int = 10, seed: int = 0) -> MadeModel:
    """Fit by minibatch Adam on the mean negative log-likelihood.

    A ``val_fraction`` hold-out (skipped below 20 samples) selects the best
    epoch and stops after ``patience`` epochs without improvement; small
    training sets are otherwise memorized.
    """
    arr = _as_matrix(X)
    if arr.shape[0] < 2:
        raise ValueError("need at least two samples")
    d = arr.shape[1]
    hidden = tuple(hidden) if hidden is not None else (8 * d, 8 * d)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = MixtureMade(d, hidden, n_components, ordering, scale_floor)
    model = MadeModel(net, seed)
    if np.ptp(arr, axis=0).max() == 0.0:
        msg = "all training vectors are identical; likelihood is bounded only by the scale floor"
        model.warnings.append(msg)
        log.warning(msg)

    rng = np.random.default_rng(seed)
    data = torch.from_numpy(arr)
    n_val = int(len(arr) * val_fraction) if len(arr) >= 20 else 0
    if n_val:
        perm = torch.from_numpy(rng.permutation(len(arr)))
        val, data = data[perm[:n_val]], data[perm[n_val:]]
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
    n = data.shape[0]
    best, best_state, stale = math.inf, None, 0
    for _ in range(epochs):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for start in range(0, n, batch_size):
            batch = data[order[start:start + batch_size]]
            loss = -net.log_prob(batch).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * batch.shape[0]
        model.loss_history.append(total / n)
        if n_val:
            with torch.no_grad():
                val_loss = -net.log_prob(val).mean().item()
            model.val_history.append(val_loss)
            if val_loss < best:
                best, stale = val_loss, 0
                best_state = {k: v.clone() for k, v in net.state_dict().items()}
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_state is not None:
        net.load_state_dict(best_state)
    return model


def log_density_batch(model: MadeModel, X) -> np.ndarray:
    arr = _as_matrix(X, model.d)
    with torch.no_grad():
        return model.net.log_prob(torch.from_numpy(arr)).numpy()


def log_density(model: MadeModel, x) -> float:
    """Natural-log density of one vector."""
    return float(log_density_batch(model, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def conditional_params(model: MadeModel, X):
    """Mixture weights, means and scales, each shaped (N, d, K)."""
    arr = _as_matrix(X, model.d)
    with torch.no_grad():
        logits, means, log_scales = model.net(torch.from_numpy(arr))
        return (torch.softmax(logits, -1).numpy(), means.numpy(), torch.exp(log_scales).numpy())


@dataclass
class MaskReport:
    violations: list[tuple[int, int]]     # (conditional i, input j) pairs, variable indices
    checked: int

    @property
    def ok(self) -> bool:
        return not self.violations


def mask_check(model: MadeModel, probes: int = 8, seed: int = 0) -> MaskReport:
    """Perturb each input and flag conditionals that change although they must not.

    Conditional i may depend only on variables strictly earlier in the
    ordering; any bit change in its raw parameters after perturbing a
    variable at or after i is a violation.
    """
    net = model.net
    d = net.d
    rank = np.empty(d, dtype=np.int64)
    rank[np.asarray(net.ordering)] = np.arange(d)
    rng = np.random.default_rng(seed)
    base = torch.from_numpy(rng.normal(size=(probes, d)) * 2.0)
    violations, checked = [], 0
    with torch.no_grad():
        ref = net.raw(base)
        for j in range(d):
            moved = base.clone()
            moved[:, j] += torch.from_numpy(1.0 + np.abs(rng.normal(size=probes)) * 3.0)
            changed = (net.raw(moved) != ref).reshape(probes, -1, d).any(dim=1).any(dim=0).numpy()
            for i in range(d):
                if rank[j] >= rank[i]:
                    checked += 1
                    if changed[i]:
                        violations.append((i, j))
    return MaskReport(violations, checked)


def save_made(model: MadeModel, path: str | Path, provenance: dict | None = None) -> None:
    net = model.net
    torch.save({
        "kind": "made",
        "d": net.d, "K": net.K, "hidden": list(net.hidden), "ordering": list(net.ordering),
        "scale_floor": net.scale_floor, "seed": model.seed,
        "loss_history": list(model.loss_history), "warnings": list(model.warnings),
        "state": net.state_dict(), "provenance": provenance or {},
    }, path)


def load_made(path: str | Path) -> MadeModel:
    blob = torch.load(path, weights_only=True)
    if blob.get("kind") != "made":
        raise ValueError(f"{path} is not a density checkpoint")
    net = MixtureMade(blob["d"], blob["hidden"], blob["K"], blob["ordering"], blob["scale_floor"])
    net.load_state_dict(blob["state"])
    return MadeModel(net, blob["seed"], list(blob["loss_history"]), list(blob["warnings"]))


def save_density_report(path: str | Path, ids: Sequence[str], log_densities: np.ndarray,
                        header: Sequence[str] = ()) -> None:
    from .flows import _write_lines
    _write_lines(path, (f"{i},{float(v)!r}" for i, v in zip(ids, log_densities)), header)
