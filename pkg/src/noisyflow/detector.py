"""Co-teaching MLP detector.

Two identically shaped peers are trained side by side. In every batch each
peer ranks the samples by its own loss and hands its small-loss subset to the
other peer, which takes a gradient step on it. Inference uses peer A.
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


@dataclass(frozen=True)
class ForgetSchedule:
    rate: float = 0.1
    ramp_epochs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"forget rate must lie in [0, 1), got {self.rate}")
        if self.ramp_epochs < 0:
            raise ValueError("ramp_epochs must be non-negative")

    def at(self, epoch: int) -> float:
        """Forget rate during 0-based ``epoch``."""
        if self.ramp_epochs == 0:
            return self.rate
        return self.rate * min(epoch / self.ramp_epochs, 1.0)


def kept_count(rate: float, batch: int) -> int:
    # round() strips float fuzz such as (1 - 0.3) * 10 = 6.999999999999999
    return min(batch, math.ceil(round((1.0 - rate) * batch, 9)))


class Mlp(nn.Module):
    def __init__(self, d: int, widths: Sequence[int] = (64, 32)):
        super().__init__()
        layers, prev = [], d
        for w in widths:
            layers += [nn.Linear(prev, w), nn.ReLU()]
            prev = w
        layers.append(nn.Linear(prev, 2))
        self.net = nn.Sequential(*layers)
        self.d = d
        self.widths = tuple(widths)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class DetectorModel:
    peer_a: Mlp
    peer_b: Mlp | None
    seed: int
    loss_history: list[tuple[float, float]] = field(default_factory=list)
    standardize: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def d(self) -> int:
        return self.peer_a.d


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    widths: tuple[int, ...] = (64, 32)


def coteach_step(net_a: Mlp, net_b: Mlp, opt_a, opt_b, x: torch.Tensor, y: torch.Tensor,
                 rate: float) -> tuple[torch.Tensor, torch.Tensor, float, float]:
    """One co-teaching update; returns the indices each peer selected (A's, B's) and both losses.

    Peer A is updated on B's small-loss subset and vice versa.
    """
    keep = kept_count(rate, len(y))
    logits_a, logits_b = net_a(x), net_b(x)
    with torch.no_grad():
        loss_a = F.cross_entropy(logits_a, y, reduction="none")
        loss_b = F.cross_entropy(logits_b, y, reduction="none")
        # stable sort keeps the selection deterministic under loss ties
        pick_a = torch.argsort(loss_a, stable=True)[:keep]
        pick_b = torch.argsort(loss_b, stable=True)[:keep]
    upd_a = F.cross_entropy(logits_a[pick_b], y[pick_b])
    upd_b = F.cross_entropy(logits_b[pick_a], y[pick_a])
    opt_a.zero_grad()
    opt_b.zero_grad()
    (upd_a + upd_b).backward()
    opt_a.step()
    opt_b.step()
    return pick_a, pick_b, upd_a.item(), upd_b.item()


def _standardizer(X: np.ndarray):
    mu = X.mean(0)
    sd = X.std(0)
    sd[sd < 1e-8] = 1.0
    return mu, sd


def _check_binary(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D and aligned with y")
    if not ((y == 0).any() and (y == 1).any()):
        raise ValueError("training data must contain both classes")
    return X, y


def train_detector(X, y, schedule: ForgetSchedule = ForgetSchedule(), config: TrainConfig = TrainConfig(),
                   seed: int = 0) -> DetectorModel:
    X, y = _check_binary(X, y)
    mu, sd = _standardizer(X)
    data = torch.from_numpy((X - mu) / sd).float()
    target = torch.from_numpy(y)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net_a, net_b = Mlp(X.shape[1], config.widths), Mlp(X.shape[1], config.widths)
    opt_a = torch.optim.Adam(net_a.parameters(), lr=config.lr)
    opt_b = torch.optim.Adam(net_b.parameters(), lr=config.lr)
    model = DetectorModel(net_a, net_b, seed, standardize=(mu, sd))
    rng = np.random.default_rng(seed)
    for epoch in range(config.epochs):
        rate = schedule.at(epoch)
        order = torch.from_numpy(rng.permutation(len(y)))
        tot_a = tot_b = 0.0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, _, la, lb = coteach_step(net_a, net_b, opt_a, opt_b, data[idx], target[idx], rate)
            tot_a += la * len(idx)
            tot_b += lb * len(idx)
        model.loss_history.append((tot_a / len(y), tot_b / len(y)))
    log.debug("co-teaching finished: final losses %s", model.loss_history[-1] if model.loss_history else None)
    return model


def train_plain(X, y, config: TrainConfig = TrainConfig(), seed: int = 0) -> DetectorModel:
    """Single network, ordinary cross-entropy on every sample; the uncorrected control."""
    X, y = _check_binary(X, y)
    mu, sd = _standardizer(X)
    data = torch.from_numpy((X - mu) / sd).float()
    target = torch.from_numpy(y)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Mlp(X.shape[1], config.widths)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    model = DetectorModel(net, None, seed, standardize=(mu, sd))
    rng = np.random.default_rng(seed)
    for _ in range(config.epochs):
        order = torch.from_numpy(rng.permutation(len(y)))
        total = 0.0
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = F.cross_entropy(net(data[idx]), target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.loss_history.append((total / len(y), total / len(y)))
    return model


@dataclass
class Predictions:
    scores: np.ndarray
    labels: np.ndarray


def predict(model: DetectorModel, X) -> Predictions:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ValueError(f"expected vectors of dimension {model.d}, got shape {X.shape}")
    if model.standardize is not None:
        mu, sd = model.standardize
        X = (X - mu) / sd
    with torch.no_grad():
        probs = torch.softmax(model.peer_a(torch.from_numpy(X).float()).double(), dim=1)[:, 1].numpy()
    scores = np.clip(probs, 0.0, 1.0)
    return Predictions(scores, (scores >= 0.5).astype(np.int64))


def save_detector(model: DetectorModel, path: str | Path, provenance: dict | None = None) -> None:
    mu, sd = model.standardize if model.standardize is not None else (None, None)
    torch.save({
        "kind": "detector",
        "d": model.d, "widths": list(model.peer_a.widths), "seed": model.seed,
        "peer_a": model.peer_a.state_dict(),
        "peer_b": model.peer_b.state_dict() if model.peer_b is not None else None,
        "mu": None if mu is None else torch.from_numpy(mu),
        "sd": None if sd is None else torch.from_numpy(sd),
        "loss_history": [list(p) for p in model.loss_history],
        "provenance": provenance or {},
    }, path)


def load_detector(path: str | Path) -> DetectorModel:
    blob = torch.load(path, weights_only=True)
    if blob.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    a = Mlp(blob["d"], blob["widths"])
    a.load_state_dict(blob["peer_a"])
    b = None
    if blob["peer_b"] is not None:
        b = Mlp(blob["d"], blob["widths"])
        b.load_state_dict(blob["peer_b"])
    std = None if blob["mu"] is None else (blob["mu"].numpy(), blob["sd"].numpy())
    return DetectorModel(a, b, blob["seed"], [tuple(p) for p in blob["loss_history"]], std)


def save_predictions(path: str | Path, ids: Sequence[str], preds: Predictions, header: Sequence[str] = ()) -> None:
    from .flows import _write_lines
    _write_lines(path, (f"{i},{float(s)!r},{int(l)}" for i, s, l in zip(ids, preds.scores, preds.labels)), header)


def load_predictions(path: str | Path) -> tuple[list[str], Predictions]:
    from .flows import FlowFileError, _data_lines
    ids, scores, labels = [], [], []
    for line_no, line in _data_lines(path):
        parts = line.split(",")
        if len(parts) != 3:
            raise FlowFileError(line_no, "expected sample_id,score,label")
        try:
            s, lab = float(parts[1]), int(parts[2])
        except ValueError:
            raise FlowFileError(line_no, "score must be a number and label an integer") from None
        ids.append(parts[0])
        scores.append(s)
        labels.append(lab)
    return ids, Predictions(np.array(scores, dtype=np.float64), np.array(labels, dtype=np.int64))
