"""Label-free feature extraction with a bidirectional GRU sequence autoencoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .flows import LengthSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AeSpec:
    vocab: int = 1501          # L
    embed_dim: int = 32        # V
    hidden: int = 8            # H
    layers: int = 2            # B
    seq_len: int = 50          # n
    head_width: int = 32

    def __post_init__(self):
        if self.vocab < 2 or self.embed_dim < 1 or self.hidden < 1 or self.layers < 1:
            raise ValueError(f"invalid autoencoder spec {self}")

    @property
    def feature_dim(self) -> int:
        return 2 * self.layers * self.hidden


class GruAutoencoder(nn.Module):
    def __init__(self, spec: AeSpec):
        super().__init__()
        self.spec = spec
        d, h = spec.feature_dim, spec.hidden
        self.embedding = nn.Embedding(spec.vocab, spec.embed_dim)
        self.encoder = nn.GRU(spec.embed_dim, h, spec.layers, batch_first=True, bidirectional=True)
        self.decoder = nn.GRU(d, h, spec.layers, batch_first=True, bidirectional=True)
        self.reconstruct = nn.Sequential(
            nn.Linear(2 * h, spec.head_width), nn.ReLU(), nn.Linear(spec.head_width, spec.vocab))

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        _, h_n = self.encoder(self.embedding(tokens))
        # h_n rows: layer1 fwd (state after step n), layer1 bwd (state after step 1), layer2 fwd, ...
        return h_n.transpose(0, 1).reshape(tokens.shape[0], -1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        f = self.encode(tokens)
        out, _ = self.decoder(f.unsqueeze(1).expand(-1, tokens.shape[1], -1))
        return self.reconstruct(out)


@dataclass
class AeModel:
    net: GruAutoencoder
    seed: int
    loss_history: list[float] = field(default_factory=list)

    @property
    def spec(self) -> AeSpec:
        return self.net.spec

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim


def _as_tokens(seqs: Sequence[LengthSequence] | np.ndarray, spec: AeSpec | None = None) -> torch.Tensor:
    if isinstance(seqs, np.ndarray):
        arr = seqs.astype(np.int64, copy=False)
    else:
        if not seqs:
            raise ValueError("no sequences")
        lengths = {s.n for s in seqs}
        if len(lengths) != 1:
            raise ValueError(f"sequences have mixed lengths {sorted(lengths)}")
        arr = np.array([s.tokens for s in seqs], dtype=np.int64)
    if arr.ndim != 2:
        raise ValueError("token array must be 2-D")
    if spec is not None:
        if arr.shape[1] != spec.seq_len:
            raise ValueError(f"sequence length {arr.shape[1]} != model length {spec.seq_len}")
        bad = (arr < 0) | (arr >= spec.vocab)
        if bad.any():
            raise ValueError(f"token id outside [0, {spec.vocab - 1}]: {int(arr[bad][0])}")
    return torch.from_numpy(arr)


def _masked_ce(logits: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, int]:
    # padding (token 0) is excluded; token-level mean over real packets
    mask = tokens > 0
    count = int(mask.sum())
    if count == 0:
        return logits.sum() * 0.0, 0
    return F.cross_entropy(logits[mask], tokens[mask]), count


def train_ae(sequences: Sequence[LengthSequence] | np.ndarray, spec: AeSpec | None = None, *,
             epochs: int = 50, batch_size: int = 32, lr: float = 1e-3, seed: int = 0) -> AeModel:
    """Train the autoencoder on reconstruction loss only; no labels are accepted."""
    tokens = _as_tokens(sequences)
    spec = spec or AeSpec(seq_len=tokens.shape[1])
    tokens = _as_tokens(tokens.numpy(), spec)
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = GruAutoencoder(spec)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    model = AeModel(net, seed)
    n = tokens.shape[0]
    for epoch in range(epochs):
        net.train()
        order = torch.from_numpy(rng.permutation(n))
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            batch = tokens[order[start:start + batch_size]]
            loss, c = _masked_ce(net(batch), batch)
            if c == 0:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * c
            count += c
        model.loss_history.append(total / max(count, 1))
        log.debug("ae epoch %d loss %.4f", epoch, model.loss_history[-1])
    net.eval()
    return model


def encode_batch(model: AeModel, seqs: Sequence[LengthSequence] | np.ndarray,
                 batch_size: int = 512) -> np.ndarray:
    tokens = _as_tokens(seqs, model.spec)
    out = []
    with torch.no_grad():
        for start in range(0, tokens.shape[0], batch_size):
            out.append(model.net.encode(tokens[start:start + batch_size]))
    return torch.cat(out).numpy().astype(np.float64)


def encode(model: AeModel, seq: LengthSequence) -> np.ndarray:
    return encode_batch(model, [seq])[0]


def reconstruct(model: AeModel, seq: LengthSequence) -> np.ndarray:
    """Per-position token distributions, shape (n, L)."""
    tokens = _as_tokens([seq], model.spec)
    with torch.no_grad():
        probs = torch.softmax(model.net(tokens).double(), dim=-1)
    return probs[0].numpy()


def save_ae(model: AeModel, path: str | Path, provenance: dict | None = None) -> None:
    s = model.spec
    torch.save({
        "kind": "autoencoder",
        "spec": {"vocab": s.vocab, "embed_dim": s.embed_dim, "hidden": s.hidden, "layers": s.layers,
                 "seq_len": s.seq_len, "head_width": s.head_width},
        "seed": model.seed,
        "loss_history": list(model.loss_history),
        "state": model.net.state_dict(),
        "provenance": provenance or {},
    }, path)


def load_ae(path: str | Path) -> AeModel:
    blob = torch.load(path, weights_only=True)
    if blob.get("kind") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    net = GruAutoencoder(AeSpec(**blob["spec"]))
    net.load_state_dict(blob["state"])
    net.eval()
    return AeModel(net, blob["seed"], list(blob["loss_history"]))
