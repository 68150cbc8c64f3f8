import inspect

import numpy as np
import pytest
import torch

from noisyflow.autoencoder import AeSpec, encode, encode_batch, load_ae, reconstruct, save_ae, train_ae
from noisyflow.flows import FlowKey, Flow, LengthSequence, tokenize


def _seqs(count, n=12, seed=0, hi=300):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        k = int(rng.integers(1, n + 1))
        out.append(tokenize(Flow(FlowKey("a", "b", 1, 2, "TCP"), 0.0, tuple(rng.integers(1, hi, size=k).tolist())), n=n))
    return out


def _params(model):
    return {k: v.clone() for k, v in model.net.state_dict().items()}


@pytest.mark.parametrize("B, H", [(1, 4), (2, 8), (3, 2)])
def test_feature_dimension_is_2BH(B, H):
    spec = AeSpec(vocab=301, embed_dim=8, hidden=H, layers=B, seq_len=12)
    model = train_ae(_seqs(8), spec, epochs=1, batch_size=8)
    assert encode_batch(model, _seqs(3, seed=5)).shape == (3, 2 * B * H)
    assert spec.feature_dim == 2 * B * H


def test_default_dimension_matches_defaults():
    assert AeSpec().feature_dim == 32
    assert AeSpec().vocab == 1501


def test_training_is_seed_deterministic():
    spec = AeSpec(vocab=301, embed_dim=8, hidden=4, layers=2, seq_len=12)
    a = train_ae(_seqs(20), spec, epochs=2, batch_size=8, seed=3)
    b = train_ae(_seqs(20), spec, epochs=2, batch_size=8, seed=3)
    pa, pb = _params(a), _params(b)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    assert a.loss_history == b.loss_history


def test_training_api_takes_no_labels():
    assert not any("label" in p for p in inspect.signature(train_ae).parameters)


def test_loss_goes_down_and_smoothed_curve_is_nonincreasing():
    spec = AeSpec(vocab=301, embed_dim=16, hidden=8, layers=2, seq_len=12)
    model = train_ae(_seqs(200), spec, epochs=30, batch_size=32, seed=0)
    hist = np.array(model.loss_history)
    assert hist[-1] < hist[0]
    smooth = np.convolve(hist, np.ones(5) / 5, mode="valid")
    assert np.all(smooth[1:] <= smooth[:-1] * 1.05)


def test_encode_is_deterministic_and_length_independent():
    spec = AeSpec(vocab=301, embed_dim=8, hidden=4, layers=2, seq_len=12)
    model = train_ae(_seqs(10), spec, epochs=1)
    s = _seqs(2, seed=9)
    assert np.array_equal(encode(model, s[0]), encode(model, s[0]))
    assert encode(model, s[0]).shape == encode(model, s[1]).shape
    assert np.all(np.isfinite(encode_batch(model, s)))


def test_features_come_from_final_states_of_each_direction():
    spec = AeSpec(vocab=301, embed_dim=8, hidden=4, layers=2, seq_len=12)
    model = train_ae(_seqs(10), spec, epochs=1)
    seq = _seqs(1, seed=2)[0]
    tokens = torch.tensor([seq.tokens])
    emb = model.net.embedding(tokens)
    out, h_n = model.net.encoder(emb)
    f = encode(model, seq)
    H = spec.hidden
    # top layer output at step n (forward) and step 1 (backward) equal the final states of the last layer
    with torch.no_grad():
        assert np.allclose(f[2 * H:3 * H], out[0, -1, :H].numpy(), atol=1e-6)
        assert np.allclose(f[3 * H:4 * H], out[0, 0, H:].numpy(), atol=1e-6)


def test_reconstruction_rows_are_distributions():
    spec = AeSpec(vocab=301, embed_dim=8, hidden=4, layers=1, seq_len=12)
    model = train_ae(_seqs(10), spec, epochs=1)
    probs = reconstruct(model, _seqs(1, seed=4)[0])
    assert probs.shape == (12, 301)
    assert np.allclose(probs.sum(1), 1.0, atol=1e-6)


def test_overfit_single_sequence_reconstructs_it():
    seq = LengthSequence((5, 17, 42, 17, 5, 0, 0, 0), 5)
    spec = AeSpec(vocab=64, embed_dim=8, hidden=16, layers=1, seq_len=8)
    model = train_ae([seq] * 16, spec, epochs=300, batch_size=16, lr=1e-2, seed=0)
    argmax = reconstruct(model, seq).argmax(1)
    assert argmax[:5].tolist() == [5, 17, 42, 17, 5]


def test_out_of_vocabulary_token_rejected_before_training():
    spec = AeSpec(vocab=10, embed_dim=4, hidden=2, layers=1, seq_len=3)
    with pytest.raises(ValueError, match="token id"):
        train_ae([LengthSequence((3, 12, 0), 2)], spec, epochs=1)


def test_length_mismatch_rejected():
    spec = AeSpec(vocab=301, embed_dim=4, hidden=2, layers=1, seq_len=12)
    model = train_ae(_seqs(4), spec, epochs=1)
    with pytest.raises(ValueError, match="sequence length"):
        encode(model, LengthSequence((1, 2, 3), 3))


def test_checkpoint_round_trip(tmp_path):
    spec = AeSpec(vocab=301, embed_dim=8, hidden=4, layers=2, seq_len=12)
    model = train_ae(_seqs(10), spec, epochs=1)
    save_ae(model, tmp_path / "ae.pt")
    again = load_ae(tmp_path / "ae.pt")
    assert again.spec == spec
    s = _seqs(4, seed=8)
    assert np.array_equal(encode_batch(model, s), encode_batch(again, s))
