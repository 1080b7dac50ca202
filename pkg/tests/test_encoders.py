import logging
import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from retrieval.encoders import (BiGruEncoder, EmbeddingTable, EncoderResources, GruEncoder, GruParams,
                                PrecomputedStore, build_encoder, encode_bigru, encode_gru,
                                encode_precomputed, encode_w2v, gru_step, run_gru)
from retrieval.errors import (ConfigError, DimensionMismatchError, EmptySentenceError, MissingIdError)
from retrieval.textproc import Sentence, build_vocab, tokenize


@pytest.fixture
def table():
    return EmbeddingTable(["dog", "cat", "runs"],
                          np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], dtype=np.float32))


def _gru(vocab_size=12, word_dim=4, hidden=6, seed=0):
    p = GruParams(vocab_size, word_dim, hidden)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        p.E.uniform_(-0.5, 0.5, generator=gen)
    p.reset_parameters(gen)
    return p


def test_w2v_mean_of_in_table_tokens(table):
    out = encode_w2v(tokenize("dog runs zebra"), table)
    np.testing.assert_allclose(out, [1.5, 1.0])


def test_w2v_is_order_invariant(table):
    np.testing.assert_array_equal(encode_w2v(tokenize("dog cat runs"), table),
                                  encode_w2v(tokenize("runs dog cat"), table))


def test_w2v_all_oov_warns_and_returns_zeros(table, caplog):
    with caplog.at_level(logging.WARNING):
        out = encode_w2v(tokenize("zebra giraffe"), table)
    assert out.tolist() == [0.0, 0.0]
    assert "embedding table" in caplog.text


def test_embedding_table_miss_is_an_error(table):
    assert table.get("zebra") is None
    with pytest.raises(MissingIdError, match="zebra"):
        table["zebra"]


def test_precomputed_lookup_and_miss():
    store = PrecomputedStore(["id7"], np.array([[0.5, -1.0, 2.0]], dtype=np.float32))
    np.testing.assert_array_equal(encode_precomputed("id7", store), [0.5, -1.0, 2.0])
    with pytest.raises(MissingIdError, match="id8"):
        encode_precomputed("id8", store)


def _scalar_gru(xs, w=0.5):
    """Hidden states of a 1-d GRU whose weights all equal w and biases are zero"""
    sigmoid = lambda a: 1.0 / (1.0 + math.exp(-a))
    h, states = 0.0, []
    for x in xs:
        z = sigmoid(w * x + w * h)
        r = sigmoid(w * x + w * h)
        h_tilde = math.tanh(w * x + w * (r * h))
        h = (1 - z) * h + z * h_tilde
        states.append(h)
    return states


def _scalar_params(vocab, inputs):
    p = GruParams(vocab.size, 1, 1)
    with torch.no_grad():
        for gate in ("z", "r", "h"):
            getattr(p, f"W_{gate}").fill_(0.5)
            getattr(p, f"U_{gate}").fill_(0.5)
        for word, x in inputs.items():
            p.E[vocab.word2idx[word]] = x
    return p


def test_gru_step_zero_parameters_is_a_fixpoint():
    p = GruParams(3, 4, 6)
    assert torch.equal(gru_step(torch.randn(4), torch.zeros(6), p), torch.zeros(6))


def test_gru_step_closed_update_gate_keeps_state():
    p = _gru()
    with torch.no_grad():
        p.b_z.fill_(-1000.0)
    h_prev = torch.randn(6)
    torch.testing.assert_close(gru_step(torch.randn(4), h_prev, p), h_prev)


def test_gru_step_scalar_oracle():
    vocab = build_vocab([tokenize("red")], min_count=1, for_sequential=True)
    p = _scalar_params(vocab, {})
    h = gru_step(torch.ones(1), torch.zeros(1), p)
    expected = _scalar_gru([1.0])[0]
    assert expected == pytest.approx(0.6224593 * 0.4621172, rel=1e-6)
    assert float(h) == pytest.approx(expected, rel=1e-6)


def test_encode_gru_scalar_oracle():
    vocab = build_vocab([tokenize("red blue")], min_count=1, for_sequential=True)
    p = _scalar_params(vocab, {"red": 1.0, "blue": -2.0})
    states = _scalar_gru([1.0, -2.0])
    out = encode_gru(tokenize("red blue"), p, vocab)
    assert out.shape == (1,)
    assert float(out[0]) == pytest.approx(sum(states) / 2, rel=1e-6)
    assert float(encode_gru(tokenize("red"), p, vocab)[0]) == pytest.approx(states[0], rel=1e-6)


def test_encode_gru_all_zero_parameters():
    vocab = build_vocab([tokenize("a dog runs")], min_count=1, for_sequential=True)
    p = GruParams(vocab.size, 4, 6)
    assert torch.equal(encode_gru(tokenize("a dog runs"), p, vocab), torch.zeros(6))


def test_encode_bigru_scalar_oracle():
    vocab = build_vocab([tokenize("red blue")], min_count=1, for_sequential=True)
    p = _scalar_params(vocab, {"red": 1.0, "blue": -2.0})
    out = encode_bigru(tokenize("red blue"), p, p, vocab)
    forward = sum(_scalar_gru([1.0, -2.0])) / 2
    backward = sum(_scalar_gru([-2.0, 1.0])) / 2
    assert out.tolist() == [pytest.approx(forward, rel=1e-6), pytest.approx(backward, rel=1e-6)]


def test_encode_bigru_palindrome_is_symmetric():
    vocab = build_vocab([tokenize("red blue green")], min_count=1, for_sequential=True)
    p = _gru(vocab_size=vocab.size, seed=4)
    out = encode_bigru(tokenize("red blue green blue red"), p, p, vocab)
    assert torch.equal(out[:6], out[6:])


def test_gru_step_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        gru_step(torch.zeros(5), torch.zeros(6), _gru())


def test_gru_is_order_sensitive():
    vocab = build_vocab([tokenize("one two three four five")], min_count=1, for_sequential=True)
    p = _gru(vocab_size=vocab.size)
    s = tokenize("one two three four five")
    diff = torch.linalg.vector_norm(encode_gru(s, p, vocab) - encode_gru(s.reversed(), p, vocab))
    assert float(diff) > 1e-6


def test_run_gru_padding_matches_single_sentences():
    p = _gru()
    together = run_gru([[1, 2, 3], [4, 5]], p)
    torch.testing.assert_close(together[0], run_gru([[1, 2, 3]], p)[0])
    torch.testing.assert_close(together[1], run_gru([[4, 5]], p)[0])


def test_run_gru_rejects_empty_sentence():
    with pytest.raises(EmptySentenceError):
        run_gru([[1, 2], []], _gru())


def test_bigru_doubles_output_and_recurrent_parameters():
    vocab = build_vocab([tokenize("a dog runs fast")], min_count=1, for_sequential=True)
    uni = GruEncoder(vocab, word_dim=4, hidden=6)
    bi = BiGruEncoder(vocab, word_dim=4, hidden=6)
    assert bi.dim == 2 * uni.dim
    count = lambda params: sum(p.numel() for p in params)
    assert count(bi.fwd.recurrent_parameters()) + count(bi.bwd.recurrent_parameters()) == \
        2 * count(uni.fwd.recurrent_parameters())
    assert bi.bwd.E is bi.fwd.E
    bi.reset_parameters(None, torch.Generator().manual_seed(0))
    out = bi([Sentence.from_text("s", "a dog runs")])
    assert out.shape == (1, 12)
    s = tokenize("a dog runs")
    torch.testing.assert_close(out[0], encode_bigru(s, bi.fwd, bi.bwd, vocab))


def test_gru_gradients_match_finite_differences():
    vocab = build_vocab([tokenize("a dog runs in the park")], min_count=1, for_sequential=True)
    enc = GruEncoder(vocab, word_dim=3, hidden=4).double()
    enc.reset_parameters(None, torch.Generator().manual_seed(0))
    sentences = [Sentence.from_text("s1", "a dog runs"), Sentence.from_text("s2", "the park")]
    names = [n for n, _ in enc.named_parameters()]
    values = tuple(p.detach().clone().requires_grad_(True) for _, p in enc.named_parameters())

    def forward(*params):
        return functional_call(enc, dict(zip(names, params)), (sentences,))

    assert torch.autograd.gradcheck(forward, values, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_init_embedding_copies_table_rows(table):
    vocab = build_vocab([tokenize("dog cat horse")], min_count=1, for_sequential=True)
    p = GruParams(vocab.size, 2, 3)
    hits = p.init_embedding(vocab, table, torch.Generator().manual_seed(0))
    assert hits == 2
    torch.testing.assert_close(p.E[vocab.index("cat")], torch.tensor([0.0, 1.0]))
    assert float(p.E[vocab.index("horse")].abs().max()) <= 0.1


def test_init_embedding_dim_mismatch(table):
    vocab = build_vocab([tokenize("dog")], min_count=1, for_sequential=True)
    with pytest.raises(ConfigError):
        GruParams(vocab.size, 5, 3).init_embedding(vocab, table)


def test_build_encoder_errors():
    with pytest.raises(ConfigError, match="unknown|Unknown"):
        build_encoder("lstm", EncoderResources())
    with pytest.raises(ConfigError, match="bow_vocab"):
        build_encoder("bow", EncoderResources())


def test_frozen_encoders_have_no_parameters(resources):
    for tag in ("bow", "w2v", "bert"):
        enc = build_encoder(tag, resources)
        assert not enc.trainable
        assert list(enc.parameters()) == []
