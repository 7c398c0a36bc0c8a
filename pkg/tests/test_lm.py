import dataclasses

import numpy as np
import pytest

from csasr.data import SyntheticSpec, Vocab, generate_corpus
from csasr.decoding import DecodeConfig, joint_beam_search
from csasr.errors import ConfigError
from csasr.lm import (
    LmConfig,
    TransformerLM,
    check_vocab,
    load_lm,
    perplexity,
    save_lm,
    train_lm,
    unigram_perplexity,
)
from csasr.model import IlbModel, ModelConfig, save_model

SMALL_LM = dict(model_dim=16, heads=2, layers=1, ffn_dim=32)


@pytest.fixture(scope="module")
def seqs():
    corpus = generate_corpus(SyntheticSpec(n_lang_a=6, n_lang_b=6, n_train=300, n_dev=60, n_test=1))
    return corpus.vocab, [u.tokens for u in corpus["train"]], [u.tokens for u in corpus["dev"]]


def small_lm(vocab, seed=0, **kw):
    cfg = LmConfig(vocab_size=vocab.size, vocab_fingerprint=vocab.fingerprint(), **dict(SMALL_LM, **kw))
    return TransformerLM(cfg, seed=seed)


def test_next_log_probs_are_distributions(seqs):
    vocab, _, _ = seqs
    lm = small_lm(vocab)
    lp = lm.next_log_probs(np.array([[vocab.sos, 2, 3], [vocab.sos, 4, 5]]))
    assert lp.shape == (2, vocab.size)
    np.testing.assert_allclose(np.logaddexp.reduce(lp, axis=-1), 0.0, atol=1e-9)


def test_lm_is_causal(seqs):
    vocab, _, _ = seqs
    lm = small_lm(vocab)
    a = lm(np.array([[vocab.sos, 2, 3, 4]]), np.ones((1, 4), bool))
    b = lm(np.array([[vocab.sos, 2, 3, 9]]), np.ones((1, 4), bool))
    np.testing.assert_array_equal(a.data[:, :3], b.data[:, :3])


def test_trained_lm_beats_unigram(seqs):
    vocab, train, dev = seqs
    lm = small_lm(vocab, dropout=0.0)
    history = train_lm(lm, train, vocab, epochs=4, dev_seqs=dev, warmup_steps=20)
    assert len(history) == 4
    uni = unigram_perplexity(train, dev, vocab)
    assert perplexity(lm, dev, vocab) < uni
    assert history[-1] < history[0]


def test_training_is_deterministic(seqs):
    vocab, train, _ = seqs
    a, b = small_lm(vocab, seed=3), small_lm(vocab, seed=3)
    train_lm(a, train[:64], vocab, epochs=1, seed=5)
    train_lm(b, train[:64], vocab, epochs=1, seed=5)
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_save_load_round_trip(seqs, tmp_path):
    vocab, _, _ = seqs
    lm = small_lm(vocab, seed=1)
    save_lm(lm, tmp_path / "lm.ckpt")
    back = load_lm(tmp_path / "lm.ckpt")
    assert back.cfg == lm.cfg
    for (_, x), (_, y) in zip(lm.named_parameters(), back.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_load_lm_rejects_asr_checkpoint(tmp_path):
    model = IlbModel(ModelConfig(model_dim=16, heads=2, encoder_layers=1, decoder_layers=1, ffn_dim=32))
    save_model(model, tmp_path / "asr.ckpt")
    with pytest.raises(ConfigError):
        load_lm(tmp_path / "asr.ckpt")


def test_vocab_fingerprint_checked(seqs):
    vocab, _, _ = seqs
    lm = small_lm(vocab)
    check_vocab(lm, vocab)
    other = Vocab(vocab.n_a + 1, vocab.n_b - 1)
    with pytest.raises(ConfigError):
        check_vocab(lm, other)
    with pytest.raises(ConfigError):
        check_vocab(lm, Vocab(vocab.n_a, vocab.n_b + 1))


def test_fusion_rejects_mismatched_lm(seqs):
    vocab, _, _ = seqs
    model = IlbModel(ModelConfig(feature_dim=16, model_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
                                 ffn_dim=32, conv_kernel=3, vocab_size=vocab.size + 1))
    x = np.zeros((16, 16))
    with pytest.raises(ConfigError):
        joint_beam_search(model, x, DecodeConfig(beam=2, max_len=2), lm=small_lm(vocab), vocab=vocab)


def test_sixteen_layer_preset_builds(seqs):
    vocab, _, _ = seqs
    lm = small_lm(vocab, layers=16)
    assert len(lm.blocks) == 16
    assert dataclasses.replace(lm.cfg, layers=4) != lm.cfg
