"""Tiny decoding instances: random-table scorers and micro models."""

import numpy as np

from csasr.decoding import DecodeConfig, beam_search, exhaustive_search, model_scorers
from csasr.model import BiasFlags, IlbModel, ModelConfig


def table_att_fn(seed: int, vocab_size: int):
    """Deterministic pseudo-decoder: each prefix maps to its own random distribution."""

    def att_fn(prefixes):
        rows = []
        for p in np.asarray(prefixes):
            z = np.random.default_rng([seed, *map(int, p)]).normal(scale=2.0, size=vocab_size)
            rows.append(z - np.logaddexp.reduce(z))
        return np.array(rows), None

    return att_fn


def random_ctc(rng, n_frames: int, vocab_size: int, eos: int):
    z = rng.normal(scale=2.0, size=(n_frames, vocab_size))
    z[:, eos] = -1e30  # the CTC head never emits eos
    return z - np.logaddexp.reduce(z, axis=1, keepdims=True)


def micro_model(vocab_size: int, preset_flags: BiasFlags, seed: int):
    cfg = ModelConfig(feature_dim=4, model_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
                      ld_decoder_layers=1, ffn_dim=32, conv_kernel=3, vocab_size=vocab_size, flags=preset_flags,
                      dropout=0.0)
    return IlbModel(cfg, seed=seed)


def n_sequences(n_labels: int, max_len: int) -> int:
    return sum(n_labels ** k for k in range(max_len + 1))


def instance(i: int):
    """Instance ``i`` of the oracle suite: ``(att_fn, ctc_lp, vocab_size, sos, eos, max_len)``.

    Labels (non-blank, non-eos) number 2 or 3; odd instances use a micro model
    with every bias switched on, even ones a random-table decoder.
    """
    rng = np.random.default_rng(1000 + i)
    n_labels = 2 + i % 2
    vocab_size = n_labels + 2
    eos = vocab_size - 1
    max_len = 1 + i % 3
    if i % 4 in (1, 3):
        flags = BiasFlags(True, True, True, True)
        model = micro_model(vocab_size, flags, seed=i)
        x = rng.normal(size=(int(rng.integers(8, 17)), 4))
        att_fn, ctc_lp = model_scorers(model, x)
    else:
        att_fn = table_att_fn(i, vocab_size)
        ctc_lp = random_ctc(rng, int(rng.integers(1, 7)), vocab_size, eos)
    return att_fn, ctc_lp, vocab_size, eos, eos, max_len


def run_oracle_case(i: int, alpha: float = 0.4):
    """Exhaustive-beam search vs enumeration; returns ``(beam_result, ranked_oracle)``."""
    att_fn, ctc_lp, v, sos, eos, max_len = instance(i)
    beam = n_sequences(v - 2, max_len) * (v - 1)
    cfg = DecodeConfig(alpha=alpha, beam=beam, max_len=max_len)
    res = beam_search(att_fn, ctc_lp, cfg, v, sos, eos)
    ranked = exhaustive_search(att_fn, ctc_lp, cfg, v, sos, eos)
    return res, ranked


def oracle_agrees(res, ranked, tol: float = 1e-9) -> bool:
    best = ranked[0]
    return res.best.tokens == best.tokens and abs(res.best.score - best.score) <= tol * max(1.0, abs(best.score))
