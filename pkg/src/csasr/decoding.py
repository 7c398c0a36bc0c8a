"""Joint CTC/attention beam search with optional external-LM shallow fusion.

Hypothesis scores are kept as three separate sums (CTC prefix increments,
attention log-probs, LM log-probs) and the weighted total is recomputed
from them, so ``total == alpha*ctc + (1-alpha)*att + lm_weight*lm`` holds
exactly for every returned hypothesis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from csasr.ctc import BLANK, CtcPrefixScorer, PrefixScoreState
from csasr.errors import ConfigError, UsageError


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 0.4
    beam: int = 10
    maxlen_ratio: float = 1.5
    lm_weight: float = 0.3
    length_penalty: float = 0.0
    # hard cap on emitted tokens (eos excluded); None derives it from maxlen_ratio
    max_len: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.lm_weight < 0:
            raise ConfigError("lm_weight must be >= 0")
        if self.max_len is not None and self.max_len < 0:
            raise ConfigError("max_len must be >= 0")

    def output_limit(self, n_frames: int) -> int:
        if self.max_len is not None:
            return self.max_len
        return max(1, int(self.maxlen_ratio * n_frames))


@dataclass
class Hypothesis:
    tokens: tuple
    ctc: float = 0.0
    att: float = 0.0
    lm: float = 0.0
    score: float = 0.0
    finished: bool = False
    ctc_state: Optional[PrefixScoreState] = field(default=None, repr=False)
    # next-token language posteriors produced by the LD decoder along the prefix
    ld_posteriors: list = field(default_factory=list, repr=False)

    def key(self):
        return (-self.score, self.tokens)


@dataclass
class DecodeResult:
    best: Hypothesis
    nbest: list
    # every hypothesis that reached eos, in ranked order (nbest is its prefix)
    ended: list = field(default_factory=list)


def combine(cfg: DecodeConfig, ctc: float, att: float, lm: float, n_tokens: int) -> float:
    return cfg.alpha * ctc + (1.0 - cfg.alpha) * att + cfg.lm_weight * lm + cfg.length_penalty * n_tokens


def beam_search(
    att_fn: Callable,
    ctc_log_probs: Optional[np.ndarray],
    cfg: DecodeConfig,
    vocab_size: int,
    sos: int,
    eos: int,
    lm_fn: Optional[Callable] = None,
    nbest: int = 0,
) -> DecodeResult:
    """Step-synchronous beam search over abstract scorers.

    ``att_fn(prefixes)`` maps an ``(n, L)`` int array of sos-led prefixes to
    ``((n, V) log-probs, (n, V_ld) LD posteriors or None)``; ``lm_fn`` maps the
    same prefixes to ``(n, V)`` log-probs. ``ctc_log_probs`` is ``(T1, V)``.
    Candidates are every id except blank; eos finishes a hypothesis and is the
    only candidate once ``max_len`` tokens are emitted. Ties break on the
    lexicographically smallest token tuple.
    """
    if cfg.alpha > 0 and ctc_log_probs is None:
        raise UsageError("alpha > 0 needs CTC log-probs")
    scorer = CtcPrefixScorer(ctc_log_probs, eos=eos) if ctc_log_probs is not None else None
    n_frames = scorer.n_frames if scorer is not None else 1
    limit = cfg.output_limit(n_frames)
    use_lm = lm_fn is not None
    candidates = [c for c in range(vocab_size) if c != BLANK]

    live = [Hypothesis((), ctc_state=scorer.initial_state() if scorer else None)]
    ended: list[Hypothesis] = []
    for step in range(limit + 1):
        prefixes = np.array([[sos] + list(h.tokens) for h in live], dtype=np.int64)
        att_lp, ld_post = att_fn(prefixes)
        lm_lp = lm_fn(prefixes) if use_lm else None
        allowed = [eos] if step == limit else candidates
        pool = []
        for i, h in enumerate(live):
            cache = scorer.extend_all(h.ctc_state) if scorer is not None else None
            for c in allowed:
                if scorer is not None:
                    state, inc = scorer.child(h.ctc_state, c, *cache)
                    ctc = h.ctc + inc
                else:
                    state, ctc = None, 0.0
                att = h.att + float(att_lp[i, c])
                lm = h.lm + float(lm_lp[i, c]) if use_lm else 0.0
                toks = h.tokens + (c,)
                post = h.ld_posteriors + [ld_post[i]] if ld_post is not None else h.ld_posteriors
                pool.append(Hypothesis(toks, ctc, att, lm, combine(cfg, ctc, att, lm, len(toks)),
                                       c == eos, state, post))
        pool.sort(key=Hypothesis.key)
        kept = pool[: cfg.beam]
        ended.extend(h for h in kept if h.finished)
        live = [h for h in kept if not h.finished]
        if not live:
            break
        # every score increment is <= 0, so once an ended hypothesis beats all
        # live ones nothing can overtake it (not true with a positive length bonus)
        if ended and cfg.length_penalty <= 0:
            if max(h.score for h in ended) > live[0].score:
                break
    if not ended:
        best = min(live, key=Hypothesis.key)
        return DecodeResult(best, [best], [])
    ended.sort(key=Hypothesis.key)
    return DecodeResult(ended[0], ended[: nbest or cfg.beam], ended)


def exhaustive_search(att_fn, ctc_log_probs, cfg: DecodeConfig, vocab_size: int, sos: int, eos: int,
                      lm_fn=None) -> list:
    """Score every sequence of up to ``cfg.max_len`` tokens plus eos (oracle for tests and toy decoding).

    Scores accumulate in the same order as :func:`beam_search`, so equal
    hypotheses get bit-identical totals.
    """
    if cfg.max_len is None:
        raise UsageError("exhaustive_search needs an explicit max_len")
    scorer = CtcPrefixScorer(ctc_log_probs, eos=eos) if ctc_log_probs is not None else None
    labels = [c for c in range(vocab_size) if c not in (BLANK, eos)]
    out = []
    for n in range(cfg.max_len + 1):
        for seq in itertools.product(labels, repeat=n):
            full = list(seq) + [eos]
            prefixes = [np.array([[sos] + full[:k]], dtype=np.int64) for k in range(len(full))]
            ctc = att = lm = 0.0
            state = scorer.initial_state() if scorer else None
            for k, c in enumerate(full):
                if scorer is not None:
                    state, inc = scorer.score(state, c)
                    ctc += inc
                att_lp, _ = att_fn(prefixes[k])
                att += float(att_lp[0, c])
                if lm_fn is not None:
                    lm += float(lm_fn(prefixes[k])[0, c])
            toks = tuple(full)
            out.append(Hypothesis(toks, ctc, att, lm, combine(cfg, ctc, att, lm, len(toks)), True))
    out.sort(key=Hypothesis.key)
    return out


# -- model front-end -------------------------------------------------------------------


def model_scorers(model, x):
    """Encode one utterance; returns ``(att_fn, ctc_log_probs)`` for :func:`beam_search`."""
    x = np.asarray(x, dtype=np.float64)
    enc = model.encoder_side(x[None], [len(x)])
    t1 = int(enc["h_lengths"][0])
    ctc_lp = enc["ctc_log_probs"].data[0, :t1]

    def att_fn(prefixes):
        return model.decoder_step(enc, prefixes)

    return att_fn, ctc_lp


def joint_beam_search(model, x, cfg: DecodeConfig = DecodeConfig(), lm=None, vocab=None, nbest: int = 0):
    """Decode one normalized ``(T, F)`` utterance.

    With an LD decoder and decoder bias, every extension first runs the LD
    decoder on the prefix and feeds its language posteriors into the ASR
    decoder's token embeddings (handled by ``model.decoder_step``).
    """
    lm_fn = None
    if lm is not None:
        if lm.cfg.vocab_size != model.cfg.vocab_size:
            raise ConfigError(f"LM vocab size {lm.cfg.vocab_size} != model vocab size {model.cfg.vocab_size}")
        if vocab is not None:
            from csasr.lm import check_vocab

            check_vocab(lm, vocab)
        lm_fn = lm.next_log_probs
    att_fn, ctc_lp = model_scorers(model, x)
    return beam_search(att_fn, ctc_lp, cfg, model.cfg.vocab_size, model.sos, model.eos, lm_fn, nbest)


def strip(tokens, eos: int) -> list:
    return [t for t in tokens if t != eos]


def nbest_lines(utt_id: str, result: DecodeResult, eos: int) -> list[str]:
    lines = []
    for rank, h in enumerate(result.nbest, 1):
        toks = " ".join(map(str, strip(h.tokens, eos)))
        lines.append(f"{utt_id} {rank} {h.score!r} {h.ctc!r} {h.att!r} {h.lm!r} {toks}".rstrip())
    return lines
