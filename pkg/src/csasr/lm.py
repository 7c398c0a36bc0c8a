"""Causal transformer language model over the ASR token vocabulary, used for shallow fusion."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from csasr.data import Vocab, derive_rng
from csasr.errors import ConfigError, UsageError
from csasr.model.checkpoint import load_parameters, read_checkpoint, write_checkpoint
from csasr.model.ilb import causal_keep
from csasr.model.layers import EVAL, Context, DecoderBlock, Embedding, LayerNorm, Linear, Module, add_positions, initialize
from csasr.numerics import ops
from csasr.numerics.tensor import Tape
from csasr.training import Adam, clip_gradients, label_smoothed_ce, warmup_lr

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 43
    model_dim: int = 64
    heads: int = 4
    layers: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    vocab_fingerprint: str = ""

    def to_items(self) -> dict:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_items(cls, items: dict) -> "LmConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in items:
                kw[f.name] = type(f.default)(items[f.name])
        return cls(**kw)


class TransformerLM(Module):
    def __init__(self, cfg: LmConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.embed = self.child("embed", Embedding(cfg.vocab_size, d))
        self.blocks = [
            self.child(f"block{i}", DecoderBlock(d, cfg.heads, cfg.ffn_dim, cross=False)) for i in range(cfg.layers)
        ]
        self.norm = self.child("norm", LayerNorm(d))
        self.out = self.child("out", Linear(d, cfg.vocab_size))
        initialize(self, seed)

    @property
    def sos(self) -> int:
        return self.cfg.vocab_size - 1

    def __call__(self, ys_in, ys_keep=None, ctx: Context = EVAL):
        """``(B, L)`` prefixes starting with sos -> ``(B, L, V)`` next-token log-probs."""
        ys_in = np.asarray(ys_in, dtype=np.int64)
        if ys_in.ndim == 1:
            ys_in = ys_in[None]
        if ys_in.shape[1] == 0 or (ys_in[:, 0] != self.sos).any():
            raise UsageError("LM prefix must begin with sos")
        ys_keep = np.ones(ys_in.shape, dtype=bool) if ys_keep is None else ys_keep
        x = ctx.dropout(add_positions(self.embed(ys_in)))
        keep = causal_keep(ys_keep)
        for blk in self.blocks:
            x, _ = blk(x, keep, None, None, ctx)
        return ops.log_softmax(self.out(self.norm(x)))

    def next_log_probs(self, prefixes) -> np.ndarray:
        """Last-position log distribution for each prefix, ``(n, V)``."""
        return self(prefixes).data[:, -1]


def check_vocab(lm: TransformerLM, vocab: Vocab) -> None:
    if lm.cfg.vocab_size != vocab.size or lm.cfg.vocab_fingerprint != vocab.fingerprint():
        raise ConfigError(
            f"LM vocab (size {lm.cfg.vocab_size}, hash {lm.cfg.vocab_fingerprint or '-'}) does not match "
            f"the ASR vocab (size {vocab.size}, hash {vocab.fingerprint()})"
        )


def _batches(seqs, vocab: Vocab, size: int):
    for i in range(0, len(seqs), size):
        chunk = seqs[i:i + size]
        length = max(len(s) for s in chunk) + 1
        ys_in = np.full((len(chunk), length), vocab.eos, dtype=np.int64)
        ys_out = np.full_like(ys_in, vocab.eos)
        keep = np.zeros(ys_in.shape, dtype=bool)
        for b, s in enumerate(chunk):
            ys_in[b, : len(s) + 1] = [vocab.sos] + list(s)
            ys_out[b, : len(s) + 1] = list(s) + [vocab.eos]
            keep[b, : len(s) + 1] = True
        yield ys_in, ys_out, keep


def perplexity(lm: TransformerLM, seqs, vocab: Vocab, batch_size: int = 64) -> float:
    nll, count = 0.0, 0
    for ys_in, ys_out, keep in _batches(seqs, vocab, batch_size):
        lp = lm(ys_in, keep).data
        picked = np.take_along_axis(lp, ys_out[..., None], axis=-1)[..., 0]
        nll -= float(picked[keep].sum())
        count += int(keep.sum())
    return math.exp(nll / count)


def unigram_perplexity(train_seqs, eval_seqs, vocab: Vocab) -> float:
    """Add-one unigram baseline over tokens plus eos, fit on ``train_seqs``."""
    counts = np.ones(vocab.size)
    for s in train_seqs:
        np.add.at(counts, list(s) + [vocab.eos], 1)
    logp = np.log(counts / counts.sum())
    total = [logp[t] for s in eval_seqs for t in list(s) + [vocab.eos]]
    return math.exp(-float(np.mean(total)))


def train_lm(lm: TransformerLM, train_seqs, vocab: Vocab, epochs: int = 10, batch_size: int = 32,
             peak_lr: float = 2e-3, warmup_steps: int = 200, seed: int = 0, label_smoothing: float = 0.0,
             dev_seqs=None):
    """Cross-entropy training on transcripts; returns per-epoch dev perplexities (if dev given)."""
    check_vocab(lm, vocab)
    shuffle_rng = derive_rng(seed, "lm.shuffle")
    drop_rng = derive_rng(seed, "lm.dropout")
    params = lm.parameters()
    opt = Adam(params)
    step = 0
    history = []
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(train_seqs))
        shuffled = [train_seqs[i] for i in order]
        for ys_in, ys_out, keep in _batches(shuffled, vocab, batch_size):
            for p in params:
                p.grad = None
            with Tape() as tape:
                lp = lm(ys_in, keep, Context(drop_rng, lm.cfg.dropout))
                loss = label_smoothed_ce(lp, ys_out, label_smoothing, keep)
            tape.backward(loss)
            clip_gradients(params, 5.0)
            step += 1
            opt.step(warmup_lr(step, peak_lr, warmup_steps))
        if dev_seqs is not None:
            ppl = perplexity(lm, dev_seqs, vocab)
            history.append(ppl)
            logger.info("lm epoch %d dev_ppl %.4f", epoch, ppl)
    return history


def save_lm(lm: TransformerLM, path, meta=None) -> None:
    write_checkpoint(path, lm.cfg.to_items(), {n: t.data for n, t in lm.named_parameters()}, meta)


def load_lm(path) -> TransformerLM:
    items, params, _, _ = read_checkpoint(path)
    if "encoder_layers" in items:
        raise ConfigError(f"{path} is an ASR model checkpoint, not an LM")
    lm = TransformerLM(LmConfig.from_items(items))
    load_parameters(lm, params)
    return lm
