"""Hybrid CTC/attention model with frame- and token-level language posterior biases."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from csasr.errors import ConfigError, ShapeError, UsageError
from csasr.model.config import ModelConfig
from csasr.model.layers import (
    EVAL,
    ConformerBlock,
    Context,
    DecoderBlock,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    Subsampler,
    add_positions,
    initialize,
)
from csasr.numerics import ops
from csasr.numerics.tensor import Tensor


@dataclass
class ForwardOutput:
    h: Tensor
    h_lengths: np.ndarray
    ctc_log_probs: Tensor
    asr_log_probs: Optional[Tensor] = None
    h_prime: Optional[Tensor] = None
    frame_lang_posteriors: Optional[Tensor] = None
    ld_log_probs: Optional[Tensor] = None
    ld_posteriors: Optional[Tensor] = None
    # last LD-decoder layer cross-attention, (B, heads, L, T1)
    ld_attention: Optional[np.ndarray] = None


def causal_keep(ys_keep: np.ndarray) -> np.ndarray:
    """``(B, L)`` token keep-mask -> ``(B, L, L)`` causal self-attention mask."""
    length = ys_keep.shape[1]
    tri = np.tril(np.ones((length, length), dtype=bool))
    return tri[None] & ys_keep[:, None, :]


class TransformerDecoder(Module):
    def __init__(self, cfg: ModelConfig, layers: int, n_out: int):
        super().__init__()
        d = cfg.model_dim
        self.blocks = [self.child(f"block{i}", DecoderBlock(d, cfg.heads, cfg.ffn_dim)) for i in range(layers)]
        self.norm = self.child("norm", LayerNorm(d))
        self.out = self.child("out", Linear(d, n_out))

    def __call__(self, x, ys_keep, memory, mem_keep, ctx):
        self_keep = causal_keep(ys_keep)
        probs = None
        for blk in self.blocks:
            x, probs = blk(x, self_keep, memory, mem_keep[:, None, :], ctx)
        return self.out(self.norm(x)), probs


class IlbModel(Module):
    """Parameter container plus the bias wiring for every ablation preset.

    Only the modules a configuration actually uses are created, so the
    parameter count is a function of the config alone.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d, v, vld = cfg.model_dim, cfg.vocab_size, cfg.lang_vocab_size
        fl = cfg.flags
        self.subsampler = self.child("subsampler", Subsampler(cfg.feature_dim, d, cfg.subsample_factor))
        self.encoder = [
            self.child(f"encoder{i}", ConformerBlock(d, cfg.heads, cfg.ffn_dim, cfg.conv_kernel))
            for i in range(cfg.encoder_layers)
        ]
        self.encoder_norm = self.child("encoder_norm", LayerNorm(d))
        self.lid = self.child("lid", Linear(d, vld)) if fl.encoder_bias else None
        self.memory_proj = self.child("memory_proj", Linear(d + vld, d)) if fl.encoder_bias else None
        self.ctc_head = self.child("ctc_head", Linear(d + vld if fl.ctc_bias else d, v))
        self.embed = self.child("embed", Embedding(v, d))
        self.ld_decoder = (
            self.child("ld_decoder", TransformerDecoder(cfg, cfg.ld_decoder_layers, vld)) if fl.uses_ld else None
        )
        self.token_proj = self.child("token_proj", Linear(d + vld, d)) if fl.decoder_bias else None
        self.asr_decoder = self.child("asr_decoder", TransformerDecoder(cfg, cfg.decoder_layers, v))
        initialize(self, seed)

    @property
    def sos(self) -> int:
        return self.cfg.vocab_size - 1

    eos = sos

    # -- encoder side -------------------------------------------------------

    def encode(self, x, lengths=None, ctx: Context = EVAL):
        """``(B, T, F)`` features (or a single ``(T, F)``) -> ``H`` of shape ``(B, T1, D)``."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        b, t, f = x.shape
        if f != self.cfg.feature_dim:
            raise ShapeError(f"encode: feature dim {f} != configured {self.cfg.feature_dim}")
        lengths = np.full(b, t) if lengths is None else np.asarray(lengths)
        factor = self.cfg.subsample_factor
        if lengths.min() < 2 * factor:
            raise ShapeError(f"encode: input of {int(lengths.min())} frames is shorter than {2 * factor}")
        h_lengths = np.array([Subsampler.out_length(int(n), factor) for n in lengths])
        h = ctx.dropout(add_positions(self.subsampler(x)))
        keep = np.arange(h.shape[1])[None, :] < h_lengths[:, None]
        for blk in self.encoder:
            h = blk(h, keep, ctx)
        return self.encoder_norm(h), h_lengths

    def frame_bias(self, h: Tensor):
        """``H -> (H', p(l_t | h_t))`` with ``H' = concat(H, posterior)``."""
        if self.lid is None:
            raise ConfigError("frame_bias requires encoder_bias")
        post = ops.softmax(self.lid(h))
        return ops.concat_last_dim([h, post]), post

    # -- decoder side -------------------------------------------------------

    def _check_prefix(self, ys_in):
        ys_in = np.asarray(ys_in, dtype=np.int64)
        if ys_in.ndim == 1:
            ys_in = ys_in[None]
        if ys_in.shape[1] == 0:
            raise UsageError("decoder prefix is empty; it must begin with sos")
        if (ys_in[:, 0] != self.sos).any():
            raise UsageError("decoder prefix must begin with sos")
        return ys_in

    def ld_decode(self, ys_in, memory: Tensor, mem_keep, ys_keep=None, ctx: Context = EVAL):
        """Token-level language posteriors ``p(l_n | w_<n, X)`` for every prefix position."""
        if self.ld_decoder is None:
            raise ConfigError("this configuration has no LD decoder")
        ys_in = self._check_prefix(ys_in)
        ys_keep = np.ones(ys_in.shape, dtype=bool) if ys_keep is None else ys_keep
        x = ctx.dropout(add_positions(self.embed(ys_in)))
        logits, attn = self.ld_decoder(x, ys_keep, memory, mem_keep, ctx)
        return ops.log_softmax(logits), ops.softmax(logits), attn

    def token_bias(self, w: Tensor, posteriors: Tensor) -> Tensor:
        """``W' = concat(W, p(l | .))`` projected back to D."""
        if self.token_proj is None:
            raise ConfigError("token_bias requires decoder_bias")
        if w.shape[:-1] != posteriors.shape[:-1]:
            raise ShapeError(f"token_bias: embeddings {list(w.shape)} vs posteriors {list(posteriors.shape)}")
        return self.token_proj(ops.concat_last_dim([w, posteriors]))

    def asr_decode(self, ys_in, memory: Tensor, mem_keep, ld_posteriors=None, ys_keep=None, ctx=EVAL):
        ys_in = self._check_prefix(ys_in)
        ys_keep = np.ones(ys_in.shape, dtype=bool) if ys_keep is None else ys_keep
        w = self.embed(ys_in)
        if self.token_proj is not None:
            if ld_posteriors is None:
                raise UsageError("decoder_bias: run ld_decode on the same prefix first")
            w = self.token_bias(w, ld_posteriors)
        x = ctx.dropout(add_positions(w))
        logits, _ = self.asr_decoder(x, ys_keep, memory, mem_keep, ctx)
        return ops.log_softmax(logits)

    # -- whole model --------------------------------------------------------

    def encoder_side(self, x, lengths=None, ctx: Context = EVAL):
        """Run the encoder and derive the CTC input and the decoders' memory."""
        h, h_lengths = self.encode(x, lengths, ctx)
        out = {"h": h, "h_lengths": h_lengths, "h_prime": None, "frame_post": None}
        mem_keep = np.arange(h.shape[1])[None, :] < h_lengths[:, None]
        if self.lid is not None:
            h_prime, post = self.frame_bias(h)
            out.update(h_prime=h_prime, frame_post=post, memory=self.memory_proj(h_prime))
            ctc_in = h_prime if self.cfg.flags.ctc_bias else h
        else:
            out["memory"] = h
            ctc_in = h
        out["ctc_log_probs"] = ops.log_softmax(self.ctc_head(ctc_in))
        out["mem_keep"] = mem_keep
        return out

    def forward(self, x, lengths, ys_in, ys_keep=None, ctx: Context = EVAL) -> ForwardOutput:
        enc = self.encoder_side(x, lengths, ctx)
        ys_in = self._check_prefix(ys_in)
        ys_keep = np.ones(ys_in.shape, dtype=bool) if ys_keep is None else ys_keep
        fo = ForwardOutput(
            h=enc["h"], h_lengths=enc["h_lengths"], ctc_log_probs=enc["ctc_log_probs"],
            h_prime=enc["h_prime"], frame_lang_posteriors=enc["frame_post"],
        )
        ld_post = None
        if self.ld_decoder is not None:
            fo.ld_log_probs, ld_post, fo.ld_attention = self.ld_decode(
                ys_in, enc["memory"], enc["mem_keep"], ys_keep, ctx
            )
            fo.ld_posteriors = ld_post
        fo.asr_log_probs = self.asr_decode(ys_in, enc["memory"], enc["mem_keep"], ld_post, ys_keep, ctx)
        return fo

    def forward_all(self, utterance, ctx: Context = EVAL) -> ForwardOutput:
        """Teacher-forced forward pass of a single (normalized) utterance."""
        ys_in = [self.sos] + list(utterance.tokens)
        return self.forward(utterance.x[None], [len(utterance.x)], [ys_in], ctx=ctx)

    def decoder_step(self, enc: dict, prefixes) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Next-token log distribution after each prefix (inference, batch of one utterance).

        ``prefixes`` is ``(n, L)``; returns ``(n, V)`` ASR log-probs and the
        ``(n, V_ld)`` language posteriors of the next token (or None).
        """
        prefixes = self._check_prefix(prefixes)
        n = prefixes.shape[0]
        memory = Tensor(np.repeat(enc["memory"].data, n, axis=0))
        mem_keep = np.repeat(enc["mem_keep"], n, axis=0)
        ld_post = None
        if self.ld_decoder is not None:
            _, ld_post, _ = self.ld_decode(prefixes, memory, mem_keep)
        logp = self.asr_decode(prefixes, memory, mem_keep, ld_post if self.token_proj is not None else None)
        return logp.data[:, -1], (ld_post.data[:, -1] if ld_post is not None else None)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())
