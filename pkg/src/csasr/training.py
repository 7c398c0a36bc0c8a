"""Joint CTC / attention / language-diarization training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from csasr.ctc import ctc_greedy_decode, ctc_loss_batch
from csasr.data import LANG_EOS, Corpus, Vocab, derive_lang_labels, derive_rng
from csasr.errors import ConfigError, NumericError, TrainingDiverged, UsageError
from csasr.metrics import corpus_mer
from csasr.model.checkpoint import save_model
from csasr.model.layers import Context
from csasr.numerics import ops
from csasr.numerics.tensor import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    ctc_weight: float = 0.3
    ld_weight: float = 0.8
    label_smoothing: float = 0.1
    peak_lr: float = 2e-3
    warmup_steps: int = 800
    batch_size: int = 16
    epochs: int = 20
    augment: bool = True
    time_mask: float = 0.1
    feature_mask: float = 0.2
    average_top_k: int = 10
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError("ctc_weight (alpha) must lie in [0, 1]")
        if self.ld_weight < 0:
            raise ConfigError("ld_weight (beta) must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.average_top_k < 1:
            raise ConfigError("average_top_k must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


# -- losses -----------------------------------------------------------------------


def label_smoothed_ce(log_probs: Tensor, targets, eps: float, keep=None) -> Tensor:
    """Cross entropy against ``1 - eps`` on the target and ``eps / (C - 1)`` elsewhere,
    averaged over the unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    n_cls = log_probs.shape[-1]
    keep = np.ones(targets.shape, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise UsageError("label_smoothed_ce: every position is masked")
    q = np.full(log_probs.shape, eps / (n_cls - 1))
    np.put_along_axis(q, targets[..., None], 1.0 - eps, axis=-1)
    q *= keep[..., None]
    return ops.scale(ops.sum(ops.mul(log_probs, Tensor(q))), -1.0 / n)


@dataclass
class Batch:
    x: np.ndarray
    lengths: np.ndarray
    ys_in: np.ndarray
    ys_keep: np.ndarray
    ys_out: np.ndarray
    ld_out: np.ndarray
    tokens: list
    ids: list


def make_batch(utts, vocab: Vocab, aug_rng=None, cfg: Optional[TrainConfig] = None) -> Batch:
    b = len(utts)
    f = utts[0].x.shape[1]
    lengths = np.array([u.n_frames for u in utts])
    x = np.zeros((b, lengths.max(), f))
    for i, u in enumerate(utts):
        xi = u.x
        if aug_rng is not None and cfg is not None and cfg.augment:
            xi = augment(xi, aug_rng, cfg.time_mask, cfg.feature_mask)
        x[i, : len(xi)] = xi
    l_max = max(len(u.tokens) for u in utts) + 1
    ys_in = np.full((b, l_max), vocab.eos, dtype=np.int64)
    ys_out = np.full((b, l_max), vocab.eos, dtype=np.int64)
    ld_out = np.full((b, l_max), LANG_EOS, dtype=np.int64)
    keep = np.zeros((b, l_max), dtype=bool)
    for i, u in enumerate(utts):
        n = len(u.tokens)
        ys_in[i, : n + 1] = [vocab.sos] + list(u.tokens)
        ys_out[i, : n + 1] = list(u.tokens) + [vocab.eos]
        ld_out[i, : n + 1] = derive_lang_labels(u.tokens, vocab)
        keep[i, : n + 1] = True
    return Batch(x, lengths, ys_in, keep, ys_out, ld_out, [list(u.tokens) for u in utts], [u.id for u in utts])


def augment(x: np.ndarray, rng, time_frac: float, feat_frac: float) -> np.ndarray:
    """One time mask (<= time_frac of T) and one feature mask (<= feat_frac of F), filled with 0."""
    x = x.copy()
    t, f = x.shape
    wt = int(rng.integers(0, int(time_frac * t) + 1))
    t0 = int(rng.integers(0, t - wt + 1))
    x[t0:t0 + wt] = 0.0
    wf = int(rng.integers(0, int(feat_frac * f) + 1))
    f0 = int(rng.integers(0, f - wf + 1))
    x[:, f0:f0 + wf] = 0.0
    return x


def joint_loss(fo, batch: Batch, cfg: TrainConfig, uses_ld: bool):
    """``alpha * ctc + (1 - alpha) * att + beta * ld``; returns ``(loss, terms)``.

    CTC is normalised per target token so all three terms are per-token
    averages. The LD term is dropped when the model has no LD decoder.
    """
    alpha, beta, eps = cfg.ctc_weight, cfg.ld_weight, cfg.label_smoothing
    if uses_ld and beta > 0 and fo.ld_log_probs is None:
        raise ConfigError("LD loss requested but the forward pass produced no LD outputs")
    ctc_all, feasible = ctc_loss_batch(fo.ctc_log_probs, fo.h_lengths, batch.tokens)
    n_tok = sum(len(t) for t, ok in zip(batch.tokens, feasible) if ok)
    l_ctc = ops.scale(ops.sum(ctc_all), 1.0 / max(n_tok, 1))
    l_att = label_smoothed_ce(fo.asr_log_probs, batch.ys_out, eps, batch.ys_keep)
    terms = {"ctc": l_ctc, "att": l_att}
    if uses_ld and fo.ld_log_probs is not None:
        terms["ld"] = label_smoothed_ce(fo.ld_log_probs, batch.ld_out, eps, batch.ys_keep)
    return weighted_total(terms, alpha, beta), terms


def weighted_total(terms: dict, alpha: float, beta: float) -> Tensor:
    """``alpha * ctc + (1 - alpha) * att`` plus ``beta * ld`` when an LD term exists and beta > 0."""
    total = ops.add(ops.scale(terms["ctc"], alpha), ops.scale(terms["att"], 1.0 - alpha))
    if "ld" in terms and beta > 0:
        total = ops.add(total, ops.scale(terms["ld"], beta))
    return total


# -- optimisation -------------------------------------------------------------------


class Adam:
    def __init__(self, params, betas=(0.9, 0.98), eps=1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def warmup_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` then inverse-square-root decay."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params:
            p.grad = p.grad * s
    return norm


# -- evaluation -----------------------------------------------------------------------


def evaluate(model, utts, vocab: Vocab, cfg: TrainConfig, batch_size: int = 32) -> dict:
    """Teacher-forced dev loss terms, CTC-greedy MER and token-level LD accuracy."""
    sums = {"loss": 0.0, "ctc": 0.0, "att": 0.0, "ld": 0.0}
    pairs, correct, total, count = [], 0, 0, 0
    uses_ld = model.cfg.flags.uses_ld
    for i in range(0, len(utts), batch_size):
        chunk = utts[i:i + batch_size]
        batch = make_batch(chunk, vocab)
        fo = model.forward(batch.x, batch.lengths, batch.ys_in, batch.ys_keep)
        loss, terms = joint_loss(fo, batch, cfg, uses_ld)
        w = len(chunk)
        sums["loss"] += loss.item() * w
        for k, t in terms.items():
            sums[k] += t.item() * w
        count += w
        for b, u in enumerate(chunk):
            t1 = fo.h_lengths[b]
            pairs.append((ctc_greedy_decode(fo.ctc_log_probs.data[b, :t1]), u.tokens))
        if fo.ld_log_probs is not None:
            pred = fo.ld_log_probs.data.argmax(-1)
            for b, u in enumerate(chunk):
                n = len(u.tokens)
                ref = batch.ld_out[b, :n]
                correct += int((pred[b, :n] == ref).sum())
                total += n
    out = {k: v / count for k, v in sums.items()}
    out["mer"] = corpus_mer(pairs, vocab.lang_of).mer
    out["ld_acc"] = correct / total if total else float("nan")
    if not uses_ld:
        out["ld"] = float("nan")
    return out


# -- training loop ----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    dev: dict
    params: dict
    path: Optional[Path] = None

    def log_line(self) -> str:
        d = self.dev
        vals = [d["loss"], d["mer"], d["ld_acc"], d["ctc"], d["att"], d["ld"]]
        return f"{self.epoch} " + " ".join("nan" if math.isnan(v) else f"{v:.6f}" for v in vals)


@dataclass
class TrainResult:
    history: list
    averaged: dict
    log_lines: list = field(default_factory=list)


def snapshot(model) -> dict:
    return {name: t.data.copy() for name, t in model.named_parameters()}


def train(model, corpus: Corpus, cfg: TrainConfig, out_dir=None, buffers=None, keep_top_k_files: bool = False):
    """Train on ``corpus['train']`` (already normalized) and validate on ``corpus['dev']``.

    Writes ``epoch_XXX.ckpt`` and appends ``metrics.log`` under ``out_dir``
    when given. Deterministic for a fixed (seed, config, corpus).
    """
    vocab = corpus.vocab
    if model.cfg.vocab_size != vocab.size:
        raise ConfigError(f"model vocab {model.cfg.vocab_size} != corpus vocab {vocab.size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    shuffle_rng = derive_rng(cfg.seed, "train.shuffle")
    drop_rng = derive_rng(cfg.seed, "train.dropout")
    aug_rng = derive_rng(cfg.seed, "train.augment")
    params = model.parameters()
    opt = Adam(params)
    train_utts = corpus["train"]
    uses_ld = model.cfg.flags.uses_ld
    history: list[EpochRecord] = []
    lines = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_utts))
        try:
            for i in range(0, len(order), cfg.batch_size):
                batch = make_batch([train_utts[j] for j in order[i:i + cfg.batch_size]], vocab, aug_rng, cfg)
                for p in params:
                    p.grad = None
                with Tape() as tape:
                    fo = model.forward(batch.x, batch.lengths, batch.ys_in, batch.ys_keep,
                                       ctx=Context(drop_rng, model.cfg.dropout))
                    loss, _ = joint_loss(fo, batch, cfg, uses_ld)
                tape.backward(loss)
                clip_gradients(params, cfg.grad_clip)
                step += 1
                opt.step(warmup_lr(step, cfg.peak_lr, cfg.warmup_steps))
                for p in params:
                    if not np.isfinite(p.data).all():
                        raise NumericError("adam: non-finite parameter after update")
        except NumericError as exc:
            last = history[-1].path if history else None
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last) from exc
        dev = evaluate(model, corpus["dev"], vocab, cfg)
        rec = EpochRecord(epoch, dev, snapshot(model))
        if out is not None:
            rec.path = out / f"epoch_{epoch:03d}.ckpt"
            save_model(model, rec.path, meta={"epoch": epoch, "dev_loss": repr(dev["loss"])}, buffers=buffers)
            with open(out / "metrics.log", "a") as fh:
                fh.write(rec.log_line() + "\n")
        history.append(rec)
        lines.append(rec.log_line())
        logger.info("epoch %s", rec.log_line())
        if keep_top_k_files and out is not None:
            _prune(history, cfg.average_top_k)
    averaged = average_checkpoints(history, cfg.average_top_k)
    return TrainResult(history, averaged, lines)


def _prune(history, k):
    best = {id(r) for r in sorted(history, key=lambda r: (r.dev["loss"], r.epoch))[:k]}
    for r in history:
        if id(r) not in best and r.path is not None and r.path.exists():
            r.path.unlink()


def best_records(history, k: int):
    if k > len(history):
        logger.warning("average_checkpoints: k=%d > %d available; using all", k, len(history))
        k = len(history)
    return sorted(history, key=lambda r: (r.dev["loss"], r.epoch))[:k]


def average_checkpoints(history, k: int) -> dict:
    """Parameter-wise mean of the ``k`` best checkpoints by dev joint loss."""
    if not history:
        raise UsageError("average_checkpoints: empty history")
    chosen = best_records(history, k)
    return {n: np.mean([r.params[n] for r in chosen], axis=0) for n in chosen[0].params}


def load_averaged(model, averaged: dict) -> None:
    for name, t in model.named_parameters():
        t.data = averaged[name].copy()
