"""Connectionist temporal classification: loss, greedy decoding, prefix scoring.

Class index 0 is the blank. All recursions run in the log domain; "minus
infinity" is the finite sentinel ``NEG`` so arithmetic stays total.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from csasr.errors import ShapeError, UsageError
from csasr.numerics.tensor import Tensor, active_tape

logger = logging.getLogger(__name__)

NEG = -1e30
BLANK = 0


def _lae(a, b):
    return np.maximum(np.logaddexp(a, b), NEG)


def _lae3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    out = m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))
    return np.maximum(out, NEG)


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


class CtcLoss(Tensor):
    """Scalar CTC loss carrying a feasibility flag."""

    __slots__ = ("feasible",)


def _forward_backward(lp: np.ndarray, lengths: np.ndarray, targets: list[np.ndarray], blank: int):
    """Batched alpha/beta recursions.

    Returns per-utterance log-likelihoods and the gradient of the summed
    negative log-likelihood w.r.t. ``lp`` (shape ``(B, T, C)``).
    """
    bsz, t_max, _ = lp.shape
    n_max = max((len(t) for t in targets), default=0)
    s_max = 2 * n_max + 1
    ext = np.full((bsz, s_max), blank, dtype=np.int64)
    s_len = np.empty(bsz, dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
        s_len[b] = 2 * len(tgt) + 1
    state_idx = np.arange(s_max)
    valid_state = state_idx[None, :] < s_len[:, None]
    skip = np.zeros((bsz, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    b_idx = np.arange(bsz)[:, None]
    lpe = lp[b_idx[:, :, None], np.arange(t_max)[None, :, None], ext[:, None, :]]  # (B, T, S)
    lpe = np.where(valid_state[:, None, :], lpe, NEG)

    alpha = np.full((bsz, t_max, s_max), NEG)
    alpha[:, 0, 0] = lpe[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = lpe[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        s1 = np.concatenate([np.full((bsz, 1), NEG), prev[:, :-1]], axis=1)
        s2 = np.concatenate([np.full((bsz, 2), NEG), prev[:, :-2]], axis=1)[:, :s_max]
        s2 = np.where(skip, s2, NEG)
        alpha[:, t] = np.maximum(_lae3(prev, s1, s2) + lpe[:, t], NEG)

    last_t = lengths - 1
    a_last = alpha[np.arange(bsz), last_t]  # (B, S)
    end1 = a_last[np.arange(bsz), s_len - 1]
    end2 = np.where(s_len > 1, a_last[np.arange(bsz), np.maximum(s_len - 2, 0)], NEG)
    log_like = _lae(end1, end2)

    beta = np.full((bsz, t_max, s_max), NEG)
    for t in range(t_max - 1, -1, -1):
        nxt = beta[:, t + 1] if t + 1 < t_max else np.full((bsz, s_max), NEG)
        n1 = np.concatenate([nxt[:, 1:], np.full((bsz, 1), NEG)], axis=1)
        skip_next = np.concatenate([skip[:, 2:], np.zeros((bsz, 2), dtype=bool)], axis=1)[:, :s_max]
        n2 = np.concatenate([nxt[:, 2:], np.full((bsz, 2), NEG)], axis=1)[:, :s_max]
        n2 = np.where(skip_next, n2, NEG)
        rec = np.maximum(_lae3(nxt, n1, n2) + lpe[:, t], NEG)
        init = np.full((bsz, s_max), NEG)
        init[np.arange(bsz), s_len - 1] = lpe[np.arange(bsz), t, s_len - 1]
        has2 = s_len > 1
        init[np.arange(bsz)[has2], s_len[has2] - 2] = lpe[np.arange(bsz)[has2], t, s_len[has2] - 2]
        beta[:, t] = np.where((t == last_t)[:, None], init, np.where((t < last_t)[:, None], rec, NEG))

    occ_log = alpha + beta - lpe - log_like[:, None, None]
    in_range = (np.arange(t_max)[None, :] < lengths[:, None])[:, :, None] & valid_state[:, None, :]
    occ = np.where(in_range, np.exp(np.minimum(occ_log, 0.0)), 0.0)
    grad = np.zeros_like(lp)
    t_idx = np.broadcast_to(np.arange(t_max)[None, :, None], occ.shape)
    c_idx = np.broadcast_to(ext[:, None, :], occ.shape)
    bb = np.broadcast_to(np.arange(bsz)[:, None, None], occ.shape)
    np.add.at(grad, (bb, t_idx, c_idx), -occ)
    return log_like, grad


def ctc_loss_batch(log_probs: Tensor, input_lengths, targets: Sequence[Sequence[int]], blank: int = BLANK):
    """Per-utterance CTC negative log-likelihoods.

    ``log_probs`` is ``(B, T, C)``. Returns ``(losses, feasible)`` where
    ``losses`` is a ``(B,)`` tensor; infeasible utterances contribute 0 with
    zero gradient and are marked False in ``feasible``.
    """
    lp = log_probs.data
    if lp.ndim != 3:
        raise ShapeError(f"ctc_loss: log_probs must be (B, T, C), got {list(lp.shape)}")
    bsz, t_max, n_cls = lp.shape
    lengths = np.asarray(input_lengths, dtype=np.int64)
    if lengths.shape != (bsz,) or len(targets) != bsz:
        raise ShapeError("ctc_loss: lengths/targets do not match the batch size")
    if (lengths < 1).any() or (lengths > t_max).any():
        raise ShapeError(f"ctc_loss: input lengths {lengths.tolist()} outside [1, {t_max}]")
    tgts = [np.asarray(t, dtype=np.int64) for t in targets]
    for t in tgts:
        if t.size and (t.min() < 1 or t.max() >= n_cls or (t == blank).any()):
            raise ShapeError(f"ctc_loss: target ids must lie in [1, {n_cls - 1}]")
    feasible = np.array([lengths[b] >= min_frames(tgts[b]) for b in range(bsz)])
    if not feasible.all():
        logger.warning("ctc_loss: %d infeasible utterance(s) skipped", int((~feasible).sum()))
    losses = np.zeros(bsz)
    grad = np.zeros_like(lp)
    idx = np.flatnonzero(feasible)
    if idx.size:
        ll, g = _forward_backward(lp[idx], lengths[idx], [tgts[i] for i in idx], blank)
        losses[idx] = -ll
        grad[idx] = g
    out = Tensor(losses)
    tape = active_tape()
    if tape is not None and log_probs.requires_grad:
        tape.record(out, (log_probs,), lambda gout: (grad * gout[:, None, None],))
    return out, feasible


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = BLANK) -> CtcLoss:
    """Negative log of the total probability of all alignments collapsing to ``target``.

    ``log_probs`` is ``(T, C)``. An infeasible target yields +inf, zero
    gradient and ``feasible == False``.
    """
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss: log_probs must be (T, C), got {list(log_probs.shape)}")
    t = log_probs.shape[0]
    batched = Tensor(log_probs.data[None])
    tape = active_tape()
    losses, feasible = ctc_loss_batch(batched, [t], [list(target)], blank)
    ok = bool(feasible[0])
    value = losses.data[0] if ok else np.inf
    out = CtcLoss(np.asarray(value))
    out.feasible = ok
    if tape is not None and log_probs.requires_grad:
        if ok:
            _, g = _forward_backward(log_probs.data[None], np.array([t]), [np.asarray(target, dtype=np.int64)], blank)
            grad = g[0]
        else:
            grad = np.zeros_like(log_probs.data)
        tape.record(out, (log_probs,), lambda gout: (grad * gout,))
    return out


def ctc_greedy_decode(log_probs, blank: int = BLANK) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


@dataclass
class PrefixScoreState:
    """Forward variables of one prefix: log mass ending in a label / in blank at each frame."""

    r_nonblank: np.ndarray
    r_blank: np.ndarray
    last: int
    log_psi: float
    ended: bool = False


class CtcPrefixScorer:
    """Incremental CTC prefix probabilities for joint CTC/attention decoding.

    Summing the increments returned by :meth:`score` along a hypothesis that
    ends in ``eos`` telescopes to ``log p_ctc(W | X)``.
    """

    def __init__(self, log_probs, eos: int, blank: int = BLANK):
        lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs, dtype=np.float64)
        if lp.ndim != 2:
            raise ShapeError(f"prefix scorer: log_probs must be (T, C), got {list(lp.shape)}")
        self.x = lp
        self.blank = blank
        self.eos = eos
        self.n_frames, self.n_cls = lp.shape

    def initial_state(self) -> PrefixScoreState:
        r_b = np.maximum(np.cumsum(self.x[:, self.blank]), NEG)
        return PrefixScoreState(np.full(self.n_frames, NEG), r_b, last=-1, log_psi=0.0)

    def extend_all(self, state: PrefixScoreState):
        """Prefix scores of every one-token extension of ``state``.

        Returns ``(log_psi, r_nonblank, r_blank)`` with shapes ``(C,)``,
        ``(T, C)``, ``(T, C)``. The ``eos`` entry holds the full-sequence
        log-probability of the current prefix; the blank entry is ``NEG``.
        """
        if state.ended:
            raise UsageError("prefix scorer: cannot extend a hypothesis that already ended")
        x, n_t = self.x, self.n_frames
        xb = x[:, self.blank]
        r_n = np.full((n_t, self.n_cls), NEG)
        r_b = np.full((n_t, self.n_cls), NEG)
        r_sum = _lae(state.r_nonblank, state.r_blank)
        phi = np.repeat(r_sum[:, None], self.n_cls, axis=1)
        if state.last >= 0:
            phi[:, state.last] = state.r_blank
        if state.last == -1:
            r_n[0] = x[0]
        log_psi = r_n[0].copy()
        for t in range(1, n_t):
            r_n[t] = np.maximum(_lae(r_n[t - 1], phi[t - 1]) + x[t], NEG)
            r_b[t] = np.maximum(_lae(r_n[t - 1], r_b[t - 1]) + xb[t], NEG)
            log_psi = _lae(log_psi, phi[t - 1] + x[t])
        log_psi[self.eos] = r_sum[-1]
        log_psi[self.blank] = NEG
        return log_psi, r_n, r_b

    def score(self, state: PrefixScoreState, token: int, cache=None):
        """Extend ``state`` by ``token``; returns ``(new_state, incremental log score)``."""
        if token == self.blank or not 0 <= token < self.n_cls:
            raise UsageError(f"prefix scorer: invalid token id {token}")
        log_psi, r_n, r_b = cache if cache is not None else self.extend_all(state)
        return self.child(state, token, log_psi, r_n, r_b)

    def child(self, state, token, log_psi, r_n, r_b):
        inc = float(log_psi[token] - state.log_psi)
        if token == self.eos:
            new = PrefixScoreState(state.r_nonblank, state.r_blank, state.last, float(log_psi[token]), ended=True)
        else:
            new = PrefixScoreState(r_n[:, token].copy(), r_b[:, token].copy(), token, float(log_psi[token]))
        return new, inc


def ctc_log_likelihood(log_probs, target: Sequence[int], eos: Optional[int] = None, blank: int = BLANK) -> float:
    """``log p_ctc(target | X)`` by running the prefix scorer to completion."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs, dtype=np.float64)
    eos = lp.shape[1] - 1 if eos is None else eos
    scorer = CtcPrefixScorer(lp, eos=eos, blank=blank)
    state, total = scorer.initial_state(), 0.0
    for tok in list(target) + [eos]:
        state, inc = scorer.score(state, tok)
        total += inc
    return total
