"""Mix error rate, language-diarization accuracy and LD attention export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from csasr.errors import ConfigError, UsageError

DIAGONALITY_FORMULA = "mean over token rows of attention mass within +-2 encoder frames of the token's oracle span"
SHARPNESS_FORMULA = (
    "mean over oracle language-switch frames of |lang(argmax_row(t)) - lang(argmax_row(t-1))|"
)


@dataclass
class MerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0
    # language -> [S, I, D, reference tokens]
    per_lang: dict = field(default_factory=dict)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def mer(self) -> float:
        if self.ref_len == 0:
            raise UsageError("MER is undefined for an empty reference")
        return self.errors / self.ref_len

    def __add__(self, other: "MerReport") -> "MerReport":
        per = {k: list(v) for k, v in self.per_lang.items()}
        for k, v in other.per_lang.items():
            per[k] = [a + b for a, b in zip(per.get(k, [0, 0, 0, 0]), v)]
        return MerReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
            per,
        )

    def summary(self) -> str:
        lines = [f"MER {100 * self.mer:.2f}% ({self.errors}/{self.ref_len})",
                 f"  S={self.substitutions} I={self.insertions} D={self.deletions}"]
        for lang in sorted(self.per_lang):
            s, i, d, n = self.per_lang[lang]
            rate = f"{100 * (s + i + d) / n:.2f}%" if n else "n/a"
            lines.append(f"  [{lang}] {rate} S={s} I={i} D={d} N={n}")
        lines.append("")
        lines.append(f"mer={self.mer:.6f}")
        lines += [f"substitutions={self.substitutions}", f"insertions={self.insertions}",
                  f"deletions={self.deletions}", f"ref_len={self.ref_len}"]
        for lang in sorted(self.per_lang):
            s, i, d, n = self.per_lang[lang]
            lines.append(f"lang.{lang}=S:{s},I:{i},D:{d},N:{n}")
        return "\n".join(lines) + "\n"


def align(hyp: Sequence, ref: Sequence) -> list[tuple[str, Optional[int], Optional[int]]]:
    """Minimal Levenshtein alignment as a list of (op, hyp_index, ref_index).

    ``op`` is one of ``"=" "S" "I" "D"``; ties prefer match/substitution,
    then deletion, then insertion.
    """
    n, m = len(hyp), len(ref)
    # plain lists: this runs per utterance pair and numpy scalar indexing dominates otherwise
    cost = [list(range(n + 1))]
    for i in range(1, m + 1):
        r = ref[i - 1]
        prev = cost[-1]
        row = [i]
        for j in range(1, n + 1):
            row.append(min(prev[j - 1] + (hyp[j - 1] != r), prev[j] + 1, row[j - 1] + 1))
        cost.append(row)
    ops = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (hyp[j - 1] != ref[i - 1]):
            ops.append(("=" if hyp[j - 1] == ref[i - 1] else "S", j - 1, i - 1))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            ops.append(("D", None, i - 1))
            i -= 1
        else:
            ops.append(("I", j - 1, None))
            j -= 1
    return ops[::-1]


def mix_error_rate(hyp: Sequence, ref: Sequence, lang_of: Optional[Callable] = None) -> MerReport:
    """Token-level edit-distance error report.

    Reference-side errors (substitutions, deletions) count against the
    reference token's language, insertions against the inserted token's.
    """
    if len(ref) == 0:
        raise UsageError("MER is undefined for an empty reference")
    lang_of = lang_of or (lambda _: "all")
    rep = MerReport(ref_len=len(ref))
    per: dict = {}
    for tok in ref:
        per.setdefault(str(lang_of(tok)), [0, 0, 0, 0])[3] += 1
    for op, hi, ri in align(hyp, ref):
        if op == "S":
            rep.substitutions += 1
            per[str(lang_of(ref[ri]))][0] += 1
        elif op == "D":
            rep.deletions += 1
            per[str(lang_of(ref[ri]))][2] += 1
        elif op == "I":
            rep.insertions += 1
            per.setdefault(str(lang_of(hyp[hi])), [0, 0, 0, 0])[1] += 1
    rep.per_lang = per
    return rep


def corpus_mer(pairs, lang_of: Optional[Callable] = None) -> MerReport:
    total = MerReport()
    for hyp, ref in pairs:
        total = total + mix_error_rate(hyp, ref, lang_of)
    return total


def ld_accuracy(pred: Sequence[int], ref: Sequence[int], special: Sequence[int] = ()) -> float:
    """Position-wise accuracy over reference positions whose label is not special."""
    if len(pred) != len(ref):
        raise UsageError(f"ld_accuracy: length mismatch {len(pred)} vs {len(ref)}")
    keep = [i for i, r in enumerate(ref) if r not in special]
    if not keep:
        return float("nan")
    return sum(pred[i] == ref[i] for i in keep) / len(keep)


# -- attention analysis ---------------------------------------------------------


def encoder_spans(spans, factor: int, n_frames: int) -> list[tuple[int, int]]:
    """Map input-frame token spans onto the subsampled encoder frame grid (inclusive ends)."""
    out = []
    for a, b in spans:
        lo = min(a // factor, n_frames - 1)
        hi = min(max((b - 1) // factor, lo), n_frames - 1)
        out.append((lo, hi))
    return out


def diagonality(attn: np.ndarray, enc_spans, width: int = 2) -> float:
    """Share of each token row's attention within ``width`` frames of its oracle span, averaged over rows.

    ``attn`` is ``(L, T1)`` with one row per decoder input position; row ``n``
    predicts token ``n`` so it is compared against that token's span.
    """
    n_frames = attn.shape[1]
    masses = []
    for n, (lo, hi) in enumerate(enc_spans):
        if n >= attn.shape[0]:
            break
        a, b = max(0, lo - width), min(n_frames, hi + width + 1)
        masses.append(attn[n, a:b].sum())
    return float(np.mean(masses)) if masses else float("nan")


def boundary_sharpness(attn: np.ndarray, token_langs, frame_langs) -> float:
    """How often the attention-derived frame language flips exactly at oracle switch frames."""
    n_tok = len(token_langs)
    rows = attn[:n_tok].argmax(axis=0)
    assigned = np.asarray(token_langs)[rows]
    frame_langs = np.asarray(frame_langs)
    switches = np.flatnonzero(frame_langs[1:] != frame_langs[:-1]) + 1
    if switches.size == 0:
        return float("nan")
    return float(np.mean(assigned[switches] != assigned[switches - 1]))


def frame_languages(token_langs, enc_spans, n_frames: int) -> np.ndarray:
    out = np.empty(n_frames, dtype=np.int64)
    for lang, (lo, hi) in zip(token_langs, enc_spans):
        out[lo:hi + 1] = lang
    # frames after the last span (from length flooring) inherit the last token's language
    last = enc_spans[-1][1] if enc_spans else -1
    out[last + 1:] = token_langs[-1] if len(token_langs) else 0
    return out


def attention_scores(attn_heads: np.ndarray, utt, factor: int, lang_of: Callable):
    """Per-head (diagonality, boundary_sharpness) for one utterance; ``attn_heads`` is ``(H, L, T1)``."""
    n_frames = attn_heads.shape[-1]
    spans = encoder_spans(utt.spans, factor, n_frames)
    token_langs = [lang_of(t) for t in utt.tokens]
    flangs = frame_languages(token_langs, spans, n_frames)
    return [(diagonality(a, spans), boundary_sharpness(a, token_langs, flangs)) for a in attn_heads]


def export_attention(fo, utt, out_dir, factor: int, lang_of: Callable) -> list[Path]:
    """Write one text matrix per LD-decoder head: rows = decoder positions, cols = encoder frames."""
    if fo.ld_attention is None:
        raise ConfigError("export_attention needs a model with an LD decoder")
    attn = fo.ld_attention[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scores = attention_scores(attn, utt, factor, lang_of)
    paths = []
    for h, (mat, (diag, sharp)) in enumerate(zip(attn, scores)):
        p = out / f"{utt.id}.head{h}.txt"
        lines = [
            f"utt_id: {utt.id}",
            f"head: {h}",
            f"shape: {mat.shape[0]} {mat.shape[1]}",
            f"diagonality: {_fmt(diag)}",
            f"boundary_sharpness: {_fmt(sharp)}",
            f"# diagonality = {DIAGONALITY_FORMULA}",
            f"# boundary_sharpness = {SHARPNESS_FORMULA}",
        ]
        lines += [" ".join(f"{v:.8f}" for v in row) for row in mat]
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
    return paths


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"
