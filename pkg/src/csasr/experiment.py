"""Evaluation helpers and the preset x seed ablation sweep."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from csasr.data import LANG_EOS, LANG_NAMES, Corpus, Vocab
from csasr.decoding import DecodeConfig, joint_beam_search, nbest_lines, strip
from csasr.metrics import MerReport, attention_scores, corpus_mer, ld_accuracy
from csasr.model.config import PRESETS
from csasr.training import make_batch

logger = logging.getLogger(__name__)


@dataclass
class DecodeOutput:
    report: MerReport
    nbest: list
    hyps: dict


def decode_split(model, utts, vocab: Vocab, dcfg: DecodeConfig, lm=None, nbest: int = 0) -> DecodeOutput:
    """Joint beam search over normalized utterances; MER against their references."""
    pairs, lines, hyps = [], [], {}
    for u in utts:
        res = joint_beam_search(model, u.x, dcfg, lm=lm, vocab=vocab, nbest=nbest)
        hyp = strip(res.best.tokens, model.eos)
        hyps[u.id] = hyp
        pairs.append((hyp, u.tokens))
        lines += nbest_lines(u.id, res, model.eos)
    return DecodeOutput(corpus_mer(pairs, lambda t: LANG_NAMES[vocab.lang_of(t)]), lines, hyps)


def ld_quality(model, utts, vocab: Vocab, batch_size: int = 32) -> dict:
    """Teacher-forced LD accuracy over token positions and mean LD-attention diagonality / sharpness."""
    if model.ld_decoder is None:
        return {"ld_acc": float("nan"), "diagonality": float("nan"), "sharpness": float("nan")}
    pred_all, ref_all, diag, sharp = [], [], [], []
    factor = model.cfg.subsample_factor
    for i in range(0, len(utts), batch_size):
        chunk = utts[i:i + batch_size]
        batch = make_batch(chunk, vocab)
        fo = model.forward(batch.x, batch.lengths, batch.ys_in, batch.ys_keep)
        pred = fo.ld_log_probs.data.argmax(-1)
        for b, u in enumerate(chunk):
            n = len(u.tokens)
            pred_all += list(pred[b, : n + 1])
            ref_all += list(batch.ld_out[b, : n + 1])
            t1 = int(fo.h_lengths[b])
            attn = fo.ld_attention[b, :, : n + 1, :t1]
            for d, s in attention_scores(attn, u, factor, vocab.lang_of):
                diag.append(d)
                if not np.isnan(s):
                    sharp.append(s)
    return {
        "ld_acc": ld_accuracy(pred_all, ref_all, special=(LANG_EOS,)),
        "diagonality": float(np.mean(diag)),
        "sharpness": float(np.mean(sharp)) if sharp else float("nan"),
    }


# -- ablation report ---------------------------------------------------------------------


def median(values):
    vals = [v for v in values if v is not None and not np.isnan(v)]
    return statistics.median(vals) if vals else float("nan")


def _cell(values, scale=100.0, digits=2):
    per = "/".join("-" if v is None or np.isnan(v) else f"{scale * v:.{digits}f}" for v in values)
    m = median(values)
    return ("-" if np.isnan(m) else f"{scale * m:.{digits}f}") + f" [{per}]"


def format_report(results: dict, seeds, with_lm: bool, presets=None) -> str:
    """Ablation table: one row per preset, each cell ``median [seed1/seed2/...]``."""
    head = ["Index", "Method", "dev MER %", "test MER %", "LD acc %", "diag"]
    if with_lm:
        head += ["test MER +LM %", "delta (LM - no LM)"]
    rows = [head]
    for preset in presets or list(PRESETS):
        desc = PRESETS[preset][1]
        runs = [results.get(preset, {}).get(str(s)) for s in seeds]
        col = lambda k: [r[k] if r else None for r in runs]  # noqa: E731
        row = [preset, desc, _cell(col("dev_mer")), _cell(col("test_mer")), _cell(col("ld_acc")),
               _cell(col("diagonality"), 1.0, 3)]
        if with_lm:
            delta = [r["test_mer_lm"] - r["test_mer"] if r else None for r in runs]
            row += [_cell(col("test_mer_lm")), _cell(delta)]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append("")
    lines.append(f"cells: median over seeds {list(seeds)} [per-seed values]")
    return "\n".join(lines) + "\n"


def summarize(results: dict, seeds) -> dict:
    out = {}
    for preset in PRESETS:
        runs = [results.get(preset, {}).get(str(s)) for s in seeds]
        runs = [r for r in runs if r]
        if not runs:
            continue
        keys = runs[0].keys()
        out[preset] = {k: median([r[k] for r in runs]) for k in keys if isinstance(runs[0][k], float)}
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> Optional[dict]:
    p = Path(path)
    return json.loads(p.read_text()) if p.exists() else None


def evaluate_model(model, corpus: Corpus, dcfg: DecodeConfig, lm=None, split: str = "test") -> dict:
    """Every per-run number the ablation table needs."""
    vocab = corpus.vocab
    dev = decode_split(model, corpus["dev"], vocab, dcfg)
    test = decode_split(model, corpus[split], vocab, dcfg)
    out = {"dev_mer": dev.report.mer, "test_mer": test.report.mer}
    out.update(ld_quality(model, corpus[split], vocab))
    if lm is not None:
        fused = decode_split(model, corpus[split], vocab, dcfg, lm=lm)
        out["test_mer_lm"] = fused.report.mer
    return out
