"""Synthetic two-language code-switching corpus.

Token ids: 0 blank, 1 unk, then language-A tokens, then language-B tokens,
and the shared sos/eos as the last id. Language labels for the LD decoder:
0 = A, 1 = B, 2 = sos/eos.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from csasr.errors import ConfigError, UsageError
from csasr.numerics.serialize import read_array, write_array

logger = logging.getLogger(__name__)

BLANK, UNK = 0, 1
LANG_A, LANG_B, LANG_EOS = 0, 1, 2
LANG_NAMES = ("A", "B")
SPLITS = ("train", "dev", "test")


def derive_rng(seed: int, component: str) -> np.random.Generator:
    """Independent stream for one named component of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(component.encode())]))


@dataclass(frozen=True)
class Vocab:
    n_a: int
    n_b: int

    @property
    def size(self) -> int:
        return self.n_a + self.n_b + 3

    @property
    def sos(self) -> int:
        return self.size - 1

    eos = sos

    @property
    def a_ids(self) -> range:
        return range(2, 2 + self.n_a)

    @property
    def b_ids(self) -> range:
        return range(2 + self.n_a, 2 + self.n_a + self.n_b)

    def lang_of(self, token: int) -> int:
        if token == self.eos:
            return LANG_EOS
        if 2 + self.n_a <= token < 2 + self.n_a + self.n_b:
            return LANG_B
        if token == UNK or 2 <= token < 2 + self.n_a:
            return LANG_A
        raise UsageError(f"token id {token} has no language")

    def lang_table(self) -> np.ndarray:
        """``lang_table()[id]`` is the language label of every non-blank id (blank -> -1)."""
        tab = np.full(self.size, -1, dtype=np.int64)
        for tok in range(1, self.size):
            tab[tok] = self.lang_of(tok)
        return tab

    def fingerprint(self) -> str:
        return hashlib.sha256(f"csasr-vocab:{self.n_a}:{self.n_b}:blank0:unk1:soseos-last".encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SyntheticSpec:
    n_lang_a: int = 20
    n_lang_b: int = 20
    switch_prob: float = 0.15
    primary_ratio: float = 0.7
    frames_per_token: tuple = (4, 8)
    feature_dim: int = 16
    noise: float = 0.3
    utt_len: tuple = (3, 10)
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    bigram_concentration: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_lang_a < 2 or self.n_lang_b < 2:
            raise ConfigError("each language needs >= 2 tokens for its bigram table")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ConfigError("switch_prob must lie in [0, 1]")
        if not 0.0 < self.primary_ratio < 1.0:
            raise ConfigError("primary_ratio must lie in (0, 1)")
        if self.switch_prob * self.primary_ratio / (1 - self.primary_ratio) > 1.0:
            raise ConfigError("switch_prob too large for primary_ratio (B->A switch probability exceeds 1)")
        if self.frames_per_token[0] < 2 or self.frames_per_token[0] > self.frames_per_token[1]:
            raise ConfigError("frames_per_token must satisfy 2 <= min <= max")
        if self.utt_len[0] < 1 or self.utt_len[0] > self.utt_len[1]:
            raise ConfigError("utt_len must satisfy 1 <= min <= max")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_lang_a, self.n_lang_b)

    @property
    def switch_probs(self) -> tuple[float, float]:
        """Per-token switch probabilities (A->B, B->A) whose stationary A share is primary_ratio."""
        r = self.primary_ratio
        return self.switch_prob, self.switch_prob * r / (1 - r)

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "SyntheticSpec":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(int(x) for x in raw.split(","))
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


@dataclass
class Utterance:
    id: str
    x: np.ndarray
    tokens: list
    langs: list
    spans: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return int(self.x.shape[0])


@dataclass
class Corpus:
    spec: SyntheticSpec
    splits: dict
    stats: Optional[tuple] = None

    @property
    def vocab(self) -> Vocab:
        return self.spec.vocab

    def __getitem__(self, split: str) -> list:
        return self.splits[split]


class _Generator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.vocab = spec.vocab
        rng = derive_rng(spec.seed, "data.prototypes")
        v, f = self.vocab.size, spec.feature_dim
        protos = rng.normal(size=(v, f))
        ids = list(self.vocab.a_ids) + list(self.vocab.b_ids)
        # scale up until every pair of token prototypes is > 10 sigma apart
        sub = protos[ids]
        dist = np.sqrt(((sub[:, None] - sub[None]) ** 2).sum(-1))
        dmin = dist[np.triu_indices(len(ids), 1)].min()
        need = 10.5 * spec.noise
        if dmin < need:
            protos *= need / dmin
        self.prototypes = protos
        brng = derive_rng(spec.seed, "data.bigram")
        self.lang_ids = [np.array(self.vocab.a_ids), np.array(self.vocab.b_ids)]
        self.start = []
        self.bigram = []
        for ids_l in self.lang_ids:
            n = len(ids_l)
            self.start.append(brng.dirichlet(np.full(n, 1.0)))
            tab = brng.dirichlet(np.full(n, spec.bigram_concentration), size=n)
            np.fill_diagonal(tab, 0.0)  # no immediate repeats
            self.bigram.append(tab / tab.sum(axis=1, keepdims=True))

    def tokens(self, rng) -> tuple[list, list]:
        sp = self.spec
        n = int(rng.integers(sp.utt_len[0], sp.utt_len[1] + 1))
        p_ab, p_ba = sp.switch_probs
        lang = LANG_A if rng.random() < sp.primary_ratio else LANG_B
        idx = int(rng.choice(len(self.start[lang]), p=self.start[lang]))
        toks, langs = [int(self.lang_ids[lang][idx])], [lang]
        for _ in range(n - 1):
            if rng.random() < (p_ab if lang == LANG_A else p_ba):
                lang = 1 - lang
                idx = int(rng.choice(len(self.start[lang]), p=self.start[lang]))
            else:
                idx = int(rng.choice(len(self.bigram[lang]), p=self.bigram[lang][idx]))
            toks.append(int(self.lang_ids[lang][idx]))
            langs.append(lang)
        return toks, langs

    def features(self, rng, toks) -> tuple[np.ndarray, list]:
        lo, hi = self.spec.frames_per_token
        durs = rng.integers(lo, hi + 1, size=len(toks))
        bounds = np.concatenate([[0], np.cumsum(durs)])
        spans = [(int(bounds[i]), int(bounds[i + 1])) for i in range(len(toks))]
        x = np.repeat(self.prototypes[toks], durs, axis=0)
        x = x + self.spec.noise * rng.normal(size=x.shape)
        return x, spans


def generate_corpus(spec: SyntheticSpec) -> Corpus:
    """Train/dev/test utterance sets; bit-identical for a fixed spec (seed included)."""
    gen = _Generator(spec)
    seen: set = set()
    splits = {}
    for split, count in zip(SPLITS, (spec.n_train, spec.n_dev, spec.n_test)):
        rng = derive_rng(spec.seed, f"data.{split}")
        utts = []
        attempts = 0
        while len(utts) < count:
            attempts += 1
            if attempts > 50 * count + 1000:
                raise ConfigError("cannot draw enough distinct utterances; enlarge vocab or lengths")
            toks, langs = gen.tokens(rng)
            if tuple(toks) in seen:
                continue
            seen.add(tuple(toks))
            x, spans = gen.features(rng, toks)
            utts.append(Utterance(f"{split}-{len(utts):05d}", x, toks, [LANG_NAMES[l] for l in langs], spans))
        splits[split] = utts
    return Corpus(spec, splits)


def compute_stats(utts) -> tuple[np.ndarray, np.ndarray]:
    if not utts:
        raise UsageError("normalization needs a non-empty training split")
    frames = np.concatenate([u.x for u in utts], axis=0)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    low = std < 1e-8
    if low.any():
        logger.warning("normalize: %d zero-variance feature dim(s) floored at 1e-8", int(low.sum()))
        std = np.where(low, 1e-8, std)
    return mean, std


def normalize(corpus: Corpus, stats: Optional[tuple] = None) -> Corpus:
    """Global mean/variance normalization with statistics from the training split."""
    stats = stats if stats is not None else compute_stats(corpus["train"])
    mean, std = stats
    splits = {
        name: [dataclasses.replace(u, x=(u.x - mean) / std) for u in utts] for name, utts in corpus.splits.items()
    }
    return Corpus(corpus.spec, splits, stats=(mean, std))


def denormalize(x: np.ndarray, stats: tuple) -> np.ndarray:
    mean, std = stats
    return x * std + mean


def derive_lang_labels(tokens, vocab: Vocab) -> list[int]:
    """LD targets: one language label per token, plus the terminal eos label."""
    return [vocab.lang_of(t) for t in tokens] + [LANG_EOS]


# -- on-disk format -----------------------------------------------------------


def write_split(path, utts) -> None:
    with open(path, "wb") as fh:
        for u in utts:
            head = [
                f"id: {u.id}",
                "tokens: " + " ".join(map(str, u.tokens)),
                "langs: " + " ".join(u.langs),
                "spans: " + " ".join(f"{a},{b}" for a, b in u.spans),
            ]
            fh.write(("\n".join(head) + "\n").encode())
            write_array(fh, u.x)


def read_split(path) -> list:
    utts = []
    with open(path, "rb") as fh:
        while True:
            first = fh.readline().decode()
            if not first:
                break
            lines = [first] + [fh.readline().decode() for _ in range(3)]
            fields = {}
            for line in lines:
                key, _, value = line.rstrip("\n").partition(":")
                fields[key] = value.strip()
            x = read_array(fh)
            spans = [tuple(int(v) for v in s.split(",")) for s in fields["spans"].split()]
            utts.append(Utterance(fields["id"], x, [int(t) for t in fields["tokens"].split()],
                                  fields["langs"].split(), spans))
    return utts


def write_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.txt").write_text("".join(f"{k}={v}\n" for k, v in corpus.spec.to_items().items()))
    for split in SPLITS:
        write_split(out / f"{split}.utts", corpus[split])


def read_corpus(corpus_dir) -> Corpus:
    d = Path(corpus_dir)
    if not (d / "spec.txt").exists():
        raise UsageError(f"{d}: not a corpus directory (spec.txt missing)")
    items = dict(line.split("=", 1) for line in (d / "spec.txt").read_text().splitlines() if line)
    spec = SyntheticSpec.from_items(items)
    return Corpus(spec, {split: read_split(d / f"{split}.utts") for split in SPLITS})
