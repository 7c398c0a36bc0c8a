"""Independent brute-force oracles used across the test suite."""

from __future__ import annotations

import functools
import itertools
from collections import deque

import numpy as np
from scipy.special import logsumexp


@functools.lru_cache(maxsize=None)
def _paths(n_frames: int, n_cls: int):
    paths = np.array(list(itertools.product(range(n_cls), repeat=n_frames)), dtype=np.int64)
    code = np.zeros(len(paths), dtype=np.int64)
    prev = np.full(len(paths), -1)
    for t in range(n_frames):
        col = paths[:, t]
        keep = (col != 0) & (col != prev)
        code = np.where(keep, code * n_cls + col, code)
        prev = col
    return paths, code


def label_code(labels, n_cls: int) -> int:
    code = 0
    for k in labels:
        code = code * n_cls + int(k)
    return code


def ctc_log_likelihood_bruteforce(lp: np.ndarray, target) -> float:
    """log sum over every blank-augmented path (all C^T of them) that collapses to ``target``."""
    n_frames, n_cls = lp.shape
    paths, code = _paths(n_frames, n_cls)
    sel = code == label_code(target, n_cls)
    if not sel.any():
        return -np.inf
    scores = lp[np.arange(n_frames)[None, :], paths[sel]].sum(axis=1)
    return float(logsumexp(scores))


def collapsed_distribution(lp: np.ndarray) -> dict:
    """Map every collapsed label code to its total log probability."""
    n_frames, n_cls = lp.shape
    paths, code = _paths(n_frames, n_cls)
    scores = lp[np.arange(n_frames)[None, :], paths].sum(axis=1)
    out = {}
    for c in np.unique(code):
        out[int(c)] = float(logsumexp(scores[code == c]))
    return out


def random_log_probs(rng, n_frames: int, n_cls: int) -> np.ndarray:
    z = rng.normal(size=(n_frames, n_cls)) * 2.0
    return z - logsumexp(z, axis=1, keepdims=True)


def edit_distance_bfs(src, dst, alphabet_size: int, max_len: int) -> int:
    """Shortest path from ``src`` to ``dst`` in the graph of strings joined by single edits.

    Strings are restricted to length <= max_len, which never cuts off an
    optimal edit path when max_len >= max(len(src), len(dst)).
    """
    src, dst = tuple(src), tuple(dst)
    if src == dst:
        return 0
    seen = {src: 0}
    queue = deque([src])
    while queue:
        s = queue.popleft()
        d = seen[s]
        for nxt in _neighbours(s, alphabet_size, max_len):
            if nxt not in seen:
                if nxt == dst:
                    return d + 1
                seen[nxt] = d + 1
                queue.append(nxt)
    raise AssertionError("unreachable")


def _neighbours(s, alphabet_size, max_len):
    n = len(s)
    for i in range(n):
        yield s[:i] + s[i + 1:]
        for a in range(alphabet_size):
            if a != s[i]:
                yield s[:i] + (a,) + s[i + 1:]
    if n < max_len:
        for i in range(n + 1):
            for a in range(alphabet_size):
                yield s[:i] + (a,) + s[i:]


def all_strings(alphabet_size: int, max_len: int):
    for n in range(max_len + 1):
        yield from itertools.product(range(alphabet_size), repeat=n)


def all_pairs_edit_distance(alphabet_size: int, max_len: int) -> dict:
    """BFS from every string over the full bounded string graph."""
    strings = list(all_strings(alphabet_size, max_len))
    table = {}
    for src in strings:
        seen = {src: 0}
        queue = deque([src])
        while queue:
            s = queue.popleft()
            d = seen[s]
            for nxt in _neighbours(s, alphabet_size, max_len):
                if nxt not in seen:
                    seen[nxt] = d + 1
                    queue.append(nxt)
        table[src] = seen
    return table


def restricted_growth(alphabet_size: int, max_len: int):
    """Strings whose symbols first appear in order 0, 1, 2, ...: one representative per relabeling class."""
    for s in all_strings(alphabet_size, max_len):
        seen = -1
        ok = True
        for a in s:
            if a > seen + 1:
                ok = False
                break
            seen = max(seen, a)
        if ok:
            yield s


def edit_graph_distances(alphabet_size: int, max_len: int, sources):
    """Unweighted shortest paths in the explicit single-edit graph of bounded strings.

    Returns ``(strings, dist)`` with ``dist[i, j]`` the distance from
    ``sources[i]`` to ``strings[j]``.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path

    strings = list(all_strings(alphabet_size, max_len))
    index = {s: i for i, s in enumerate(strings)}
    rows, cols = [], []
    for i, s in enumerate(strings):
        for nxt in set(_neighbours(s, alphabet_size, max_len)):
            rows.append(i)
            cols.append(index[nxt])
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(strings),) * 2)
    dist = shortest_path(graph, method="D", unweighted=True, indices=[index[tuple(s)] for s in sources])
    return strings, dist.astype(np.int64)


def check_mer_all_pairs(alphabet_size: int, max_len: int):
    """Compare mix_error_rate against graph distances on every (hyp, ref) pair up to relabeling.

    Every pair is a symbol relabeling of one whose hypothesis is a
    restricted-growth string, and edit distance is relabeling-invariant, so
    checking those pairs against every reference covers all pairs.
    Returns ``(pairs_checked, mismatches)``.
    """
    from csasr.metrics import mix_error_rate

    sources = list(restricted_growth(alphabet_size, max_len))
    strings, dist = edit_graph_distances(alphabet_size, max_len, sources)
    checked, bad = 0, []
    for i, hyp in enumerate(sources):
        row = dist[i]
        for j, ref in enumerate(strings):
            if not ref:
                continue
            rep = mix_error_rate(hyp, ref)
            checked += 1
            if rep.errors != row[j] or rep.mer != row[j] / len(ref):
                bad.append((hyp, ref, rep.errors, int(row[j])))
    return checked, bad
