"""Text metrics (BLEU-4, ROUGE-L, CIDEr) and attention-map EMD on the scene grid."""
from __future__ import annotations

import math
import os
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

# POT probes optional backends on import; the heavy ones are never needed here.
os.environ.setdefault("POT_BACKEND_DISABLE_TENSORFLOW", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_JAX", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_CUPY", "1")
import ot  # noqa: E402

from .toyworld import GRID  # noqa: E402

NORM_TOL = 1e-9
ROUGE_BETA = 1.2


class EmptyCandidateWarning(UserWarning):
    pass


class DegenerateAttentionWarning(UserWarning):
    pass


# -- n-gram helpers ----------------------------------------------------------

def ngrams(tokens, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _check_candidate(candidate) -> bool:
    if len(candidate) == 0:
        warnings.warn("empty candidate scores 0", EmptyCandidateWarning, stacklevel=3)
        return False
    return True


def _closest_ref_len(c_len: int, references) -> int:
    return min((abs(len(r) - c_len), len(r)) for r in references)[1]


def _bleu_stats(candidate, references, max_n: int = 4):
    """(clipped matches per n, candidate n-gram totals per n, closest reference length)."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        best = Counter()
        for r in references:
            best |= ngrams(r, n)
        matches.append(sum(min(c, best[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return matches, totals, _closest_ref_len(len(candidate), references)


def _bleu_from_stats(matches, totals, c_len, r_len) -> float:
    if c_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu4(candidate, references) -> float:
    """Sentence BLEU-4: clipped 1-4-gram precisions, geometric mean, brevity penalty.

    No smoothing, so any n-gram order without a match gives 0.
    """
    if not references:
        raise ValueError("bleu4 needs at least one reference")
    if not _check_candidate(candidate):
        return 0.0
    m, t, r_len = _bleu_stats(candidate, references)
    return _bleu_from_stats(m, t, len(candidate), r_len)


def corpus_bleu4(candidates, references_list) -> float:
    """Corpus BLEU-4 (counts pooled over items before taking precisions)."""
    if len(candidates) != len(references_list):
        raise ValueError("one reference set per candidate is required")
    m_sum, t_sum, c_len, r_len = np.zeros(4), np.zeros(4), 0, 0
    for cand, refs in zip(candidates, references_list):
        m, t, r = _bleu_stats(cand, refs)
        m_sum += m
        t_sum += t
        c_len += len(cand)
        r_len += r
    return _bleu_from_stats(m_sum.tolist(), t_sum.tolist(), c_len, r_len)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = ROUGE_BETA) -> float:
    """ROUGE-L F-measure using the best precision and best recall over references."""
    if not references:
        raise ValueError("rouge_l needs at least one reference")
    if not _check_candidate(candidate):
        return 0.0
    precs, recs = [], []
    for r in references:
        lcs = lcs_length(candidate, r)
        precs.append(lcs / len(candidate))
        recs.append(lcs / len(r) if len(r) else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def _tfidf(tokens, n, df, num_docs):
    counts = ngrams(tokens, n)
    vec = {g: c * math.log(num_docs / max(df.get(g, 0), 1)) for g, c in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider(candidates, references_list, corpus=None) -> tuple:
    """Plain CIDEr (no length penalty or clipping); returns (mean, per-item scores).

    Document frequencies come from `corpus` (a list of reference sets,
    defaulting to `references_list`): an n-gram's df is the number of sets in
    which any reference contains it. With a one-document corpus every idf is
    log(1) = 0, so all scores are 0.
    """
    if len(candidates) != len(references_list):
        raise ValueError("one reference set per candidate is required")
    corpus = references_list if corpus is None else corpus
    num_docs = len(corpus)
    df = [Counter() for _ in range(4)]
    for refs in corpus:
        for n in range(4):
            seen = set()
            for r in refs:
                seen |= set(ngrams(r, n + 1))
            df[n].update(seen)
    scores = []
    for cand, refs in zip(candidates, references_list):
        if not _check_candidate(cand) or not refs:
            scores.append(0.0)
            continue
        total = 0.0
        for n in range(4):
            cv, cn = _tfidf(cand, n + 1, df[n], num_docs)
            sims = []
            for r in refs:
                rv, rn = _tfidf(r, n + 1, df[n], num_docs)
                dot = sum(v * rv.get(g, 0.0) for g, v in cv.items())
                sims.append(dot / (cn * rn) if cn > 0 and rn > 0 else 0.0)
            total += sum(sims) / len(sims)
        scores.append(total / 4)
    return (float(np.mean(scores)) if scores else 0.0), scores


# -- attention maps and EMD --------------------------------------------------

@dataclass(frozen=True)
class AttentionMap:
    grid: np.ndarray

    def __post_init__(self):
        validate_map(self.grid)


def validate_map(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"attention map must be 2-D, got shape {grid.shape}")
    if not np.isfinite(grid).all() or (grid < 0).any():
        raise ValueError("attention map entries must be finite and nonnegative")
    if abs(grid.sum() - 1.0) > NORM_TOL:
        raise ValueError(f"attention map must sum to 1 (got {grid.sum():.12g})")
    return grid


def paint(weights, footprints, size: int = GRID) -> np.ndarray:
    """Spread each object's weight evenly over its footprint cells (unnormalized)."""
    grid = np.zeros((size, size))
    for w, cells in zip(weights, footprints):
        if not cells:
            continue
        share = w / len(cells)
        for r, c in cells:
            grid[r, c] += share
    return grid


def _normalized_or_uniform(grid, what: str) -> AttentionMap:
    total = grid.sum()
    if total <= 0:
        warnings.warn(f"{what}: no attention mass; using a uniform map",
                      DegenerateAttentionWarning, stacklevel=3)
        return AttentionMap(np.full(grid.shape, 1.0 / grid.size))
    return AttentionMap(grid / total)


def rasterize_attention(output, scene, size: int = GRID) -> AttentionMap:
    """Per-object weight sum_t alpha[i, t] * s1[t], painted over footprints, normalized."""
    weights = np.zeros(len(scene.objects))
    for st in output.steps:
        weights += np.asarray(st.alpha, dtype=np.float64) * st.s[1]
    return _normalized_or_uniform(paint(weights, [o.footprint for o in scene.objects], size),
                                  "rasterize_attention")


def oracle_map(item, size: int = GRID) -> AttentionMap:
    """Uniform mass over the union of the causal objects' footprints."""
    causal = set(item.causal_object_ids)
    cells = {cell for o in item.scene.objects if o.object_id in causal for cell in o.footprint}
    grid = np.zeros((size, size))
    for r, c in cells:
        grid[r, c] = 1.0
    return _normalized_or_uniform(grid, "oracle_map")


def cell_centers(shape) -> np.ndarray:
    rows, cols = np.indices(shape)
    return np.stack([rows.ravel(), cols.ravel()], -1).astype(np.float64)


def emd(map_a, map_b) -> float:
    """Exact earth mover's distance with Euclidean ground distance between cell centers.

    Only cells with positive mass enter the transport problem, which leaves
    the optimum unchanged and keeps the network small.
    """
    a = validate_map(map_a.grid if isinstance(map_a, AttentionMap) else map_a)
    b = validate_map(map_b.grid if isinstance(map_b, AttentionMap) else map_b)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    xy = cell_centers(a.shape)
    ia, ib = np.flatnonzero(a.ravel() > 0), np.flatnonzero(b.ravel() > 0)
    wa, wb = a.ravel()[ia], b.ravel()[ib]
    # renormalize away the (<= 1e-9) rounding so the solver sees balanced masses
    wa, wb = wa / wa.sum(), wb / wb.sum()
    cost = ot.dist(xy[ia], xy[ib], metric="euclidean")
    return float(ot.emd2(wa, wb, cost, numItermax=1_000_000))
