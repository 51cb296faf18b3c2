"""Scoring: surprise and win rate, word-overlap similarity metrics
(BLEU-1, WER, ROUGE-N, ROUGE-L, METEOR), Pearson correlation, the exact
one-sided sign test, and Benjamini-Hochberg FDR control.

All similarity metrics operate on word-token sequences. Everything here is
pure and side-effect free.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from math import comb, exp, log, sqrt

import numpy as np
from scipy import stats

from .errors import DataError, NumericError


# ---- surprise / win rate ----

def surprise(lm, prompt_input, continuation_ids) -> float:
    """Negative log-likelihood (nats) of the continuation given the prompt rows."""
    if len(continuation_ids) == 0:
        raise DataError("empty continuation")
    return -lm.sequence_log_likelihood(prompt_input.rows, continuation_ids)


@dataclass
class SurprisePair:
    sample_id: int
    surprise_brainllm: float
    surprise_control: float


def win_rate(pairs, tie_eps: float = 1e-9) -> float:
    """Fraction of samples where the brain-conditioned surprise is lower;
    ties within +-tie_eps count half."""
    if not pairs:
        raise DataError("no surprise pairs")
    wins = ties = 0
    for p in pairs:
        delta = p.surprise_control - p.surprise_brainllm
        if abs(delta) <= tie_eps:
            ties += 1
        elif delta > 0:
            wins += 1
    return (wins + 0.5 * ties) / len(pairs)


def win_counts(pairs, tie_eps: float = 1e-9):
    wins = ties = losses = 0
    for p in pairs:
        delta = p.surprise_control - p.surprise_brainllm
        if abs(delta) <= tie_eps:
            ties += 1
        elif delta > 0:
            wins += 1
        else:
            losses += 1
    return wins, ties, losses


# ---- n-gram similarity ----

def _ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def _clipped_matches(candidate, reference, n):
    cand = Counter(_ngrams(candidate, n))
    ref = Counter(_ngrams(reference, n))
    return sum(min(count, ref[g]) for g, count in cand.items())


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    if cand_len >= ref_len:
        return 1.0
    return exp(1.0 - ref_len / cand_len)


def bleu1(candidate, reference, literal_equations: bool = False) -> float:
    """Clipped unigram precision times brevity penalty.

    literal_equations=True switches to the alternative published closed form
    (BP / (BP + (1-BP)(1 - e^{-ln r / ln m})) with BP inverted); kept only for
    comparison, not used in any report.
    """
    if len(reference) == 0:
        raise DataError("empty reference")
    if len(candidate) == 0:
        return 0.0
    matches = _clipped_matches(candidate, reference, 1)
    if literal_equations:
        bp = 1.0 if len(reference) < len(candidate) else exp(1.0 - len(reference) / len(candidate))
        r_n, m = matches, len(reference)
        if r_n <= 0 or m <= 1:
            return 0.0
        return bp / (bp + (1.0 - bp) * (1.0 - exp(-log(r_n) / log(m))))
    precision = matches / len(candidate)
    return brevity_penalty(len(candidate), len(reference)) * precision


def wer(candidate, reference) -> float:
    """Word-level Levenshtein distance over reference length, unit costs."""
    if len(reference) == 0:
        raise DataError("empty reference")
    m, n = len(reference), len(candidate)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            sub = prev[j - 1] + (reference[i - 1] != candidate[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[n] / m


def rouge_n(candidate, reference, n: int = 1) -> float:
    """Clipped n-gram recall."""
    ref_grams = _ngrams(reference, n)
    if not ref_grams:
        raise DataError(f"reference shorter than n={n}")
    return _clipped_matches(candidate, reference, n) / len(ref_grams)


def _lcs_len(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    if len(reference) == 0:
        raise DataError("empty reference")
    return _lcs_len(candidate, reference) / len(reference)


def _count_chunks(pairs) -> int:
    chunks = 0
    prev = None
    for ci, ri in pairs:
        if prev is None or not (ci == prev[0] + 1 and ri == prev[1] + 1):
            chunks += 1
        prev = (ci, ri)
    return chunks


def _greedy_pairs(candidate, ref_positions):
    used = set()
    pairs = []
    for ci, tok in enumerate(candidate):
        options = [p for p in ref_positions.get(tok, []) if p not in used]
        if not options:
            continue
        if pairs:
            contiguous = [p for p in options if p == pairs[-1][1] + 1]
            pick = contiguous[0] if contiguous else options[0]
        else:
            pick = options[0]
        used.add(pick)
        pairs.append((ci, pick))
    return pairs


def _meteor_alignment(candidate, reference, node_budget: int = 200_000):
    """Maximum exact-unigram matching with the fewest possible chunks.

    Exhaustive branch-and-bound over maximum matchings; for long inputs the
    search falls back to a contiguity-preferring greedy alignment once the
    node budget is exhausted.
    """
    ref_positions: dict[str, list[int]] = {}
    for i, tok in enumerate(reference):
        ref_positions.setdefault(tok, []).append(i)
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    max_matches = sum(min(c, ref_counts[w]) for w, c in cand_counts.items())
    if max_matches == 0:
        return 0, 0

    greedy = _greedy_pairs(candidate, ref_positions)
    best = [_count_chunks(greedy)]
    remaining_after = [0] * (len(candidate) + 1)
    for i in range(len(candidate) - 1, -1, -1):
        tok = candidate[i]
        remaining_after[i] = remaining_after[i + 1] + (1 if tok in ref_positions else 0)
    nodes = [0]

    def dfs(ci, used, matched, pairs_chunks, prev):
        # prev = (ci, ri) of last match, or None
        if best[0] == 1:
            return
        if nodes[0] > node_budget:
            return
        nodes[0] += 1
        if matched == max_matches:
            best[0] = min(best[0], pairs_chunks)
            return
        if ci >= len(candidate):
            return
        # even matching every remaining matchable token cannot reach maximum
        if matched + remaining_after[ci] < max_matches:
            return
        tok = candidate[ci]
        options = [p for p in ref_positions.get(tok, []) if p not in used]
        # try contiguous continuation first for better pruning
        if prev is not None:
            options.sort(key=lambda p: (p != prev[1] + 1, p))
        for p in options:
            new_chunks = pairs_chunks + (
                0 if prev is not None and ci == prev[0] + 1 and p == prev[1] + 1 else 1
            )
            if new_chunks >= best[0]:
                continue
            dfs(ci + 1, used | {p}, matched + 1, new_chunks, (ci, p))
        # skipping this candidate token, if maximum matching still reachable
        if matched + remaining_after[ci + 1] >= max_matches:
            dfs(ci + 1, used, matched, pairs_chunks, prev)

    dfs(0, frozenset(), 0, 0, None)
    return max_matches, best[0]


def meteor(candidate, reference) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), penalty = 0.5*(chunks/matches)^3."""
    if len(reference) == 0:
        raise DataError("empty reference")
    if len(candidate) == 0:
        return 0.0
    matches, chunks = _meteor_alignment(candidate, reference)
    if matches == 0:
        return 0.0
    p = matches / len(candidate)
    r = matches / len(reference)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return (1.0 - penalty) * f_mean


# ---- statistics ----

def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DataError(f"need equal-length lists of >= 2 values, got {x.size} and {y.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise NumericError("zero variance: correlation undefined")
    return float((xc * yc).sum() / denom)


def pearson_r_pvalue_greater(x, y) -> tuple[float, float]:
    """Pearson r with the one-sided p-value for r > 0 (t-distribution)."""
    r = pearson_r(x, y)
    n = len(x)
    if abs(r) >= 1.0:
        return r, 0.0 if r > 0 else 1.0
    t = r * sqrt((n - 2) / (1.0 - r * r))
    return r, float(stats.t.sf(t, df=n - 2))


def sign_test_one_sided(wins: int, ties: int, losses: int) -> float:
    """Exact binomial tail P(X >= wins | n = wins+losses, p = 1/2); ties dropped."""
    n = wins + losses
    if n < 1:
        raise DataError("sign test needs at least one non-tied pair")
    tail = sum(comb(n, k) for k in range(wins, n + 1))
    return tail / 2**n


def bh_fdr(p_values, q: float = 0.05):
    """Benjamini-Hochberg step-up; returns a boolean rejection flag per p-value."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    thresh = q * (np.arange(1, m + 1)) / m
    below = np.nonzero(sorted_p <= thresh)[0]
    flags = np.zeros(m, dtype=bool)
    if below.size:
        flags[order[: below[-1] + 1]] = True
    return flags


# ---- per-sample reports ----

METRIC_NAMES = ("bleu1", "rouge1", "rougeL", "wer", "meteor")


def similarity_row(candidate, reference) -> dict[str, float]:
    return {
        "bleu1": bleu1(candidate, reference),
        "rouge1": rouge_n(candidate, reference, 1),
        "rougeL": rouge_l(candidate, reference),
        "wer": wer(candidate, reference),
        "meteor": meteor(candidate, reference),
    }


@dataclass
class ScoreReport:
    """Per-sample rows plus aggregates for one condition comparison."""

    rows: list = field(default_factory=list)  # dicts, one per sample
    summary: dict = field(default_factory=dict)

    def aggregate(self, keys):
        return {k: float(np.mean([row[k] for row in self.rows])) for k in keys}
