"""Caption-quality metrics: corpus BLEU-n, ROUGE-L, and METEOR (exact+stem).

All scorers share a single normalizer (lowercase, punctuation stripped) so that
candidate and reference tokenization can never drift apart. METEOR runs without
a synonym stage -- no external lexical database is shipped -- and every report
carries that variant label.
"""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field

NORMALIZER_VERSION = "norm-1"
STEMMER_VERSION = "stem-rules-1"
METEOR_VARIANT = "exact+stem"

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_WS_RE = re.compile(r"\s+")


class EmptyCorpusError(ValueError):
    pass


def normalize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _WS_RE.sub(" ", text.lower().translate(_PUNCT_TABLE)).split()


def stem(word: str) -> str:
    """Rule-based suffix stripper; rules are frozen (see STEMMER_VERSION)."""
    if len(word) < 4:
        return word
    if word.endswith("sses"):
        return word[:-2]
    if word.endswith("ies"):
        return word[:-3] + "y"
    if word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    if word.endswith("ing") and len(word) > 5:
        return word[:-3]
    if word.endswith("ed") and len(word) > 4:
        return word[:-2]
    return word


@dataclass
class EvalPair:
    """One candidate caption with its (>=1) references, pre-tokenized."""

    image_id: str
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"pair {self.image_id!r} has no references")

    @classmethod
    def from_text(cls, image_id: str, candidate: str, references: list[str]) -> "EvalPair":
        return cls(image_id, normalize(candidate), [normalize(r) for r in references])


@dataclass
class MetricReport:
    """Scores for one evaluation run plus the metadata needed to reproduce it."""

    scores: dict[str, float] = field(default_factory=dict)
    normalizer_version: str = NORMALIZER_VERSION
    stemmer_version: str = STEMMER_VERSION
    meteor_variant: str = METEOR_VARIANT
    bleu_mode: str = "corpus"
    notes: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scores": dict(self.scores),
            "normalizer_version": self.normalizer_version,
            "stemmer_version": self.stemmer_version,
            "meteor_variant": self.meteor_variant,
            "bleu_mode": self.bleu_mode,
            "notes": dict(self.notes),
        }


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(pairs: list[EvalPair], max_n: int = 4) -> float:
    """Corpus-level BLEU with uniform 1/max_n weights and closest-reference
    brevity penalty. Any order with zero clipped matches zeroes the score."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not pairs or all(not p.candidate for p in pairs):
        raise EmptyCorpusError("no non-empty candidates")

    cand_len = 0
    ref_len = 0
    matched = [0] * max_n
    total = [0] * max_n
    for pair in pairs:
        c = len(pair.candidate)
        cand_len += c
        # closest reference length, ties to the shorter reference
        ref_len += min((abs(len(r) - c), len(r)) for r in pair.references)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(pair.candidate, n)
            if not counts:
                continue
            max_ref = Counter()
            for r in pair.references:
                for g, k in _ngram_counts(r, n).items():
                    if k > max_ref[g]:
                        max_ref[g] = k
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in counts.items())

    if any(m == 0 or t == 0 for m, t in zip(matched, total)):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return bp * math.exp(log_prec)


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(pairs: list[EvalPair], beta: float = 1.2) -> float:
    """LCS-based F_beta, per-pair max over references, macro-averaged."""
    if not pairs:
        raise EmptyCorpusError("no pairs")
    scores = []
    for pair in pairs:
        best = 0.0
        for ref in pair.references:
            lcs = _lcs_len(pair.candidate, ref)
            if lcs == 0:
                continue
            p = lcs / len(pair.candidate)
            r = lcs / len(ref)
            f = (1 + beta**2) * p * r / (r + beta**2 * p)
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


def _meteor_align(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """Best unigram alignment: maximize matches, then minimize chunks.

    A pair (i, j) is admissible when the tokens match exactly or share a stem.
    Returns (matches, chunks). Exhaustive DFS with a matches-remaining bound;
    fine at caption scale.
    """
    allowed = [
        [j for j, r in enumerate(ref) if c == r or stem(c) == stem(r)]
        for c in cand
    ]
    best = (0, 0)  # (matches, -chunks) maximized lexicographically

    def upper_bound(i: int) -> int:
        return sum(1 for k in range(i, len(cand)) if allowed[k])

    def dfs(i: int, used: int, last_i: int, last_j: int, matches: int, chunks: int):
        nonlocal best
        if matches + upper_bound(i) < best[0]:
            return
        if i == len(cand):
            key = (matches, -chunks)
            if key > best:
                best = key
            return
        for j in allowed[i]:
            if used >> j & 1:
                continue
            contiguous = i == last_i + 1 and j == last_j + 1
            dfs(i + 1, used | 1 << j, i, j, matches + 1,
                chunks + (0 if contiguous else 1))
        dfs(i + 1, used, last_i, last_j, matches, chunks)

    dfs(0, 0, -2, -2, 0, 0)
    return best[0], -best[1]


def meteor(pairs: list[EvalPair]) -> float:
    """METEOR with exact+stem matching (no synonym stage), macro-averaged."""
    if not pairs:
        raise EmptyCorpusError("no pairs")
    scores = []
    for pair in pairs:
        best = 0.0
        for ref in pair.references:
            if not pair.candidate or not ref:
                continue
            m, chunks = _meteor_align(pair.candidate, ref)
            if m == 0:
                continue
            p = m / len(pair.candidate)
            r = m / len(ref)
            f_mean = 10 * p * r / (r + 9 * p)
            penalty = 0.5 * (chunks / m) ** 3
            best = max(best, f_mean * (1 - penalty))
        scores.append(best)
    return sum(scores) / len(scores)


def evaluate(pairs: list[EvalPair], which: tuple[str, ...] = ("bleu", "meteor", "rouge")) -> MetricReport:
    """Run the requested caption metrics and bundle them into one report."""
    report = MetricReport()
    if "bleu" in which:
        for n in (1, 2, 3, 4):
            report.scores[f"bleu-{n}"] = bleu(pairs, max_n=n)
    if "meteor" in which:
        report.scores["meteor"] = meteor(pairs)
    if "rouge" in which:
        report.scores["rouge-l"] = rouge_l(pairs)
    report.notes["pairs"] = len(pairs)
    return report
