"""Corpus BLEU, ROUGE-L, and the local-vs-global prefix cosine diagnostic."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, NumericError


@dataclass
class MetricReport:
    bleu: float
    rouge_l: float
    precisions: list = field(default_factory=list)
    brevity_penalty: float = 1.0
    sentence_bleu: list = field(default_factory=list)
    sentence_rouge_l: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"bleu": self.bleu, "rouge_l": self.rouge_l, "precisions": self.precisions,
                "brevity_penalty": self.brevity_penalty}


@dataclass
class BleuResult:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _toks(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_pairs(hyps, refs):
    if len(hyps) == 0:
        raise InputError("empty hypothesis list")
    if len(hyps) != len(refs):
        raise InputError(f"{len(hyps)} hypotheses vs {len(refs)} references")


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4,
                smoothing: str = "off") -> BleuResult:
    """Single-reference corpus BLEU on whitespace tokens, scaled to [0, 100].

    ``smoothing="plus-one"`` adds one to numerator and denominator for
    n-gram orders above 1.  Orders for which the hypotheses contain no
    n-grams get a NaN precision and are skipped.
    """
    _check_pairs(hypotheses, references)
    if smoothing not in ("off", "plus-one"):
        raise InputError(f"unknown smoothing {smoothing!r}")
    match = [0] * max_n
    total = [0] * max_n
    c = r = 0
    for h, ref in zip(hypotheses, references):
        ht, rt = _toks(h), _toks(ref)
        c += len(ht)
        r += len(rt)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            match[n - 1] += sum(min(cnt, rc[g]) for g, cnt in hc.items())
            total[n - 1] += max(len(ht) - n + 1, 0)
    # orders with no candidate n-grams at all (very short output) are undefined
    # and left out of the geometric mean
    precisions = []
    logs = []
    for n in range(max_n):
        m, t = match[n], total[n]
        if t == 0:
            precisions.append(float("nan"))
            continue
        if smoothing == "plus-one" and n > 0:
            m, t = m + 1, t + 1
        precisions.append(m / t)
        logs.append(math.log(m / t) if m > 0 else -math.inf)
    bp = 1.0 if c > r else (math.exp(1.0 - r / c) if c > 0 else 0.0)
    if not logs or -math.inf in logs:
        score = 0.0
    else:
        score = bp * math.exp(sum(logs) / len(logs))
    return BleuResult(100.0 * score, precisions, bp, c, r)


def _lcs(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp, ref, beta: float = 1.2) -> float:
    ht, rt = _toks(hyp), _toks(ref)
    if not ht or not rt:
        return 0.0
    lcs = _lcs(ht, rt)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(ht), lcs / len(rt)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(hypotheses: Sequence, references: Sequence, beta: float = 1.2) -> float:
    """Mean per-pair LCS F-measure (×100)."""
    _check_pairs(hypotheses, references)
    return 100.0 * float(np.mean([rouge_l_pair(h, r, beta) for h, r in zip(hypotheses, references)]))


def evaluate_generations(hypotheses: Sequence[str], references: Sequence[str],
                         smoothing: str = "off") -> MetricReport:
    b = corpus_bleu(hypotheses, references, smoothing=smoothing)
    per_rouge = [100.0 * rouge_l_pair(h, r) for h, r in zip(hypotheses, references)]
    per_bleu = [corpus_bleu([h], [r], smoothing="plus-one").bleu
                for h, r in zip(hypotheses, references)]
    return MetricReport(b.bleu, float(np.mean(per_rouge)), b.precisions, b.brevity_penalty,
                        per_bleu, per_rouge)


def _flat(prefix) -> np.ndarray:
    if not isinstance(prefix, (np.ndarray, list, tuple)) and callable(getattr(prefix, "flat", None)):
        return prefix.flat()
    return np.asarray(prefix, dtype=np.float64).reshape(-1)


def cosine(a, b) -> float:
    a, b = _flat(a), _flat(b)
    if a.shape != b.shape:
        raise InputError(f"cosine: shapes {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def prefix_cosine(local_prefixes: Sequence, global_prefix) -> tuple[list, float]:
    """Cosine between each local prefix and the global one (keys ⊕ values flattened)."""
    per = [cosine(p, global_prefix) for p in local_prefixes]
    return per, float(np.mean(per))
