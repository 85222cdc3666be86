"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

Conventions follow the COCO caption evaluation toolkit where it is explicit;
an empty candidate scores 0 on every metric.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RESULTS_VERSION = "# capforge-scores v1"
METRIC_NAMES = ("Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4", "ROUGE_L", "CIDEr")

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


@dataclass(frozen=True)
class EvalItem:
    image_id: str
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise ValueError(f"item {self.image_id!r} has no references")


@dataclass(frozen=True)
class EvalResult:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    cider: float

    def as_dict(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, (*self.bleu, self.rouge_l, self.cider)))


def make_corpus(items) -> list[EvalItem]:
    """Accept ``EvalItem``s or ``(image_id, candidate, references)`` triples."""
    return [it if isinstance(it, EvalItem) else EvalItem(*it) for it in items]


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _closest_ref_len(cand_len: int, refs) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu(corpus) -> tuple[float, float, float, float]:
    corpus = make_corpus(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for item in corpus:
        cand_len += len(item.candidate)
        ref_len += _closest_ref_len(len(item.candidate), item.references)
        for k in range(1, 5):
            cand = ngram_counts(item.candidate, k)
            max_ref = Counter()
            for ref in item.references:
                max_ref |= ngram_counts(ref, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in cand.items())
            total[k - 1] += sum(cand.values())

    if cand_len == 0:
        return (0.0, 0.0, 0.0, 0.0)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for k in range(4):
        if matched[k] == 0:
            scores.extend([0.0] * (4 - k))
            break
        log_sum += math.log(matched[k] / total[k])
        scores.append(bp * math.exp(log_sum / (k + 1)))
    return tuple(scores)


def lcs_len(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(candidate, references, beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for ref in references:
        ell = lcs_len(candidate, ref)
        if ell == 0:
            continue
        prec, rec = ell / len(candidate), ell / len(ref)
        best = max(best, (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec))
    return best


def rouge_l(corpus) -> float:
    corpus = make_corpus(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    return float(np.mean([rouge_l_item(it.candidate, it.references) for it in corpus]))


def _tfidf(counts: dict, doc_freq: Counter, log_n: float, n: int):
    vec = [{} for _ in range(n)]
    for gram, tf in counts.items():
        vec[len(gram) - 1][gram] = tf * (log_n - math.log(max(1.0, doc_freq[gram])))
    norms = [math.sqrt(sum(v * v for v in vk.values())) for vk in vec]
    return vec, norms


def _all_ngrams(tokens, n: int) -> Counter:
    out = Counter()
    for k in range(1, n + 1):
        out.update(ngram_counts(tokens, k))
    return out


def cider_items(corpus, n: int = 4, sigma: float = CIDER_SIGMA) -> list[float]:
    """Per-item CIDEr-D on the COCO scale (before the x100 reporting factor)."""
    corpus = make_corpus(corpus)
    if len(corpus) < 2:
        raise ValueError("CIDEr needs at least 2 items to estimate document frequencies")
    ref_counts = [[_all_ngrams(r, n) for r in it.references] for it in corpus]
    doc_freq = Counter()
    for refs in ref_counts:
        doc_freq.update(set().union(*refs))
    log_n = math.log(float(len(corpus)))

    scores = []
    for item, refs in zip(corpus, ref_counts):
        if not item.candidate:
            scores.append(0.0)
            continue
        c_vec, c_norm = _tfidf(_all_ngrams(item.candidate, n), doc_freq, log_n, n)
        total = np.zeros(n)
        for ref_tokens, counts in zip(item.references, refs):
            r_vec, r_norm = _tfidf(counts, doc_freq, log_n, n)
            delta = len(item.candidate) - len(ref_tokens)
            penalty = math.exp(-delta * delta / (2 * sigma * sigma))
            for k in range(n):
                val = sum(min(w, r_vec[k].get(g, 0.0)) * r_vec[k].get(g, 0.0)
                          for g, w in c_vec[k].items())
                if c_norm[k] and r_norm[k]:
                    val /= c_norm[k] * r_norm[k]
                total[k] += val * penalty
        scores.append(float(np.mean(total)) / len(item.references) * 10.0)
    return scores


def cider(corpus, n: int = 4, sigma: float = CIDER_SIGMA) -> float:
    """Corpus CIDEr-D, reported x100 (a COCO score of 0.85 is returned as 85)."""
    return 100.0 * float(np.mean(cider_items(corpus, n, sigma)))


def evaluate(corpus) -> EvalResult:
    corpus = make_corpus(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    return EvalResult(bleu(corpus), rouge_l(corpus), cider(corpus))


def format_results(result: EvalResult) -> str:
    lines = [RESULTS_VERSION]
    lines += [f"{name}\t{value:.4f}" for name, value in result.as_dict().items()]
    return "\n".join(lines) + "\n"


def parse_results(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, value = line.split("\t")
        out[name] = float(value)
    return out
