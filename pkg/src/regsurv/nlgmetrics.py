"""Report quality metrics: BLEU-n, ROUGE-L, CIDEr-D, a METEOR variant, and
clinical-efficacy precision/recall/F1 behind a pluggable report labeler.

All metrics operate on token lists (strings or ids). Conventions that the
published definitions leave open are fixed here so scores are reproducible
bit for bit:

* BLEU: single reference, brevity penalty exp(1 - r/c) for c <= r; when a
  clipped precision is zero at order k > 1 it is add-one smoothed to
  (matches+1)/(total+1); a zero unigram precision zeroes the score.
* ROUGE-L: LCS F-measure with beta = 1.2.
* CIDEr-D: tf-idf over orders 1..4 with reference-corpus document
  frequencies, candidate counts clipped to the reference, Gaussian length
  penalty (sigma = 6), scaled by 10. A single-document corpus falls back
  to a constant idf of log(corpus size + 1).
* METEOR variant: exact + suffix-stem unigram alignment (no synonym
  dictionary), F(alpha=0.9), fragmentation penalty gamma=0.5, beta=3.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import MetricError

from .textgen import EOS, PAD, split_text


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def strip_special(tokens, special=(PAD, EOS)) -> list:
    """Drop trailing padding/terminator ids from an id sequence."""
    out = list(tokens)
    while out and out[-1] in special:
        out.pop()
    return out


def bleu_n(candidate, reference, n: int = 4) -> float:
    if not 1 <= n <= 4:
        raise MetricError(f"BLEU order must be in 1..4, got {n}")
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        return 0.0
    log_precisions = []
    for k in range(1, n + 1):
        cand_counts = ngram_counts(candidate, k)
        ref_counts = ngram_counts(reference, k)
        matches = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        total = max(len(candidate) - k + 1, 0)
        if total > 0 and matches > 0:
            precision = matches / total
        elif k > 1:
            precision = (matches + 1) / (total + 1)
        else:
            return 0.0
        log_precisions.append(math.log(precision))
    ratio = len(reference) / len(candidate)
    brevity = 1.0 if ratio < 1.0 else math.exp(1.0 - ratio)
    return brevity * math.exp(sum(log_precisions) / n)


def _lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)


def cider_d(candidates, references, max_n: int = 4, sigma: float = 6.0) -> float:
    """Corpus-level consensus score; ``references`` holds one reference per
    candidate and also defines the idf statistics.
    """
    if len(candidates) != len(references):
        raise MetricError("candidate and reference corpora must be parallel")
    if not candidates:
        raise MetricError("empty corpus")
    corpus_size = len(references)
    doc_freq = [Counter() for _ in range(max_n)]
    for ref in references:
        for k in range(1, max_n + 1):
            for gram in ngram_counts(list(ref), k):
                doc_freq[k - 1][gram] += 1

    def idf(gram, k):
        if corpus_size == 1:
            return math.log(corpus_size + 1)
        return math.log(corpus_size) - math.log(max(1.0, doc_freq[k - 1][gram]))

    scores = []
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
        per_order = []
        for k in range(1, max_n + 1):
            cand_vec = {g: c * idf(g, k) for g, c in ngram_counts(cand, k).items()}
            ref_vec = {g: c * idf(g, k) for g, c in ngram_counts(ref, k).items()}
            norm_c = math.sqrt(sum(v * v for v in cand_vec.values()))
            norm_r = math.sqrt(sum(v * v for v in ref_vec.values()))
            if norm_c == 0 or norm_r == 0:
                per_order.append(0.0)
                continue
            dot = sum(min(v, ref_vec[g]) * ref_vec[g]
                      for g, v in cand_vec.items() if g in ref_vec)
            per_order.append(penalty * dot / (norm_c * norm_r))
        scores.append(10.0 * sum(per_order) / max_n)
    return float(np.mean(scores))


_STEM_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def stem(word) -> str:
    if not isinstance(word, str):
        return word
    for suffix in _STEM_SUFFIXES:
        if word.endswith(suffix) and len(word) - len(suffix) >= 3:
            return word[:-len(suffix)]
    return word


def _align(candidate, reference):
    """Greedy unigram alignment: exact matches first, then stem matches.
    Returns (candidate index, reference index) pairs.
    """
    matched_ref = [False] * len(reference)
    alignment = {}
    for exact in (True, False):
        key = (lambda w: w) if exact else stem
        for i, word in enumerate(candidate):
            if i in alignment:
                continue
            target = key(word)
            for j, ref_word in enumerate(reference):
                if not matched_ref[j] and key(ref_word) == target:
                    alignment[i] = j
                    matched_ref[j] = True
                    break
    return sorted(alignment.items())


def meteor_variant(candidate, reference, alpha: float = 0.9,
                   beta: float = 3.0, gamma: float = 0.5) -> float:
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return 0.0
    pairs = _align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    precision = m / len(candidate)
    recall = m / len(reference)
    f_mean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    penalty = gamma * (chunks / m) ** beta
    return f_mean * (1.0 - penalty)


# --- clinical efficacy -------------------------------------------------------

OBSERVATIONS = [
    "lung_opacity", "pneumonia", "consolidation", "edema", "atelectasis",
    "pleural_effusion", "pneumothorax", "pleural_other", "cardiomegaly",
    "enlarged_cardiomediastinum", "vascular_congestion", "fracture",
    "degenerative_change", "support_devices",
]

DEFAULT_LEXICON = {
    "lung_opacity": ["opacity", "opacities", "hazy", "airspace"],
    "pneumonia": ["pneumonia"],
    "consolidation": ["consolidation"],
    "edema": ["edema"],
    "atelectasis": ["atelectasis"],
    "pleural_effusion": ["effusion"],
    "pneumothorax": ["pneumothorax"],
    "pleural_other": ["thickening"],
    "cardiomegaly": ["cardiomegaly", "enlarged"],
    "enlarged_cardiomediastinum": ["widening", "widened"],
    "vascular_congestion": ["congestion"],
    "fracture": ["fracture"],
    "degenerative_change": ["degenerative"],
    "support_devices": ["tube", "catheter", "pacemaker", "device"],
}

NEGATION_CUES = {"no", "without", "clear", "normal", "intact", "unremarkable"}


class KeywordLabeler:
    """Maps a structured report to a binary observation vector by keyword
    spotting with sentence-level negation. A stand-in for a trained labeler
    behind the same interface.
    """

    def __init__(self, lexicon: dict = None):
        self.lexicon = lexicon or DEFAULT_LEXICON
        self.observations = list(self.lexicon)

    def __call__(self, report) -> np.ndarray:
        labels = np.zeros(len(self.observations), dtype=bool)
        for sentence in report.sentences:
            tokens = set(split_text(sentence))
            if tokens & NEGATION_CUES:
                continue
            for slot, name in enumerate(self.observations):
                if tokens & set(self.lexicon[name]):
                    labels[slot] = True
        return labels


def ce_counts(generated_labels: np.ndarray, reference_labels: np.ndarray):
    gen = np.asarray(generated_labels, dtype=bool)
    ref = np.asarray(reference_labels, dtype=bool)
    tp = int((gen & ref).sum())
    fp = int((gen & ~ref).sum())
    fn = int((~gen & ref).sum())
    return tp, fp, fn


def _prf(tp: int, fp: int, fn: int):
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def ce_metrics(generated, reference, labeler) -> tuple:
    """Micro precision/recall/F1 of labeler observations for one report pair."""
    return _prf(*ce_counts(labeler(generated), labeler(reference)))


def ce_metrics_corpus(pairs, labeler) -> tuple:
    """Micro-averaged over all report pairs and observation slots."""
    tp = fp = fn = 0
    for generated, reference in pairs:
        dtp, dfp, dfn = ce_counts(labeler(generated), labeler(reference))
        tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
    return _prf(tp, fp, fn)


@dataclass
class MetricReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    meteor_variant: float
    rouge_l: float
    cider_d: float
    ce_precision: float
    ce_recall: float
    ce_f1: float

    def validate(self):
        unit_fields = [
            "bleu_1", "bleu_2", "bleu_3", "bleu_4", "meteor_variant",
            "rouge_l", "ce_precision", "ce_recall", "ce_f1",
        ]
        for name in unit_fields:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise MetricError(f"{name} outside [0,1]: {value}")
        if not 0.0 <= self.cider_d <= 10.0:
            raise MetricError(f"cider_d outside [0,10]: {self.cider_d}")

    def to_dict(self) -> dict:
        return {
            "bleu_1": self.bleu_1, "bleu_2": self.bleu_2, "bleu_3": self.bleu_3,
            "bleu_4": self.bleu_4, "meteor_variant": self.meteor_variant,
            "rouge_l": self.rouge_l, "cider_d": self.cider_d,
            "ce_precision": self.ce_precision, "ce_recall": self.ce_recall,
            "ce_f1": self.ce_f1,
        }


def evaluate_report_corpus(generated_reports, reference_reports,
                           labeler=None) -> MetricReport:
    """Corpus metrics over whole reports (the 5 sentences concatenated)."""
    if len(generated_reports) != len(reference_reports):
        raise MetricError("generated and reference corpora must be parallel")
    labeler = labeler or KeywordLabeler()
    cands = [split_text(r.joined()) for r in generated_reports]
    refs = [split_text(r.joined()) for r in reference_reports]
    bleu = [float(np.mean([bleu_n(c, r, n) for c, r in zip(cands, refs)]))
            for n in (1, 2, 3, 4)]
    report = MetricReport(
        bleu_1=bleu[0], bleu_2=bleu[1], bleu_3=bleu[2], bleu_4=bleu[3],
        meteor_variant=float(np.mean([meteor_variant(c, r) for c, r in zip(cands, refs)])),
        rouge_l=float(np.mean([rouge_l(c, r) for c, r in zip(cands, refs)])),
        cider_d=cider_d(cands, refs),
        ce_precision=0.0, ce_recall=0.0, ce_f1=0.0,
    )
    p, r, f1 = ce_metrics_corpus(zip(generated_reports, reference_reports), labeler)
    report.ce_precision, report.ce_recall, report.ce_f1 = p, r, f1
    report.validate()
    return report
