"""Independent reference implementations used only to check the package.

Deliberately written before and apart from the main code paths, in a
different style (Fraction arithmetic, greedy list matching, explicit loops),
so a shared bug between implementation and oracle is unlikely.
"""

from __future__ import annotations

import math
from fractions import Fraction

PUNCT = ".,!?;:'\"()"


def ref_tokenize(text):
    out = []
    for raw in text.lower().split():
        word = "".join(ch for ch in raw if ch not in PUNCT)
        if word:
            out.append(word)
    return out


def ref_query_f1(predicted, gold):
    """Token-overlap F1 on the 0-100 scale, by greedy multiset matching."""
    pred = ref_tokenize(predicted)
    ref = list(ref_tokenize(gold))
    if not ref:
        raise ValueError("gold query empty after tokenization")
    if not pred:
        return 0.0
    common = 0
    pool = list(ref)
    for tok in pred:
        if tok in pool:
            pool.remove(tok)
            common += 1
    if common == 0:
        return 0.0
    precision = Fraction(common, len(pred))
    recall = Fraction(common, len(ref))
    f1 = 2 * precision * recall / (precision + recall)
    return float(100 * f1)


def _ref_ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def ref_corpus_bleu(candidates, references):
    """Corpus BLEU-4 (clipped precisions, geometric mean, brevity penalty).

    Single reference per candidate, no smoothing, score on 0-100.
    """
    if len(candidates) != len(references):
        raise ValueError("length mismatch")
    if not candidates:
        raise ValueError("empty corpus")
    cand_toks = [ref_tokenize(c) for c in candidates]
    ref_toks = [ref_tokenize(r) for r in references]

    c_len = sum(len(t) for t in cand_toks)
    r_len = sum(len(t) for t in ref_toks)
    if c_len == 0:
        return 0.0

    precisions = []
    for n in (1, 2, 3, 4):
        matched = 0
        total = 0
        for cand, ref in zip(cand_toks, ref_toks):
            ccounts = _ref_ngram_counts(cand, n)
            rcounts = _ref_ngram_counts(ref, n)
            for gram, cnt in ccounts.items():
                matched += min(cnt, rcounts.get(gram, 0))
                total += cnt
        if total == 0 or matched == 0:
            return 0.0
        precisions.append(Fraction(matched, total))

    log_sum = sum(0.25 * math.log(float(p)) for p in precisions)
    bp = 1.0 if c_len > r_len else math.exp(1 - Fraction(r_len, c_len))
    return 100.0 * bp * math.exp(log_sum)


def ref_db_matches(records, constraints):
    """Brute-force record filter: every constraint slot present and equal."""

    def norm(v):
        return " ".join(str(v).lower().split())

    kept = []
    for rec in records:
        ok = True
        for slot, value in constraints:
            if slot not in rec:
                ok = False
                break
            if norm(rec[slot]) != norm(value):
                ok = False
                break
        if ok:
            kept.append(rec)
    return kept
