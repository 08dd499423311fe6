"""Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr.

Every scorer takes tokenized candidates and, per item, a list of tokenized
references. Scores are internally consistent but not byte-identical to the
MSCOCO evaluation server, which uses a different tokenizer.
"""

import math
import string
from collections import Counter

__all__ = ["tokenize", "ngram_counts", "bleu", "lcs_len", "rouge_l", "rouge_l_corpus", "cider", "score_corpus"]

_PUNCT = string.punctuation


def tokenize(s):
    """Lowercase, split on whitespace, strip ASCII punctuation at token ends."""
    out = []
    for tok in s.lower().split():
        tok = tok.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c, refs):
    # Ties go to the shorter reference.
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-n for n = 1..max_n, returned as a list.

    Clipped n-gram matches and candidate n-gram totals are summed over the
    corpus before taking the geometric mean; the brevity penalty uses the
    closest reference length per item. No smoothing: any zero precision
    makes that BLEU-n zero.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if not candidates:
        return [0.0] * max_n
    matched = [0] * max_n
    total = [0] * max_n
    c_len = 0
    r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every item needs at least one reference")
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for n in range(1, max_n + 1):
            cand_counts = ngram_counts(cand, n)
            max_ref = Counter()
            for ref in refs:
                for g, k in ngram_counts(ref, n).items():
                    if k > max_ref[g]:
                        max_ref[g] = k
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in cand_counts.items())
            total[n - 1] += sum(cand_counts.values())
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0 or total[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_len(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta=1.2):
    """Sentence ROUGE-L F-measure, best over the references."""
    if not references:
        raise ValueError("ROUGE-L needs at least one reference")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = lcs_len(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + beta**2) * p * r / (r + beta**2 * p)
        best = max(best, f)
    return best


def rouge_l_corpus(candidates, references, beta=1.2):
    if not candidates:
        return 0.0
    return sum(rouge_l(c, refs, beta) for c, refs in zip(candidates, references)) / len(candidates)


def _tfidf(counts, df, log_n):
    # Unseen n-grams get document frequency 1, as in the reference CIDEr code.
    return {g: k * (log_n - math.log(max(1.0, df.get(g, 0)))) for g, k in counts.items()}


def _cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider(candidates, references, max_n=4):
    """CIDEr on a 0..10 scale.

    IDF is computed from the reference sets: an n-gram's document frequency
    is the number of items whose references contain it.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if len(candidates) < 2:
        raise ValueError("CIDEr needs at least 2 items: IDF is degenerate for a single document")
    n_items = len(candidates)
    log_n = math.log(n_items)
    total = 0.0
    for n in range(1, max_n + 1):
        ref_counts = [[ngram_counts(r, n) for r in refs] for refs in references]
        df = Counter()
        for item in ref_counts:
            for g in set().union(*item):
                df[g] += 1
        per_item = 0.0
        for cand, item in zip(candidates, ref_counts):
            vc = _tfidf(ngram_counts(cand, n), df, log_n)
            sims = [_cosine(vc, _tfidf(rc, df, log_n)) for rc in item]
            per_item += sum(sims) / len(sims)
        total += per_item / n_items
    return 10.0 * total / max_n


def score_corpus(candidates, references):
    """All metrics as a flat dict; CIDEr is omitted for single-item corpora."""
    b = bleu(candidates, references)
    out = {f"bleu_{n}": b[n - 1] for n in range(1, 5)}
    out["rouge_l"] = rouge_l_corpus(candidates, references)
    if len(candidates) >= 2:
        out["cider"] = cider(candidates, references)
    return out
