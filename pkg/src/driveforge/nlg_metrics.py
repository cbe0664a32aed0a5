"""Text-similarity metrics for VQA answers.

All metrics operate on token lists produced by :func:`tokenize` (lowercase,
punctuation stripped, whitespace split). Implemented forms, pinned for
reproducibility:

* bleu:   geometric mean of clipped n-gram precisions with add-epsilon
          smoothing (eps = 1e-9) times the brevity penalty. Corpus scores
          are mean sentence-level, reported as such.
* rouge_l: LCS F-measure with beta = 1.2 weighting recall.
* cider:  mean over n = 1..4 of 10 x cosine similarity between TF-IDF
          n-gram vectors; IDF from the reference corpus; plain form with
          no length penalty, so scores live in [0, 10].
* meteor_simplified: unigram alignment on exact plus stemmed matches
          (self-contained Porter-style stemmer, no synonym tables),
          F_mean = 10PR/(R + 9P), chunk penalty 0.5 (chunks/matches)^3.
          Reported with an "-s" suffix because of the omission.
"""

from __future__ import annotations

import math
import string
from collections import Counter

from .errors import CorpusTooSmallError, EmptyCandidateError

EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_MAX_N = 4
METRIC_NAMES = ("CI-r", "BL-1", "BL-4", "ME-R-s", "RO-L")

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def _closest_ref_len(candidate_len: int, references) -> int:
    # Closest reference length; ties prefer the shorter reference.
    return min((abs(len(r) - candidate_len), len(r)) for r in references)[1]


def bleu(candidate, references, n: int = 4) -> float:
    """Sentence BLEU-n with add-epsilon smoothing and brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if not candidate:
        raise EmptyCandidateError("BLEU candidate is empty")
    if not references:
        raise ValueError("BLEU needs at least one reference")

    log_sum = 0.0
    for k in range(1, n + 1):
        cand_counts = ngram_counts(candidate, k)
        max_ref = Counter()
        for ref in references:
            for gram, cnt in ngram_counts(ref, k).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        clipped = sum(min(cnt, max_ref[gram]) for gram, cnt in cand_counts.items())
        total = max(0, len(candidate) - k + 1)
        log_sum += math.log((clipped + EPS) / (total + EPS))
    precision = math.exp(log_sum / n)

    c, r = len(candidate), _closest_ref_len(len(candidate), references)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return precision * brevity


def bleu_corpus(candidates, references_per_candidate, n: int = 4) -> float:
    """Mean sentence-level BLEU over aligned (candidate, references) pairs."""
    scores = [bleu(c, refs, n)
              for c, refs in zip(candidates, references_per_candidate)]
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a, b) -> int:
    """Longest common subsequence length, O(len(a) * len(b))."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure; beta > 1 weights recall above precision."""
    if not candidate:
        raise EmptyCandidateError("ROUGE-L candidate is empty")
    if not reference:
        raise ValueError("ROUGE-L reference is empty")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    b2 = beta * beta
    return (1 + b2) * precision * recall / (recall + b2 * precision)


# ---------------------------------------------------------------------------
# CIDEr


def cider_idf(references, max_n: int = CIDER_MAX_N):
    """Document frequencies over the reference corpus, as IDF weights.

    IDF(g) = log(N / max(1, df(g))), so duplicating every document leaves
    the weights unchanged.
    """
    if len(references) < 2:
        raise CorpusTooSmallError(
            f"CIDEr needs >= 2 reference documents, got {len(references)}")
    num_docs = len(references)
    df: Counter = Counter()
    for ref in references:
        seen = set()
        for k in range(1, max_n + 1):
            seen.update(ngram_counts(ref, k).keys())
        df.update(seen)
    idf = {gram: math.log(num_docs / max(1.0, count))
           for gram, count in df.items()}
    return idf, num_docs


def _tfidf_vector(tokens, n: int, idf, num_docs) -> dict:
    default_idf = math.log(num_docs)  # unseen n-grams get df = 1
    return {gram: cnt * idf.get(gram, default_idf)
            for gram, cnt in ngram_counts(tokens, n).items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider_pair(candidate, reference, idf, num_docs,
               max_n: int = CIDER_MAX_N) -> float:
    """10 x mean cosine TF-IDF similarity over n = 1..max_n."""
    if not candidate:
        raise EmptyCandidateError("CIDEr candidate is empty")
    sims = []
    for n in range(1, max_n + 1):
        u = _tfidf_vector(candidate, n, idf, num_docs)
        v = _tfidf_vector(reference, n, idf, num_docs)
        sims.append(_cosine(u, v))
    return 10.0 * sum(sims) / max_n


def cider(candidates, references, max_n: int = CIDER_MAX_N) -> float:
    """Mean pair score over aligned candidates/references; IDF from the
    reference corpus."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    idf, num_docs = cider_idf(references, max_n)
    scores = [cider_pair(c, r, idf, num_docs, max_n)
              for c, r in zip(candidates, references)]
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# Porter-style stemmer (METEOR only)


_VOWELS = "aeiou"


def _is_cons(word: str, i: int) -> bool:
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_cons(word, i - 1)
    return True


def _measure(stem: str) -> int:
    """Number of vowel-consonant sequences (the Porter m)."""
    out = []
    for i in range(len(stem)):
        tag = "c" if _is_cons(stem, i) else "v"
        if not out or out[-1] != tag:
            out.append(tag)
    return "".join(out).count("vc")


def _has_vowel(stem: str) -> bool:
    return any(not _is_cons(stem, i) for i in range(len(stem)))


def _ends_double_cons(word: str) -> bool:
    return (len(word) >= 2 and word[-1] == word[-2]
            and _is_cons(word, len(word) - 1))


def _ends_cvc(word: str) -> bool:
    if len(word) < 3:
        return False
    return (_is_cons(word, len(word) - 3)
            and not _is_cons(word, len(word) - 2)
            and _is_cons(word, len(word) - 1)
            and word[-1] not in "wxy")


_STEP2 = (("ational", "ate"), ("tional", "tion"), ("enci", "ence"),
          ("anci", "ance"), ("izer", "ize"), ("abli", "able"), ("alli", "al"),
          ("entli", "ent"), ("eli", "e"), ("ousli", "ous"), ("ization", "ize"),
          ("ation", "ate"), ("ator", "ate"), ("alism", "al"),
          ("iveness", "ive"), ("fulness", "ful"), ("ousness", "ous"),
          ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"))
_STEP3 = (("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
          ("ical", "ic"), ("ful", ""), ("ness", ""))
_STEP4 = ("al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
          "ment", "ent", "ou", "ism", "ate", "iti", "ous", "ive", "ize")


def porter_stem(word: str) -> str:
    """Classic Porter suffix stripping; short words pass through."""
    w = word.lower()
    if len(w) <= 2:
        return w

    # step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif w.endswith("ss"):
        pass
    elif w.endswith("s"):
        w = w[:-1]

    # step 1b
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        flag = False
        if w.endswith("ed") and _has_vowel(w[:-2]):
            w, flag = w[:-2], True
        elif w.endswith("ing") and _has_vowel(w[:-3]):
            w, flag = w[:-3], True
        if flag:
            if w.endswith(("at", "bl", "iz")):
                w += "e"
            elif _ends_double_cons(w) and w[-1] not in "lsz":
                w = w[:-1]
            elif _measure(w) == 1 and _ends_cvc(w):
                w += "e"

    # step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # steps 2 and 3
    for table in (_STEP2, _STEP3):
        for suffix, replacement in table:
            if w.endswith(suffix):
                stem = w[: len(w) - len(suffix)]
                if _measure(stem) > 0:
                    w = stem + replacement
                break

    # step 4
    for suffix in _STEP4:
        if w.endswith(suffix):
            stem = w[: len(w) - len(suffix)]
            if _measure(stem) > 1:
                w = stem
            break
    else:
        if w.endswith("ion") and len(w) > 3 and w[-4] in "st" \
                and _measure(w[:-3]) > 1:
            w = w[:-3]

    # step 5a
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            w = stem
    # step 5b
    if _measure(w) > 1 and _ends_double_cons(w) and w.endswith("l"):
        w = w[:-1]
    return w


# ---------------------------------------------------------------------------
# Simplified METEOR


def _align(candidate, reference) -> list[tuple[int, int]]:
    """Greedy in-order unigram alignment: exact pass, then stemmed pass."""
    matched_ref: set[int] = set()
    alignment: dict[int, int] = {}

    def run_pass(key):
        ref_keys = [key(t) for t in reference]
        for i, token in enumerate(candidate):
            if i in alignment:
                continue
            want = key(token)
            for j, have in enumerate(ref_keys):
                if j in matched_ref:
                    continue
                if want == have:
                    alignment[i] = j
                    matched_ref.add(j)
                    break

    run_pass(lambda t: t)
    run_pass(porter_stem)
    return sorted(alignment.items())


def _chunks(alignment) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or (i != prev[0] + 1 or j != prev[1] + 1):
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_simplified(candidate, reference) -> float:
    """Unigram METEOR without synonym or paraphrase tables."""
    if not candidate:
        raise EmptyCandidateError("METEOR candidate is empty")
    if not reference:
        raise ValueError("METEOR reference is empty")
    alignment = _align(candidate, reference)
    matches = len(alignment)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (_chunks(alignment) / matches) ** 3
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# Corpus evaluation


def evaluate_corpus(candidates: list[str], references: list[str]) -> dict:
    """Tokenize and score aligned candidate/reference strings.

    Returns the metric table keyed by display name (METEOR carries the
    "-s" suffix because synonym matching is omitted).
    """
    cand_tokens = [tokenize(c) for c in candidates]
    ref_tokens = [tokenize(r) for r in references]
    bl1 = [bleu(c, [r], 1) for c, r in zip(cand_tokens, ref_tokens)]
    bl4 = [bleu(c, [r], 4) for c, r in zip(cand_tokens, ref_tokens)]
    rl = [rouge_l(c, r) for c, r in zip(cand_tokens, ref_tokens)]
    me = [meteor_simplified(c, r) for c, r in zip(cand_tokens, ref_tokens)]
    mean = lambda xs: sum(xs) / len(xs)
    return {
        "CI-r": cider(cand_tokens, ref_tokens),
        "BL-1": mean(bl1),
        "BL-4": mean(bl4),
        "ME-R-s": mean(me),
        "RO-L": mean(rl),
    }
