"""Brute-force reference implementations used by the unit and acceptance tests."""

import math

import numpy as np

from reporag.retriever import Features, softmax


def weighted_ppl(nlls, weights):
    # weighted geometric mean of inverse probabilities, computed in the product domain
    probs = [math.exp(-x) for x in nlls]
    total = sum(weights)
    prod = 1.0
    for p, w in zip(probs, weights):
        prod *= p ** (w / total)
    return 1.0 / prod


def plain_ppl(nlls):
    return math.exp(sum(nlls) / len(nlls))


def argmin_rewards(ppls):
    best = min(ppls)
    return tuple(1 if p == best else 0 for p in ppls)


def levenshtein(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a)][len(b)]


def bm25(query_terms, docs, k1=1.2, b=0.75):
    N = len(docs)
    avgdl = sum(len(d) for d in docs) / N
    out = []
    for d in docs:
        s = 0.0
        for t in query_terms:
            n = sum(1 for x in docs if t in x)
            if n == 0:
                continue
            idf = math.log(1 + (N - n + 0.5) / (n + 0.5))
            f = d.count(t)
            s += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(d) / avgdl))
        out.append(s)
    return out


def objective(Wt, stop, temperature, query: Features, cands, rewards):
    """Pool objective recomputed from dense bags, no gradient."""
    h = Wt.shape[0]

    def dense(f):
        v = np.zeros(h)
        v[f.idx] = f.val
        return v

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))

    W = Wt.T
    q = W @ dense(query)
    scores = np.array([cos(q, stop if f is None else W @ dense(f)) for f in cands])
    p = softmax(scores, temperature)
    return float(sum(r * math.log(pi) for r, pi in zip(rewards, p) if r))
