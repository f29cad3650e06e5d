"""Candidate scoring: Okapi BM25, a hashed-bag linear encoder, and stop-signal truncation."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .chunker import Candidate, CandidateStore
from .errors import RetrieverError
from .ingest import Language
from .lm import TokenKind, tokenize

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|[0-9]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def split_identifier(name: str) -> list[str]:
    """``fooBar`` and ``foo_bar`` both give ``['foo', 'bar']``."""
    out = []
    for part in name.split("_"):
        out.extend(p.lower() for p in _CAMEL.findall(part))
    return out


@lru_cache(maxsize=1 << 16)
def subtokens(text: str, language: Language = Language.PYTHON) -> tuple[str, ...]:
    """Lower-cased identifier pieces, including words inside comments and strings."""
    out: list[str] = []
    for tok in tokenize(text, language):
        if tok.kind in (TokenKind.IDENTIFIER, TokenKind.KEYWORD):
            out.extend(split_identifier(tok.text))
        elif tok.kind in (TokenKind.OTHER, TokenKind.STRING):
            for w in _WORD.findall(tok.text):
                out.extend(split_identifier(w))
    return tuple(out)


@lru_cache(maxsize=1 << 16)
def _bucket(word: str, hash_dim: int) -> tuple[int, float]:
    h = fnv1a_64(word.encode("utf-8"))
    return h % hash_dim, -1.0 if h >> 63 else 1.0


@dataclass(frozen=True)
class Features:
    """L2-normalised signed hashed bag of sub-tokens, stored sparsely."""

    idx: np.ndarray  # int64, sorted, unique
    val: np.ndarray  # float64

    @property
    def empty(self) -> bool:
        return self.idx.size == 0


def hash_features(text: str, hash_dim: int, language: Language = Language.PYTHON) -> Features:
    acc: dict[int, float] = {}
    for w in subtokens(text, language):
        b, sign = _bucket(w, hash_dim)
        acc[b] = acc.get(b, 0.0) + sign
    items = sorted((b, v) for b, v in acc.items() if v != 0.0)
    if not items:
        return Features(np.zeros(0, dtype=np.int64), np.zeros(0))
    idx = np.fromiter((b for b, _ in items), dtype=np.int64, count=len(items))
    val = np.fromiter((v for _, v in items), dtype=np.float64, count=len(items))
    return Features(idx, val / np.linalg.norm(val))


def embed_many(feats: Sequence[Features], Wt: np.ndarray) -> np.ndarray:
    """Row ``i`` is the embedding of ``feats[i]``; only touched buckets are read."""
    if not feats:
        return np.zeros((0, Wt.shape[1]))
    indptr = np.zeros(len(feats) + 1, dtype=np.int64)
    for i, f in enumerate(feats):
        indptr[i + 1] = indptr[i] + f.idx.size
    if indptr[-1] == 0:
        return np.zeros((len(feats), Wt.shape[1]))
    idx = np.concatenate([f.idx for f in feats])
    val = np.concatenate([f.val for f in feats])
    uniq, inv = np.unique(idx, return_inverse=True)
    local = sp.csr_matrix((val, inv, indptr), shape=(len(feats), len(uniq)))
    return np.asarray(local @ Wt[uniq].astype(np.float64))


@dataclass
class RetrieverModel:
    """Linear map of hashed bags plus a learned stop embedding.

    ``Wt`` holds the projection transposed (``hash_dim x dim``) so that a
    bucket's embedding column is contiguous. Parameters are float32.
    """

    Wt: np.ndarray
    stop: np.ndarray
    temperature: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def init(cls, dim: int = 128, hash_dim: int = 1 << 16, temperature: float = 0.1, seed: int = 0) -> "RetrieverModel":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hash_dim)
        W = rng.uniform(-bound, bound, size=(dim, hash_dim)).astype(np.float32)
        stop = rng.uniform(-bound, bound, size=dim).astype(np.float32)
        return cls(np.ascontiguousarray(W.T), stop, temperature, seed)

    @property
    def dim(self) -> int:
        return self.Wt.shape[1]

    @property
    def hash_dim(self) -> int:
        return self.Wt.shape[0]

    @property
    def W(self) -> np.ndarray:
        return self.Wt.T

    def copy(self) -> "RetrieverModel":
        return RetrieverModel(self.Wt.copy(), self.stop.copy(), self.temperature, self.seed)

    def features(self, text: str, language: Language = Language.PYTHON) -> Features:
        return hash_features(text, self.hash_dim, language)

    def embed_features(self, f: Features) -> np.ndarray:
        if f.empty:
            return np.zeros(self.dim)
        return f.val @ self.Wt[f.idx].astype(np.float64)


def embed(text: str, model: RetrieverModel, language: Language = Language.PYTHON) -> np.ndarray:
    return model.embed_features(model.features(text, language))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def softmax(scores: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def policy_scores(query_emb: np.ndarray, cand_embs: np.ndarray, is_stop: np.ndarray, stop: np.ndarray) -> np.ndarray:
    """Cosine of the query with each candidate embedding; stop rows use ``stop``."""
    rows = np.where(is_stop[:, None], stop.astype(np.float64)[None, :], cand_embs)
    qn = np.linalg.norm(query_emb)
    rn = np.linalg.norm(rows, axis=1)
    denom = qn * rn
    out = np.zeros(len(rows))
    ok = denom > 0
    out[ok] = (rows[ok] @ query_emb) / denom[ok]
    return out


def _pool_embeddings(pool: Sequence[Candidate], model: RetrieverModel, language: Language) -> np.ndarray:
    return embed_many([model.features(c.text, language) for c in pool], model.Wt)


def policy_distribution(
    query: str, pool: Sequence[Candidate], model: RetrieverModel, language: Language = Language.PYTHON
) -> np.ndarray:
    if not pool:
        raise ValueError("pool must be non-empty")
    q = embed(query, model, language)
    is_stop = np.array([c.is_stop for c in pool])
    scores = policy_scores(q, _pool_embeddings(pool, model, language), is_stop, model.stop)
    return softmax(scores, model.temperature)


@dataclass
class RankedList:
    entries: list[tuple[Candidate, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def candidates(self) -> list[Candidate]:
        return [c for c, _ in self.entries]

    @property
    def stop_position(self) -> int | None:
        for i, (c, _) in enumerate(self.entries):
            if c.is_stop:
                return i
        return None


def _rank(cands: Sequence[Candidate], scores: Sequence[float], topn: int | None = None) -> RankedList:
    order = sorted(range(len(cands)), key=lambda i: (-scores[i], cands[i].rel_path, cands[i].start_line))
    if topn is not None:
        order = order[:topn]
    return RankedList([(cands[i], float(scores[i])) for i in order])


class BM25:
    """Okapi BM25 over sub-token bags. Stop candidates are indexed as empty documents."""

    def __init__(self, docs: Sequence[Sequence[str]], k1: float = 1.2, b: float = 0.75, live: Sequence[bool] | None = None):
        self.k1, self.b = k1, b
        live = list(live) if live is not None else [True] * len(docs)
        self.tf = [Counter(d) for d in docs]
        self.dl = [len(d) for d in docs]
        n_live = sum(live)
        self.avgdl = (sum(l for l, ok in zip(self.dl, live) if ok) / n_live) if n_live else 0.0
        df: Counter = Counter()
        for d, ok in zip(docs, live):
            if ok:
                df.update(set(d))
        self.idf = {t: math.log(1 + (n_live - n + 0.5) / (n + 0.5)) for t, n in df.items()}

    def scores(self, query: Sequence[str]) -> list[float]:
        out = []
        for tf, dl in zip(self.tf, self.dl):
            s = 0.0
            if dl:
                norm = self.k1 * (1 - self.b + self.b * dl / self.avgdl)
                for term in query:
                    f = tf.get(term)
                    if f:
                        s += self.idf[term] * f * (self.k1 + 1) / (f + norm)
            out.append(s)
        return out


def bm25_scores(query: str, cands: Sequence[Candidate], language: Language = Language.PYTHON) -> list[float]:
    docs = [() if c.is_stop else subtokens(c.text, language) for c in cands]
    index = BM25(docs, live=[not c.is_stop for c in cands])
    return index.scores(subtokens(query, language))


def bm25_rank(query: str, store: CandidateStore, topn: int | None = None, language: Language = Language.PYTHON) -> RankedList:
    cands = list(store.candidates)
    if not cands:
        raise ValueError("store must be non-empty")
    return _rank(cands, bm25_scores(query, cands, language), topn)


def policy_rank(query: str, store: CandidateStore, model: RetrieverModel, language: Language = Language.PYTHON) -> RankedList:
    cands = list(store.candidates)
    q = embed(query, model, language)
    is_stop = np.array([c.is_stop for c in cands])
    scores = policy_scores(q, _pool_embeddings(cands, model, language), is_stop, model.stop)
    return _rank(cands, scores)


def truncate_at_stop(ranked: RankedList, max_keep: int) -> list[Candidate]:
    pos = ranked.stop_position
    if pos is None:
        raise RetrieverError("ranked list has no stop candidate", reason="NoStop")
    return ranked.candidates[: min(pos, max_keep)]


def query_from_prefix(prefix: str, lines: int = 20) -> str:
    """Last ``lines`` non-blank lines of the unfinished code."""
    kept = [line for line in prefix.split("\n") if line.strip()]
    return "\n".join(kept[-lines:])
