"""Code tokenizer and a frozen n-gram language model with a context cache.

The static part is an order-``n`` model with add-k smoothing over the
training vocabulary plus ``<unk>``. On top of it sits a cache estimated from
the tokens the model is conditioned on (retrieved code, the unfinished file,
already-emitted target tokens). The cache interpolates history lengths
``0..cache_order`` with weights growing geometrically in the history length,
so a long verbatim match dominates. This is what lets the evaluator's
perplexity depend on which candidate was retrieved.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import LmError
from .ingest import CodeFile, Language

BOS = "<s>"
UNK = "<unk>"
_KEY_SEP = "\x1f"
_CACHE_GROWTH = 4.0


class TokenKind(str, Enum):
    IDENTIFIER = "Identifier"
    KEYWORD = "Keyword"
    NUMBER = "Number"
    STRING = "StringLit"
    OPERATOR = "Operator"
    NEWLINE = "Newline"
    OTHER = "Other"


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind
    ws: str = field(default="", compare=False)  # whitespace consumed before the token


@lru_cache(maxsize=None)
def keywords(language: Language) -> frozenset[str]:
    name = f"{language.value}_keywords.txt"
    raw = resources.files("reporag").joinpath("data", name).read_text(encoding="utf-8")
    return frozenset(w.strip() for w in raw.splitlines() if w.strip() and not w.startswith("#"))


_PY_OPS = [
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "**", "//", "==", "!=", "<=", ">=",
    "<<", ">>", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=",
]
_JAVA_OPS = [
    ">>>=", ">>>", "<<=", ">>=", "...", "->", "::", "++", "--", "&&", "||", "==", "!=",
    "<=", ">=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<",
]
_SINGLE_OPS = "+-*/%@&|^~<>()[]{},:;.=!?"

_NUMBER = (
    r"0[xX][0-9a-fA-F_]+[lL]?|0[bB][01_]+[lL]?|0[oO][0-7_]+"
    r"|(?:\d[\d_]*(?:\.[\d_]*)?|\.\d[\d_]*)(?:[eE][+-]?\d+)?[jJlLfFdD]?"
)


def _master(language: Language) -> re.Pattern:
    if language is Language.PYTHON:
        comment = r"\#[^\n]*"
        string = (
            r"(?:[rRbBuUfF]{1,2})?(?:'''[\s\S]*?'''|\"\"\"[\s\S]*?\"\"\""
            r"|'(?:\\.|[^'\\\n])*'|\"(?:\\.|[^\"\\\n])*\")"
        )
        ops = _PY_OPS
    else:
        comment = r"//[^\n]*|/\*[\s\S]*?\*/"
        string = r"\"\"\"[\s\S]*?\"\"\"|\"(?:\\.|[^\"\\\n])*\"|'(?:\\.|[^'\\\n])*'"
        ops = _JAVA_OPS
    op = "|".join(re.escape(o) for o in ops) + "|[" + re.escape(_SINGLE_OPS) + "]"
    return re.compile(
        rf"(?P<ws>[ \t\f\v\r]+)|(?P<nl>\n)|(?P<comment>{comment})|(?P<string>{string})"
        rf"|(?P<number>{_NUMBER})|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>{op})|(?P<other>.)",
        re.DOTALL,
    )


_PATTERNS = {lang: _master(lang) for lang in Language}


def tokenize(text: str, language: Language | str = Language.PYTHON) -> list[Token]:
    language = Language.parse(language)
    kw = keywords(language)
    tokens: list[Token] = []
    pending_ws = ""
    for m in _PATTERNS[language].finditer(text):
        group, value = m.lastgroup, m.group()
        if group == "ws":
            pending_ws += value
            continue
        if group == "nl":
            kind = TokenKind.NEWLINE
        elif group == "ident":
            kind = TokenKind.KEYWORD if value in kw else TokenKind.IDENTIFIER
        elif group == "number":
            kind = TokenKind.NUMBER
        elif group == "string":
            kind = TokenKind.STRING
        elif group == "op":
            kind = TokenKind.OPERATOR
        else:
            kind = TokenKind.OTHER
        tokens.append(Token(value, kind, pending_ws))
        pending_ws = ""
    return tokens


def lm_tokens(text: str, language: Language | str = Language.PYTHON) -> list[Token]:
    """Token stream the language model conditions on.

    Line comments are replaced by the tokens of their body (marker and one
    following space removed), so code quoted in a comment stays visible.
    """
    language = Language.parse(language)
    marker = language.comment_prefix
    out: list[Token] = []
    for tok in tokenize(text, language):
        if tok.kind is TokenKind.OTHER and tok.text.startswith(marker):
            body = tok.text[len(marker):]
            if body.startswith(" "):
                body = body[1:]
            out.extend(tokenize(body, language))
        else:
            out.append(tok)
    return out


def _texts(seq: Sequence[Token] | Sequence[str]) -> list[str]:
    return [t.text if isinstance(t, Token) else t for t in seq]


class ContextCache:
    """Counts of (history, next token) pairs over a growing token stream."""

    def __init__(self, order: int, tokens: Iterable[str] = (), ws: Iterable[str] | None = None):
        self.order = order
        self.stream: list[str] = []
        self._counts: list[dict[tuple, Counter]] = [{} for _ in range(order + 1)]
        self._totals: list[dict[tuple, int]] = [{} for _ in range(order + 1)]
        self._ws: list[dict[tuple, str]] = [{} for _ in range(order + 1)]
        ws_list = list(ws) if ws is not None else None
        for i, tok in enumerate(tokens):
            self.add(tok, ws_list[i] if ws_list is not None else "")

    def __len__(self) -> int:
        return len(self.stream)

    def add(self, tok: str, ws: str = "") -> None:
        n = len(self.stream)
        for j in range(min(self.order, n) + 1):
            hist = tuple(self.stream[n - j :]) if j else ()
            table = self._counts[j].get(hist)
            if table is None:
                table = self._counts[j][hist] = Counter()
            table[tok] += 1
            self._totals[j][hist] = self._totals[j].get(hist, 0) + 1
            self._ws[j][(hist, tok)] = ws
        self.stream.append(tok)

    def _tables(self):
        n = len(self.stream)
        for j in range(min(self.order, n) + 1):
            hist = tuple(self.stream[n - j :]) if j else ()
            table = self._counts[j].get(hist)
            if table:
                yield j, table, self._totals[j][hist]

    def distribution(self) -> dict[str, float]:
        """Interpolated next-token distribution; empty when nothing is cached."""
        mix: dict[str, float] = {}
        norm = 0.0
        for j, table, total in self._tables():
            alpha = _CACHE_GROWTH**j
            norm += alpha
            for tok, c in table.items():
                mix[tok] = mix.get(tok, 0.0) + alpha * c / total
        if norm:
            for tok in mix:
                mix[tok] /= norm
        return mix

    def prob(self, tok: str) -> float | None:
        num = 0.0
        norm = 0.0
        for j, table, total in self._tables():
            alpha = _CACHE_GROWTH**j
            norm += alpha
            c = table.get(tok)
            if c:
                num += alpha * c / total
        return num / norm if norm else None

    def whitespace(self, tok: str) -> str | None:
        """Whitespace seen before ``tok`` under the longest matching history."""
        n = len(self.stream)
        for j in range(min(self.order, n), -1, -1):
            hist = tuple(self.stream[n - j :]) if j else ()
            ws = self._ws[j].get((hist, tok))
            if ws is not None:
                return ws
        return None


class NGramModel:
    """Frozen add-k smoothed n-gram model. Construct via :func:`train_ngram` or :meth:`load`."""

    def __init__(
        self,
        order: int,
        add_k: float,
        vocab: Sequence[str],
        counts: dict[str, dict[str, int]],
        cache_order: int = 6,
        cache_weight: float = 0.7,
    ):
        if order < 1:
            raise ValueError("order must be >= 1")
        if add_k <= 0:
            raise ValueError("add_k must be positive")
        if not 0 <= cache_weight < 1:
            raise ValueError("cache_weight must lie in [0, 1)")
        self._order = order
        self._add_k = float(add_k)
        self._vocab = tuple(vocab)
        self._vocab_set = frozenset(vocab)
        self._counts = {ctx: dict(row) for ctx, row in counts.items()}
        self._totals = {ctx: sum(row.values()) for ctx, row in self._counts.items()}
        self.cache_order = cache_order
        self.cache_weight = cache_weight

    order = property(lambda self: self._order)
    add_k = property(lambda self: self._add_k)
    vocab = property(lambda self: self._vocab)

    @property
    def space_size(self) -> int:
        """|vocab ∪ {UNK}|."""
        return len(self._vocab) + 1

    def map_token(self, tok: str) -> str:
        return tok if tok in self._vocab_set or tok == BOS else UNK

    def context_key(self, history: Sequence[str]) -> str:
        n = self._order - 1
        if n == 0:
            return ""
        hist = [self.map_token(t) for t in history[-n:]]
        hist = [BOS] * (n - len(hist)) + hist
        return _KEY_SEP.join(hist)

    def static_prob(self, tok: str, ctx_key: str) -> float:
        """P(tok | ctx) where ``tok`` is a vocabulary entry or UNK."""
        c = self._counts.get(ctx_key, {}).get(tok, 0)
        return (c + self._add_k) / (self._totals.get(ctx_key, 0) + self._add_k * self.space_size)

    def static_distribution(self, ctx_key: str) -> dict[str, float]:
        return {t: self.static_prob(t, ctx_key) for t in (*self._vocab, UNK)}

    def prob(self, tok: str, history: Sequence[str], cache: ContextCache | None = None) -> float:
        ps = self.static_prob(self.map_token(tok), self.context_key(history))
        if cache is None or self.cache_weight == 0:
            return ps
        pc = cache.prob(tok)
        if pc is None:
            return ps
        return (1 - self.cache_weight) * ps + self.cache_weight * pc

    def distribution(self, history: Sequence[str], cache: ContextCache | None = None) -> dict[str, float]:
        """Next-token distribution over vocab ∪ {UNK}; cached out-of-vocabulary mass goes to UNK."""
        dist = self.static_distribution(self.context_key(history))
        if cache is None or self.cache_weight == 0:
            return dist
        pc = cache.distribution()
        if not pc:
            return dist
        lam = self.cache_weight
        out = {t: (1 - lam) * p for t, p in dist.items()}
        for tok, p in pc.items():
            key = tok if tok in self._vocab_set else UNK
            out[key] += lam * p
        return out

    def proposals(self, history: Sequence[str], cache: ContextCache | None) -> dict[str, float]:
        """Probabilities of every token that can win a greedy argmax (UNK itself excluded)."""
        ctx = self.context_key(history)
        row = self._counts.get(ctx, {})
        denom = self._totals.get(ctx, 0) + self._add_k * self.space_size
        pc = cache.distribution() if cache is not None and self.cache_weight else {}
        lam = self.cache_weight if pc else 0.0
        out = {t: (1 - lam) * (c + self._add_k) / denom for t, c in row.items() if t not in (UNK, BOS)}
        if not out and self._vocab:
            out[self._vocab[0]] = (1 - lam) * self._add_k / denom
        for tok, p in pc.items():
            base = out.get(tok)
            if base is None:
                c = row.get(tok if tok in self._vocab_set else UNK, 0)
                base = (1 - lam) * (c + self._add_k) / denom
            out[tok] = base + lam * p
        return out

    def to_json(self) -> dict:
        return {
            "add_k": self._add_k,
            "cache_order": self.cache_order,
            "cache_weight": self.cache_weight,
            "counts": self._counts,
            "order": self._order,
            "vocab": list(self._vocab),
        }

    def save(self, path: str | Path, config_digest: str | None = None) -> None:
        obj = self.to_json()
        if config_digest:
            obj["config_digest"] = config_digest
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, obj: dict) -> "NGramModel":
        return cls(
            obj["order"], obj["add_k"], obj["vocab"], obj["counts"],
            obj.get("cache_order", 6), obj.get("cache_weight", 0.7),
        )

    @classmethod
    def load(cls, path: str | Path) -> "NGramModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def train_ngram(
    corpus: Iterable[CodeFile],
    order: int = 3,
    add_k: float = 0.01,
    min_count: int = 2,
    cache_order: int = 6,
    cache_weight: float = 0.7,
) -> NGramModel:
    streams = [[t.text for t in lm_tokens(f.text, f.language)] for f in corpus]
    if not streams:
        raise LmError("cannot train on an empty corpus", reason="EmptyCorpus")
    freq = Counter(t for s in streams for t in s)
    vocab = sorted(t for t, c in freq.items() if c >= min_count)
    vocab_set = set(vocab)
    counts: dict[str, dict[str, int]] = {}
    pad = [BOS] * (order - 1)
    for s in streams:
        seq = pad + [t if t in vocab_set else UNK for t in s]
        for i in range(order - 1, len(seq)):
            ctx = _KEY_SEP.join(seq[i - order + 1 : i]) if order > 1 else ""
            row = counts.setdefault(ctx, {})
            row[seq[i]] = row.get(seq[i], 0) + 1
    counts = {ctx: dict(sorted(row.items())) for ctx, row in sorted(counts.items())}
    return NGramModel(order, add_k, vocab, counts, cache_order, cache_weight)


def sequence_nll(
    model: NGramModel,
    context: Sequence[Token] | Sequence[str],
    target: Sequence[Token] | Sequence[str],
) -> list[float]:
    """Per-token negative log-probabilities (nats) of ``target`` after ``context``."""
    tgt = _texts(target)
    if not tgt:
        raise LmError("target is empty", reason="EmptyTarget")
    ctx = _texts(context)
    cache = ContextCache(model.cache_order, ctx) if model.cache_weight else None
    history = list(ctx)
    out = []
    for tok in tgt:
        out.append(-math.log(model.prob(tok, history, cache)))
        history.append(tok)
        if cache is not None:
            cache.add(tok)
    return out
