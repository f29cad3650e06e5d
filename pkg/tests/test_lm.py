import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from reporag.errors import LmError
from reporag.ingest import Language
from reporag.lm import (
    UNK,
    ContextCache,
    NGramModel,
    TokenKind,
    keywords,
    lm_tokens,
    sequence_nll,
    tokenize,
    train_ngram,
)

from conftest import py

K = TokenKind


def kinds(text, lang="python"):
    return [(t.kind, t.text) for t in tokenize(text, lang)]


def test_tokenize_assignment():
    assert kinds("x = 1") == [(K.IDENTIFIER, "x"), (K.OPERATOR, "="), (K.NUMBER, "1")]


def test_tokenize_def():
    assert kinds("def f():") == [
        (K.KEYWORD, "def"), (K.IDENTIFIER, "f"), (K.OPERATOR, "("), (K.OPERATOR, ")"), (K.OPERATOR, ":"),
    ]


def test_tokenize_call():
    assert kinds("foo_bar.baz(2)") == [
        (K.IDENTIFIER, "foo_bar"), (K.OPERATOR, "."), (K.IDENTIFIER, "baz"),
        (K.OPERATOR, "("), (K.NUMBER, "2"), (K.OPERATOR, ")"),
    ]


def test_tokenize_strings_comments_newlines():
    toks = kinds("s = 'a b'  # note\nx **= 2.5e3\n")
    assert (K.STRING, "'a b'") in toks
    assert (K.OTHER, "# note") in toks
    assert (K.OPERATOR, "**=") in toks
    assert (K.NUMBER, "2.5e3") in toks
    assert sum(k is K.NEWLINE for k, _ in toks) == 2


def test_tokenize_java():
    toks = kinds('public static int f(String s) { return s.length() >>> 1; } // hi', "java")
    assert toks[0] == (K.KEYWORD, "public")
    assert (K.OPERATOR, ">>>") in toks
    assert (K.OTHER, "// hi") in toks


def test_whitespace_reconstruction():
    text = "def f(a,  b):\n    return a+b  # sum\n"
    toks = tokenize(text)
    assert "".join(t.ws + t.text for t in toks) == text.rstrip(" ")


def test_keyword_lists_versioned():
    assert "def" in keywords(Language.PYTHON)
    assert "synchronized" in keywords(Language.JAVA)
    assert "def" not in keywords(Language.JAVA)


def test_comment_unfolding():
    plain = [t.text for t in lm_tokens("x = f(y)\n")]
    quoted = [t.text for t in lm_tokens("# x = f(y)\n")]
    assert quoted == plain
    java = [t.text for t in lm_tokens("// int x = 1;\n", "java")]
    assert java == ["int", "x", "=", "1", ";", "\n"]


def test_empty_corpus():
    with pytest.raises(LmError) as exc:
        train_ngram([])
    assert exc.value.reason == "EmptyCorpus"


def test_unigram_symmetry():
    m = train_ngram([py("a.py", "a b a b")], order=1, cache_weight=0.0)
    assert m.prob("a", []) == m.prob("b", [])


def test_hand_counted_bigram():
    k = 0.01
    m = train_ngram([py("a.py", "a b c a b c")], order=2, add_k=k, cache_weight=0.0)
    assert set(m.vocab) == {"a", "b", "c"}
    assert m.space_size == 4
    assert m.prob("c", ["b"]) == pytest.approx((2 + k) / (2 + 4 * k), rel=1e-12)


def test_unseen_token_positive():
    m = train_ngram([py("a.py", "a b a b")], order=2)
    assert 0 < m.prob("zzz", ["a"]) < 1
    assert m.map_token("zzz") == UNK


def test_nll_definition():
    m = NGramModel(1, 1.0, ["a", "b", "c"], {"": {}}, cache_weight=0.0)
    assert sequence_nll(m, [], ["a"]) == [pytest.approx(math.log(4), rel=1e-12)]


def test_nll_two_tokens():
    m = NGramModel(1, 1.0, list("abcdefg"), {"": {"a": 7, "b": 1}}, cache_weight=0.0)
    nll = sequence_nll(m, [], ["a", "b"])
    assert nll == [pytest.approx(0.693147, abs=1e-6), pytest.approx(2.079442, abs=1e-6)]


def test_nll_strictly_positive():
    m = NGramModel(1, 1e-6, ["a"], {"": {"a": 1000}}, cache_weight=0.0)
    assert sequence_nll(m, [], ["a"])[0] > 0


def test_nll_empty_target():
    m = train_ngram([py("a.py", "a b a b")])
    with pytest.raises(LmError) as exc:
        sequence_nll(m, ["a"], [])
    assert exc.value.reason == "EmptyTarget"


CORPUS = [
    py("a.py", "def f(x):\n    return x + 1\n\ndef g(y):\n    return f(y) * 2\n"),
    py("b.py", "import os\nx = f(1)\ny = g(x)\nprint(x, y)\n"),
]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["def", "f", "(", "x", ")", "return", "\n", "zz", "1", "+", "q"]), max_size=30),
       st.booleans())
def test_normalization(history, with_cache):
    m = train_ngram(CORPUS, order=3)
    cache = ContextCache(m.cache_order, history) if with_cache else None
    dist = m.distribution(history, cache)
    assert math.fsum(dist.values()) == pytest.approx(1.0, abs=1e-9)
    assert all(0 < p < 1 for p in dist.values())


def test_cache_copies_long_match():
    m = train_ngram(CORPUS, order=3)
    ctx = [t.text for t in lm_tokens("alpha = beta(gamma, delta)\nomega.zeta(alpha)\nalpha = beta(gamma, delta)\n")]
    cache = ContextCache(m.cache_order, ctx)
    with_cache = m.prob("omega", ctx, cache)
    without = m.prob("omega", ctx)
    assert with_cache > 0.5 > without


def test_proposals_agree_with_prob():
    m = train_ngram(CORPUS, order=3)
    hist = [t.text for t in lm_tokens("def f(x):\n    return ")]
    cache = ContextCache(m.cache_order, hist)
    for tok, p in m.proposals(hist, cache).items():
        assert p == pytest.approx(m.prob(tok, hist, cache), rel=1e-12)


def test_roundtrip_bit_exact(tmp_path):
    m = train_ngram(CORPUS, order=3)
    path = tmp_path / "lm.json"
    m.save(path, config_digest="abc")
    back = NGramModel.load(path)
    rng = random.Random(0)
    toks = list(m.vocab) + ["unseen"]
    for _ in range(200):
        hist = [rng.choice(toks) for _ in range(rng.randint(0, 4))]
        tok = rng.choice(toks)
        assert back.prob(tok, hist) == m.prob(tok, hist)
    text = path.read_text()
    assert list(json.loads(text)) == sorted(json.loads(text))


def test_deterministic_training():
    a = train_ngram(CORPUS).to_json()
    b = train_ngram(list(CORPUS)).to_json()
    assert a == b
