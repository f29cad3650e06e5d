"""End-to-end completion: retrieve, assemble a prompt, generate, score."""

from __future__ import annotations

import json
import logging
import multiprocessing
import queue
import subprocess
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .chunker import Candidate, CandidateStore
from .errors import GenError, ReporagError
from .evaluator import render_candidate
from .ingest import Language
from .jsonio import dumps_line, split_lines, write_jsonl
from .lm import ContextCache, NGramModel, lm_tokens
from .retriever import (
    RankedList,
    RetrieverModel,
    bm25_rank,
    policy_rank,
    query_from_prefix,
    truncate_at_stop,
)
from .sampler import CompletionSample, mask_and_exclude

log = logging.getLogger(__name__)

RETRIEVAL_MODES = ("policy", "bm25", "none")


@dataclass(frozen=True)
class CompletionConfig:
    retrieval: str = "policy"
    use_stop: bool = True
    max_keep: int = 5
    budget: int = 1024
    max_new_tokens: int = 64
    query_lines: int = 20
    rounds: int = 1

    def __post_init__(self):
        if self.retrieval not in RETRIEVAL_MODES:
            raise ValueError(f"retrieval must be one of {RETRIEVAL_MODES}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class PromptAssembly:
    blocks: list[str]
    prefix: str
    token_count: int
    budget: int

    @property
    def text(self) -> str:
        return "".join(self.blocks) + self.prefix


def _count(text: str, language: Language) -> int:
    return len(lm_tokens(text, language))


def assemble_prompt(
    sample: CompletionSample, retained: Sequence[Candidate], budget: int = 1024
) -> PromptAssembly:
    """Rendered candidates (best first) then the prefix, within ``budget`` tokens.

    Lowest-ranked candidates are dropped first; after that the prefix loses
    lines from its left end.
    """
    language = Language.from_path(sample.rel_path)
    blocks = [render_candidate(c, language) for c in retained if not c.is_stop]
    costs = [_count(b, language) for b in blocks]
    prefix = sample.prefix
    pcost = _count(prefix, language)
    while blocks and sum(costs) + pcost > budget:
        blocks.pop()
        costs.pop()
    if pcost > budget:
        lines = prefix.split("\n")
        while len(lines) > 1 and _count("\n".join(lines), language) > budget:
            lines.pop(0)
        prefix = "\n".join(lines)
        while prefix and _count(prefix, language) > budget:
            prefix = prefix[1:]
        pcost = _count(prefix, language)
    return PromptAssembly(blocks, prefix, sum(costs) + pcost, budget)


# --------------------------------------------------------------------------
# generators


class GeneratorAdapter(Protocol):
    def generate(self, prompt: str, max_new_tokens: int) -> str: ...


_TIGHT_AFTER = {"(", "[", "{", ".", "\n"}
_TIGHT_BEFORE = {")", "]", "}", ",", ":", ".", "(", "[", "\n", ";"}


def _guess_ws(prev: str | None, tok: str) -> str:
    if prev is None or prev in _TIGHT_AFTER or tok in _TIGHT_BEFORE:
        return ""
    return " "


class NGramAdapter:
    """Greedy decoding from the n-gram model; stops after two consecutive newlines."""

    def __init__(self, model: NGramModel, language: Language | str = Language.PYTHON):
        self.model = model
        self.language = Language.parse(language)

    def generate(self, prompt: str, max_new_tokens: int) -> str:
        if max_new_tokens <= 0:
            return ""
        toks = lm_tokens(prompt, self.language)
        history = [t.text for t in toks]
        cache = ContextCache(self.model.cache_order, history, [t.ws for t in toks]) if self.model.cache_weight else None
        pieces: list[str] = []
        prev: str | None = None
        for _ in range(max_new_tokens):
            props = self.model.proposals(history, cache)
            if not props:
                break
            tok = min(props, key=lambda t: (-props[t], t))
            ws = cache.whitespace(tok) if cache is not None else None
            if ws is None:
                ws = _guess_ws(prev if pieces else (history[-1] if history else None), tok)
            pieces.append(ws + tok)
            history.append(tok)
            if cache is not None:
                cache.add(tok, ws)
            if tok == "\n" and prev == "\n":
                break
            prev = tok
        return "".join(pieces)


class SubprocessAdapter:
    """One JSON request per line on stdin, one JSON response per line on stdout."""

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        self.timeout = timeout
        self._proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lines: queue.Queue = queue.Queue()
        self._next_id = 0
        threading.Thread(target=self._pump, daemon=True).start()

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def generate(self, prompt: str, max_new_tokens: int) -> str:
        req_id = str(self._next_id)
        self._next_id += 1
        try:
            self._proc.stdin.write(dumps_line({"id": req_id, "prompt": prompt, "max_new_tokens": max_new_tokens}) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise GenError(f"generator process unavailable: {exc}", reason="Protocol") from None
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise GenError(f"no response within {self.timeout}s", reason="Timeout") from None
        if line is None:
            raise GenError("generator process closed its output", reason="Protocol")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            raise GenError(f"malformed response: {line[:80]!r}", reason="Protocol") from None
        if not isinstance(msg, dict) or msg.get("id") != req_id or not isinstance(msg.get("completion"), str):
            raise GenError(f"unexpected response: {line[:80]!r}", reason="Protocol")
        return msg["completion"]

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_generator(prompt: str, max_new_tokens: int, adapter: GeneratorAdapter) -> str:
    if max_new_tokens <= 0:
        return ""
    return adapter.generate(prompt, max_new_tokens)


# --------------------------------------------------------------------------
# completion


def rank(query: str, store: CandidateStore, model: RetrieverModel | None, cfg: CompletionConfig, language: Language) -> RankedList:
    if cfg.retrieval == "bm25":
        return bm25_rank(query, store, language=language)
    if model is None:
        raise ValueError("policy retrieval needs a retriever model")
    return policy_rank(query, store, model, language)


def retain(ranked: RankedList, cfg: CompletionConfig) -> list[Candidate]:
    if cfg.use_stop:
        return truncate_at_stop(ranked, cfg.max_keep)
    return [c for c in ranked.candidates if not c.is_stop][: cfg.max_keep]


def _complete_with_query(
    sample: CompletionSample,
    query: str,
    store: CandidateStore,
    model: RetrieverModel | None,
    adapter: GeneratorAdapter,
    cfg: CompletionConfig,
) -> str:
    language = Language.from_path(sample.rel_path)
    retained: list[Candidate] = []
    if cfg.retrieval != "none":
        retained = retain(rank(query, store, model, cfg, language), cfg)
    prompt = assemble_prompt(sample, retained, cfg.budget)
    return run_generator(prompt.text, cfg.max_new_tokens, adapter)


def complete(
    sample: CompletionSample,
    store: CandidateStore,
    retriever_model: RetrieverModel | None,
    ngram: NGramModel | None = None,
    adapter: GeneratorAdapter | None = None,
    cfg: CompletionConfig = CompletionConfig(),
) -> str:
    """Single retrieve-then-generate pass. ``store`` must already exclude the sample's file."""
    if adapter is None:
        if ngram is None:
            raise ValueError("need either an adapter or an n-gram model")
        adapter = NGramAdapter(ngram, Language.from_path(sample.rel_path))
    query = query_from_prefix(sample.prefix, cfg.query_lines)
    return _complete_with_query(sample, query, store, retriever_model, adapter, cfg)


def next_query(query: str, completion: str, lines: int = 20) -> str:
    if not completion:
        return query
    return query_from_prefix(query + "\n" + completion, lines)


def iterative_complete(
    sample: CompletionSample,
    store: CandidateStore,
    retriever_model: RetrieverModel | None,
    ngram: NGramModel | None = None,
    adapter: GeneratorAdapter | None = None,
    cfg: CompletionConfig = CompletionConfig(),
    rounds: int | None = None,
) -> str:
    """Retrieve-generate loop; later rounds query with the previous draft appended."""
    rounds = cfg.rounds if rounds is None else rounds
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if adapter is None:
        if ngram is None:
            raise ValueError("need either an adapter or an n-gram model")
        adapter = NGramAdapter(ngram, Language.from_path(sample.rel_path))
    query = query_from_prefix(sample.prefix, cfg.query_lines)
    completion = _complete_with_query(sample, query, store, retriever_model, adapter, cfg)
    for _ in range(rounds - 1):
        query = next_query(query, completion, cfg.query_lines)
        completion = _complete_with_query(sample, query, store, retriever_model, adapter, cfg)
    return completion


# --------------------------------------------------------------------------
# metrics


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _normalize(text: str) -> str:
    lines = [line.rstrip() for line in text.split("\n")]
    while lines and not lines[0]:
        lines.pop(0)
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


def compute_metrics(pred: str, target: str) -> tuple[int, float]:
    """Exact match and character-level edit similarity (0-100).

    The prediction is cut to the target's line count before both sides are
    normalised.
    """
    n_lines = len(split_lines(target)) or 1
    pred = "\n".join(pred.split("\n")[:n_lines])
    a, b = _normalize(pred), _normalize(target)
    em = int(a == b)
    longest = max(len(a), len(b))
    es = 100.0 if longest == 0 else 100.0 * (1 - levenshtein(a, b) / longest)
    return em, es


@dataclass
class MetricsReport:
    n: int
    em: float
    es: float
    records: list[dict] = field(default_factory=list)

    def to_json(self, config_digest: str | None = None) -> dict:
        return {"n": self.n, "em": self.em, "es": self.es, "config_digest": config_digest}


def _evaluate_one(
    s: CompletionSample,
    stores: dict[str, CandidateStore],
    retriever_model: RetrieverModel | None,
    ngram: NGramModel | None,
    adapter: GeneratorAdapter | None,
    cfg: CompletionConfig,
) -> dict:
    rec = {"id": s.id, "target": s.target}
    try:
        store = stores.get(s.repo_id) or CandidateStore(s.repo_id, [Candidate.stop(s.repo_id)])
        pred = iterative_complete(s, mask_and_exclude(s, store), retriever_model, ngram, adapter, cfg)
        em, es = compute_metrics(pred, s.target)
        rec.update(prediction=pred, em=em, es=es)
    except (ReporagError, OSError) as exc:
        log.warning("sample %s failed: %s", s.id, exc)
        rec.update(prediction="", em=0, es=0.0, error=str(exc))
    return rec


_worker: dict = {}


def _worker_init(dataset, stores, retriever_model, ngram, generator_command, timeout, cfg) -> None:
    adapter = SubprocessAdapter(generator_command, timeout) if generator_command else None
    _worker.update(dataset=dataset, args=(stores, retriever_model, ngram, adapter, cfg))


def _worker_run(i: int) -> dict:
    return _evaluate_one(_worker["dataset"][i], *_worker["args"])


def evaluate_benchmark(
    dataset: Sequence[CompletionSample],
    stores: dict[str, CandidateStore],
    retriever_model: RetrieverModel | None,
    ngram: NGramModel | None = None,
    adapter: GeneratorAdapter | None = None,
    cfg: CompletionConfig = CompletionConfig(),
    report_path: str | Path | None = None,
    predictions_path: str | Path | None = None,
    config_digest: str | None = None,
    jobs: int = 1,
    generator_command: Sequence[str] | None = None,
    timeout: float = 60.0,
) -> MetricsReport:
    """Score every sample and aggregate EM/ES as percentages.

    With ``jobs > 1`` samples are spread over forked worker processes; each
    worker starts its own generator subprocess when ``generator_command`` is
    given. Records keep dataset order either way.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if jobs > 1 and adapter is None and len(dataset) > 1:
        ctx = multiprocessing.get_context("fork")
        init = (dataset, stores, retriever_model, ngram, generator_command, timeout, cfg)
        with ProcessPoolExecutor(jobs, mp_context=ctx, initializer=_worker_init, initargs=init) as pool:
            records = list(pool.map(_worker_run, range(len(dataset)), chunksize=max(1, len(dataset) // (4 * jobs))))
    else:
        own = None
        if adapter is None and generator_command:
            adapter = own = SubprocessAdapter(generator_command, timeout)
        try:
            records = [_evaluate_one(s, stores, retriever_model, ngram, adapter, cfg) for s in dataset]
        finally:
            if own is not None:
                own.close()
    n = len(records)
    report = MetricsReport(
        n,
        100.0 * sum(r["em"] for r in records) / n,
        sum(r["es"] for r in records) / n,
        records,
    )
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report.to_json(config_digest), fh)
            fh.write("\n")
    if predictions_path is not None:
        stamp = {"config_digest": config_digest} if config_digest else {}
        write_jsonl(predictions_path, ({**r, **stamp} for r in records))
    return report
