"""Synthetic repositories for checking that retrieval can be learned.

Every sample's target is copied verbatim from one gold function somewhere in
its repository. The query side and the gold side talk about the same topic
with disjoint vocabularies, so a lexical ranker only finds the gold when a
hint word leaks into it, while a learned encoder can pick up the pairing.
Decoy functions reuse the query-side words to mislead lexical matching.

With ``prefix_solvable_fraction > 0`` some samples carry the gold content in
their own prefix instead, marked by a shared local vocabulary. The store then
holds only a stale variant of the gold with a different continuation, which
is harmful context.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from .chunker import CandidateStore, ChunkerConfig, build_candidate_store
from .ingest import CodeFile, Language
from .sampler import CompletionSample

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "pl", "dr", "gl"]
_VOWELS = ["a", "e", "i", "o", "u", "au", "ei", "oa"]
_CODAS = ["", "n", "r", "s", "x", "l", "m", "k"]


@dataclass(frozen=True)
class SyntheticConfig:
    repos: int = 10
    samples_per_repo: int = 20
    topics: int = 40
    words_per_side: int = 3
    decoys_per_sample: int = 2
    fillers_per_repo: int = 20
    hint_fraction: float = 0.5
    prefix_solvable_fraction: float = 0.0
    stale_fraction: float = 1.0
    chunk_threshold: int = 12
    seed: int = 0


@dataclass
class SyntheticBenchmark:
    files: list[CodeFile]
    stores: dict[str, CandidateStore]
    samples: list[CompletionSample]
    gold: dict[str, tuple[str, int]]  # sample id -> (rel_path, start_line) of the gold candidate
    prefix_solvable: set[str] = field(default_factory=set)

    def write(self, root: str | Path) -> None:
        """Lay the repositories out as ``root/<repo>/<rel_path>``."""
        root = Path(root)
        for f in self.files:
            p = root / f.repo_id / f.rel_path
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(f.text, encoding="utf-8", newline="\n")


class _Words:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set()

    def fresh(self) -> str:
        while True:
            n = self.rng.choice((2, 3))
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(n)) + self.rng.choice(_CODAS)
            if w not in self.used and len(w) > 3:
                self.used.add(w)
                return w

    def many(self, n: int) -> list[str]:
        return [self.fresh() for _ in range(n)]


def _target(u: list[str], c: list[str]) -> list[str]:
    return [
        f"    {u[0]} = {c[2]}.{u[1]}({u[2]}, {c[1]})",
        f"    {u[3]}.{u[4]}({u[0]})",
    ]


def _gold_function(name: str, c: list[str], anchor: str, target: list[str], u: list[str], hint: str | None) -> list[str]:
    lines = [
        f"def {name}({c[0]}, {c[1]}):",
        f"    {c[2]} = {c[0]}.{c[1]}_{c[2]}({c[1]})",
    ]
    if hint:
        lines.append(f"    {c[0]}.{hint} = {c[1]}")
    lines += [f"    if not {c[2]}:", f"        return {c[0]}", anchor, *target, f"    return {u[3]}"]
    return lines


def _stale_function(name: str, c: list[str], anchor: str, words: _Words) -> list[str]:
    alt = words.many(4)
    return [
        f"def {name}({c[0]}, {c[1]}):",
        f"    {c[2]} = {c[0]}.{c[1]}_{c[2]}({c[1]})",
        f"    if not {c[2]}:",
        f"        return {c[0]}",
        anchor,
        f"    {alt[0]} = {c[2]}.{alt[1]}({alt[2]})",
        f"    return {alt[3]}({alt[0]})",
    ]


def _noise_function(name: str, vocab: list[str], rng: random.Random) -> list[str]:
    w = [rng.choice(vocab) for _ in range(9)]
    return [
        f"def {name}({w[0]}, {w[1]}):",
        f"    {w[2]} = {w[0]}.{w[3]}({w[1]})",
        f"    for {w[4]} in {w[2]}:",
        f"        {w[5]}.{w[6]}({w[4]}, {w[1]})",
        f"    {w[7]} = {w[8]}({w[2]})",
        f"    return {w[7]}",
    ]


def _query_function(name: str, q: list[str], noise: list[str], rng: random.Random, anchor: str) -> list[str]:
    n = [rng.choice(noise) for _ in range(4)]
    return [
        f"def {name}({q[0]}, {q[1]}):",
        f"    {q[2]} = {q[0]}.{n[0]}({q[1]})",
        f"    {n[1]} = {q[2]}.{q[1]}_{n[2]}({q[0]})",
        f"    if {n[1]} is None:",
        f"        return {q[2]}",
        anchor,
    ]


def _file(repo: str, path: str, funcs: list[list[str]]) -> CodeFile:
    text = "\n\n".join("\n".join(f) for f in funcs) + "\n"
    return CodeFile(repo, path, Language.PYTHON, text)


def make_benchmark(config: SyntheticConfig = SyntheticConfig()) -> SyntheticBenchmark:
    rng = random.Random(config.seed)
    words = _Words(rng)
    k = config.words_per_side
    if k < 3:
        raise ValueError("words_per_side must be at least 3")
    topics = [(words.many(k), words.many(k)) for _ in range(config.topics)]
    noise = words.many(30)
    local = words.many(k)
    filler = words.many(200)

    files: list[CodeFile] = []
    samples: list[CompletionSample] = []
    solvable: set[str] = set()
    anchors: set[str] = set()

    def new_anchor() -> str:
        while True:
            n = rng.sample(noise, 4)
            a = f"    {n[0]} = {n[1]}({n[2]}, {n[3]})"
            if a not in anchors:
                anchors.add(a)
                return a

    for r in range(config.repos):
        repo = f"repo{r:02d}"
        chosen = rng.sample(range(config.topics), config.samples_per_repo)
        lib_funcs: list[list[str]] = []
        decoys: list[list[str]] = []
        for j, t in enumerate(chosen):
            q, c = topics[t]
            anchor = new_anchor()
            u = words.many(5)
            target = _target(u, c)
            sid = f"{repo}/s{j:02d}"
            qpath = f"app/use_{j:02d}.py"
            qname = f"run_{words.fresh()}"
            query = _query_function(qname, q, noise, rng, anchor)
            tail = [f"    return {q[2]}"]
            solvable_here = rng.random() < config.prefix_solvable_fraction
            if solvable_here:
                helper = _gold_function(f"{local[0]}_{words.fresh()}", local[:1] + c[1:], anchor, target, u, None)
                helper.insert(1, f"    {local[1]} = {local[2]}({local[0]})")
                funcs = [helper, query[:-1] + [f"    {local[1]} = {local[2]}({q[0]})", anchor]]
                if rng.random() < config.stale_fraction:
                    lib_funcs.append(_stale_function(f"{c[0]}_{words.fresh()}", c, anchor, words))
                solvable.add(sid)
            else:
                hint = rng.choice(q) if rng.random() < config.hint_fraction else None
                lib_funcs.append(_gold_function(f"{c[0]}_{words.fresh()}", c, anchor, target, u, hint))
                funcs = [query]
            text_funcs = funcs[:-1] + [funcs[-1] + target + tail]
            qfile = _file(repo, qpath, text_funcs)
            files.append(qfile)
            prefix_lines = qfile.lines[: qfile.lines.index(anchor, len(qfile.lines) - len(target) - len(tail) - 1) + 1]
            samples.append(
                CompletionSample(
                    id=sid,
                    repo_id=repo,
                    rel_path=qpath,
                    prefix="".join(line + "\n" for line in prefix_lines),
                    target="\n".join(target),
                    target_start_line=len(prefix_lines) + 1,
                )
            )
            for _ in range(config.decoys_per_sample):
                vocab = q[:2] + rng.sample(filler, 12)
                decoy = _noise_function(f"{q[0]}_{words.fresh()}", vocab, rng)
                decoys.append(decoy)
        for _ in range(config.fillers_per_repo):
            decoys.append(_noise_function(f"do_{words.fresh()}", rng.sample(filler, 14), rng))

        # library modules: golds, decoys and fillers shuffled together, a few per file
        blocks = lib_funcs + decoys
        rng.shuffle(blocks)
        per_file = 4
        for m in range(0, len(blocks), per_file):
            idx = m // per_file
            funcs = blocks[m : m + per_file]
            if idx:
                funcs = [[f"from lib import mod_{idx - 1:02d}"]] + funcs
            files.append(_file(repo, f"lib/mod_{idx:02d}.py", funcs))

    stores: dict[str, CandidateStore] = {}
    cfg = ChunkerConfig(config.chunk_threshold, Language.PYTHON.comment_prefix)
    for repo in sorted({f.repo_id for f in files}):
        stores[repo] = build_candidate_store([f for f in files if f.repo_id == repo], cfg, repo)
    gold: dict[str, tuple[str, int]] = {}
    for s in samples:
        if s.id in solvable:
            continue
        hits = [(c.rel_path, c.start_line) for c in stores[s.repo_id].non_stop() if s.target in c.text and c.rel_path != s.rel_path]
        if len(hits) != 1:
            raise AssertionError(f"{s.id}: expected exactly one gold candidate, found {len(hits)}")
        gold[s.id] = hits[0]
    return SyntheticBenchmark(files, stores, samples, gold, solvable)
