"""Repository scanning, import-graph construction and dependency clustering."""

from __future__ import annotations

import heapq
import logging
import os
import posixpath
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import IngestError
from .jsonio import split_lines, write_jsonl

log = logging.getLogger(__name__)

DEFAULT_MAX_BYTES = 1 << 20


class Language(str, Enum):
    PYTHON = "python"
    JAVA = "java"

    @property
    def extension(self) -> str:
        return ".py" if self is Language.PYTHON else ".java"

    @property
    def comment_prefix(self) -> str:
        return "#" if self is Language.PYTHON else "//"

    @classmethod
    def parse(cls, value: "str | Language") -> "Language":
        if isinstance(value, Language):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unsupported language: {value!r}") from None

    @classmethod
    def from_path(cls, path: str) -> "Language":
        return cls.JAVA if path.endswith(".java") else cls.PYTHON


@dataclass(frozen=True)
class CodeFile:
    repo_id: str
    rel_path: str
    language: Language
    text: str
    line_count: int = -1

    def __post_init__(self):
        if self.line_count < 0:
            object.__setattr__(self, "line_count", len(split_lines(self.text)))

    @property
    def lines(self) -> list[str]:
        return split_lines(self.text)


@dataclass
class DependencyGraph:
    nodes: set[str] = field(default_factory=set)
    edges: set[tuple[str, str]] = field(default_factory=set)  # (provider, importer)

    def add_edge(self, provider: str, importer: str) -> None:
        if provider == importer:
            return
        self.nodes.update((provider, importer))
        self.edges.add((provider, importer))


@dataclass(frozen=True)
class FileCluster:
    repo_id: str
    ordered_files: tuple[str, ...]
    cyclic: bool

    def to_record(self) -> dict:
        return {"repo": self.repo_id, "files": list(self.ordered_files), "cyclic": self.cyclic}


def scan_repository(
    root: str | Path,
    language: Language | str,
    repo_id: str | None = None,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> list[CodeFile]:
    """Collect every source file of ``language`` under ``root``, sorted by relative path."""
    language = Language.parse(language)
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise IngestError(f"cannot read repository root {root}", reason="Unreadable")
    repo_id = repo_id or root.resolve().name

    paths: list[tuple[str, Path]] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in filenames:
            if not name.endswith(language.extension):
                continue
            full = Path(dirpath) / name
            rel = full.relative_to(root).as_posix()
            paths.append((rel, full))
    paths.sort()

    files = []
    for rel, full in paths:
        try:
            if full.stat().st_size > max_bytes:
                log.info("skipping %s: larger than %d bytes", rel, max_bytes)
                continue
            data = full.read_bytes()
        except OSError as exc:
            log.warning("skipping unreadable file %s: %s", rel, exc)
            continue
        files.append(CodeFile(repo_id, rel, language, data.decode("utf-8", errors="replace")))
    return files


_PY_IMPORT = re.compile(r"^\s*import\s+(.+?)\s*(?:#.*)?$")
_PY_FROM = re.compile(r"^\s*from\s+(\.*)([\w.]*)\s+import\s+(.+?)\s*(?:#.*)?$")
_JAVA_IMPORT = re.compile(r"^\s*import\s+(static\s+)?([\w.]+(?:\.\*)?)\s*;")
_DOTTED = re.compile(r"^[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*$")


def _python_module_refs(file: CodeFile) -> list[tuple[int, str]]:
    """Return (relative level, dotted module) pairs referenced by imports."""
    refs: list[tuple[int, str]] = []
    for line in file.lines:
        m = _PY_FROM.match(line)
        if m:
            level, module, names = len(m.group(1)), m.group(2), m.group(3)
            if module and not _DOTTED.match(module):
                continue
            if module:
                refs.append((level, module))
            names = names.strip("()\\ ")
            for part in names.split(","):
                name = part.strip().split(" as ")[0].strip()
                if name and name != "*" and _DOTTED.match(name):
                    refs.append((level, f"{module}.{name}" if module else name))
            continue
        m = _PY_IMPORT.match(line)
        if m:
            for part in m.group(1).split(","):
                name = part.strip().split(" as ")[0].strip()
                if _DOTTED.match(name):
                    refs.append((0, name))
    return refs


def _resolve_python(level: int, module: str, importer: str, known: set[str]) -> list[str]:
    if level:
        base = posixpath.dirname(importer)
        for _ in range(level - 1):
            base = posixpath.dirname(base)
    else:
        base = ""
    stem = posixpath.join(base, *module.split(".")) if module else base
    out = []
    for cand in (stem + ".py", posixpath.join(stem, "__init__.py")):
        cand = cand.lstrip("/")
        if cand in known:
            out.append(cand)
    return out


def _resolve_java(name: str, is_static: bool, known: Sequence[str], by_suffix: dict) -> list[str]:
    parts = name.split(".")
    if parts[-1] == "*":
        pkg_dir = "/".join(parts[:-1])
        hits = [
            p
            for p in known
            if posixpath.dirname(p) == pkg_dir or posixpath.dirname(p).endswith("/" + pkg_dir)
        ]
        if hits or not is_static:
            return hits
        parts = parts[:-1]
    # static imports name a member; try progressively shorter prefixes
    for end in range(len(parts), 0, -1):
        suffix = "/".join(parts[:end]) + ".java"
        hits = by_suffix.get(suffix)
        if hits:
            return hits
        if not is_static:
            break
    return []


def build_dependency_graph(files: Sequence[CodeFile]) -> DependencyGraph:
    graph = DependencyGraph()
    if not files:
        return graph
    graph.nodes.update(f.rel_path for f in files)
    known = set(graph.nodes)
    language = files[0].language

    if language is Language.PYTHON:
        for f in files:
            for level, module in _python_module_refs(f):
                for provider in _resolve_python(level, module, f.rel_path, known):
                    graph.add_edge(provider, f.rel_path)
        return graph

    ordered = sorted(known)
    by_suffix: dict[str, list[str]] = {}
    for p in ordered:
        segs = p.split("/")
        for i in range(len(segs)):
            by_suffix.setdefault("/".join(segs[i:]), []).append(p)
    for f in files:
        for line in f.lines:
            m = _JAVA_IMPORT.match(line)
            if not m:
                continue
            for provider in _resolve_java(m.group(2), bool(m.group(1)), ordered, by_suffix):
                graph.add_edge(provider, f.rel_path)
    return graph


def _weak_components(graph: DependencyGraph) -> list[list[str]]:
    parent = {n: n for n in graph.nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in graph.edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = {}
    for n in sorted(graph.nodes):
        groups.setdefault(find(n), []).append(n)
    return sorted(groups.values(), key=lambda g: g[0])


def _kahn(nodes: list[str], edges: Iterable[tuple[str, str]]) -> tuple[list[str], bool]:
    succ: dict[str, list[str]] = {n: [] for n in nodes}
    indeg = {n: 0 for n in nodes}
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    heap = [n for n in nodes if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    if len(order) == len(nodes):
        return order, False
    placed = set(order)
    order.extend(sorted(n for n in nodes if n not in placed))
    return order, True


def cluster_and_sort(graph: DependencyGraph, repo_id: str = "") -> list[FileCluster]:
    """Weakly connected components of size >= 2, each in topological order.

    Ties are broken lexicographically. When a cycle blocks the sort, the
    remaining files are appended in lexicographic order and the cluster is
    flagged ``cyclic``.
    """
    clusters = []
    for comp in _weak_components(graph):
        if len(comp) < 2:
            continue
        members = set(comp)
        inner = sorted((a, b) for a, b in graph.edges if a in members and b in members)
        order, cyclic = _kahn(comp, inner)
        clusters.append(FileCluster(repo_id, tuple(order), cyclic))
    return clusters


def write_clusters(path: str | Path, clusters: Iterable[FileCluster], config_digest: str | None = None) -> None:
    records = []
    for c in clusters:
        rec = c.to_record()
        if config_digest:
            rec["config_digest"] = config_digest
        records.append(rec)
    write_jsonl(path, records)
