"""Natural candidates: blank-line mini-blocks greedily aggregated under a line budget."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import CodeFile, Language
from .jsonio import read_jsonl, split_lines, write_jsonl


@dataclass(frozen=True)
class ChunkerConfig:
    threshold: int = 20
    comment_prefix: str = "#"

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")

    @classmethod
    def for_language(cls, language: Language | str, threshold: int = 20) -> "ChunkerConfig":
        return cls(threshold, Language.parse(language).comment_prefix)


@dataclass(frozen=True)
class MiniBlock:
    start_line: int
    end_line: int
    lines: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.lines)


@dataclass(frozen=True)
class Candidate:
    repo_id: str
    rel_path: str
    start_line: int
    end_line: int
    text: str
    is_stop: bool = False

    @classmethod
    def stop(cls, repo_id: str) -> "Candidate":
        return cls(repo_id, "", 0, 0, "", True)

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.rel_path, self.start_line, self.end_line)

    @property
    def line_count(self) -> int:
        return len(split_lines(self.text))

    def to_record(self) -> dict:
        return {
            "repo": self.repo_id,
            "path": self.rel_path,
            "start": self.start_line,
            "end": self.end_line,
            "text": self.text,
            "stop": self.is_stop,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Candidate":
        return cls(rec["repo"], rec["path"], rec["start"], rec["end"], rec["text"], rec["stop"])


@dataclass
class CandidateStore:
    repo_id: str
    candidates: list[Candidate] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @property
    def stop_candidate(self) -> Candidate:
        return next(c for c in self.candidates if c.is_stop)

    def non_stop(self) -> list[Candidate]:
        return [c for c in self.candidates if not c.is_stop]


def split_into_blocks(file: CodeFile) -> list[MiniBlock]:
    blocks: list[MiniBlock] = []
    run: list[str] = []
    start = 0
    for lineno, line in enumerate(file.lines, start=1):
        if line.strip():
            if not run:
                start = lineno
            run.append(line)
        elif run:
            blocks.append(MiniBlock(start, start + len(run) - 1, tuple(run)))
            run = []
    if run:
        blocks.append(MiniBlock(start, start + len(run) - 1, tuple(run)))
    return blocks


def _emit(group: list[MiniBlock], repo_id: str, rel_path: str) -> Candidate:
    text = "\n\n".join("\n".join(b.lines) for b in group)
    return Candidate(repo_id, rel_path, group[0].start_line, group[-1].end_line, text)


def aggregate_blocks(
    blocks: Sequence[MiniBlock],
    config: ChunkerConfig,
    repo_id: str = "",
    rel_path: str = "",
) -> list[Candidate]:
    """Greedy left-to-right aggregation.

    A block joins the open candidate only if the result, counting one
    separator line per junction, stays within ``config.threshold`` lines.
    Oversized blocks are cut into consecutive threshold-sized pieces.
    """
    T = config.threshold
    out: list[Candidate] = []
    group: list[MiniBlock] = []
    size = 0
    for block in blocks:
        if block.size > T:
            if group:
                out.append(_emit(group, repo_id, rel_path))
                group, size = [], 0
            for off in range(0, block.size, T):
                piece = block.lines[off : off + T]
                start = block.start_line + off
                out.append(_emit([MiniBlock(start, start + len(piece) - 1, piece)], repo_id, rel_path))
            continue
        if group and size + 1 + block.size <= T:
            group.append(block)
            size += 1 + block.size
        else:
            if group:
                out.append(_emit(group, repo_id, rel_path))
            group, size = [block], block.size
    if group:
        out.append(_emit(group, repo_id, rel_path))
    return out


def chunk_file(file: CodeFile, config: ChunkerConfig) -> list[Candidate]:
    return aggregate_blocks(split_into_blocks(file), config, file.repo_id, file.rel_path)


def build_candidate_store(
    files: Iterable[CodeFile], config: ChunkerConfig, repo_id: str | None = None
) -> CandidateStore:
    files = list(files)
    if repo_id is None:
        repo_id = files[0].repo_id if files else ""
    candidates: list[Candidate] = []
    for f in files:
        candidates.extend(chunk_file(f, config))
    candidates.append(Candidate.stop(repo_id))
    return CandidateStore(repo_id, candidates)


def write_candidates(path: str | Path, stores: Iterable[CandidateStore], config_digest: str | None = None) -> None:
    records = []
    for store in stores:
        for c in store:
            rec = c.to_record()
            if config_digest:
                rec["config_digest"] = config_digest
            records.append(rec)
    write_jsonl(path, records)


def read_candidates(path: str | Path) -> dict[str, CandidateStore]:
    stores: dict[str, CandidateStore] = {}
    for rec in read_jsonl(path):
        cand = Candidate.from_record(rec)
        stores.setdefault(cand.repo_id, CandidateStore(cand.repo_id)).candidates.append(cand)
    return stores
