"""Self-supervised completion samples drawn from dependency clusters."""

from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .chunker import CandidateStore
from .errors import DatasetError, DatasetWarning, SampleError
from .ingest import CodeFile, FileCluster
from .jsonio import read_jsonl, write_jsonl

MAX_REDRAWS = 10


@dataclass(frozen=True)
class SamplerConfig:
    margin_fraction: float = 0.1
    min_target_lines: int = 1
    max_target_lines: int = 3
    max_prefix_lines: int = 120
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.margin_fraction < 0.5:
            raise ValueError("margin_fraction must lie in (0, 0.5)")
        if not 1 <= self.min_target_lines <= self.max_target_lines:
            raise ValueError("need 1 <= min_target_lines <= max_target_lines")
        if self.max_prefix_lines < 1:
            raise ValueError("max_prefix_lines must be positive")


@dataclass(frozen=True)
class CompletionSample:
    id: str
    repo_id: str
    rel_path: str
    prefix: str
    target: str
    target_start_line: int
    suffix: str | None = None

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "repo": self.repo_id,
            "path": self.rel_path,
            "prefix": self.prefix,
            "target": self.target,
            "start_line": self.target_start_line,
        }
        if self.suffix is not None:
            rec["suffix"] = self.suffix
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "CompletionSample":
        return cls(
            rec["id"], rec["repo"], rec["path"], rec["prefix"], rec["target"],
            rec["start_line"], rec.get("suffix"),
        )


def target_bounds(line_count: int, margin_fraction: float) -> tuple[int, int]:
    """1-based inclusive range of admissible target start lines."""
    return math.ceil(margin_fraction * line_count), math.floor((1 - margin_fraction) * line_count)


def draw_sample(
    file: CodeFile,
    config: SamplerConfig,
    rng: random.Random,
    exclude_starts: frozenset[int] | set[int] = frozenset(),
    sample_id: str | None = None,
) -> CompletionSample:
    L = file.line_count
    p_min, p_max = target_bounds(L, config.margin_fraction)
    min_len = math.ceil(1 / (1 - 2 * config.margin_fraction))
    if L < min_len or p_min < 1 or p_min > p_max:
        raise SampleError(f"{file.rel_path}: {L} lines is too short", reason="TooShort")

    lines = file.lines
    for _ in range(MAX_REDRAWS):
        start = rng.randint(p_min, p_max)
        length = rng.randint(config.min_target_lines, config.max_target_lines)
        length = min(length, L - start + 1)
        if start in exclude_starts or not lines[start - 1].strip() or length < config.min_target_lines:
            continue
        lo = max(0, start - 1 - config.max_prefix_lines)
        prefix = "".join(line + "\n" for line in lines[lo : start - 1])
        target = "\n".join(lines[start - 1 : start - 1 + length])
        sid = sample_id or f"{file.repo_id}/{file.rel_path}:{start}"
        return CompletionSample(sid, file.repo_id, file.rel_path, prefix, target, start)
    raise SampleError(f"{file.rel_path}: no viable target span", reason="NoViableSpan")


def mask_and_exclude(sample: CompletionSample, store: CandidateStore) -> CandidateStore:
    """Drop every candidate that comes from the sample's own file."""
    kept = [c for c in store.candidates if c.is_stop or c.rel_path != sample.rel_path]
    return CandidateStore(store.repo_id, kept)


def build_dataset(
    clusters: Sequence[FileCluster],
    files: Iterable[CodeFile],
    config: SamplerConfig,
    count: int,
) -> list[CompletionSample]:
    """Draw up to ``count`` samples round-robin over clusters.

    Only non-first files of each cluster are eligible. A file drops out once a
    draw fails; a start line is never reused within one file.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    index = {(f.repo_id, f.rel_path): f for f in files}
    queues: list[list[CodeFile]] = []
    for cl in clusters:
        eligible = [index[(cl.repo_id, p)] for p in cl.ordered_files[1:] if (cl.repo_id, p) in index]
        if eligible:
            queues.append(eligible)
    if not queues:
        raise DatasetError("no eligible files in any cluster", reason="Empty")

    rng = random.Random(config.seed)
    used: dict[tuple[str, str], set[int]] = {}
    cursor = [0] * len(queues)
    samples: list[CompletionSample] = []
    while len(samples) < count and any(queues):
        for qi, queue in enumerate(queues):
            if len(samples) >= count:
                break
            if not queue:
                continue
            pos = cursor[qi] % len(queue)
            f = queue[pos]
            key = (f.repo_id, f.rel_path)
            taken = used.setdefault(key, set())
            try:
                s = draw_sample(f, config, rng, taken)
            except SampleError:
                queue.pop(pos)
                continue
            taken.add(s.target_start_line)
            samples.append(s)
            cursor[qi] = pos + 1
    if len(samples) < count:
        warnings.warn(
            f"requested {count} samples, only {len(samples)} attainable", DatasetWarning, stacklevel=2
        )
    return samples


def write_dataset(path: str | Path, samples: Iterable[CompletionSample], config_digest: str | None = None) -> None:
    records = []
    for s in samples:
        rec = s.to_record()
        if config_digest:
            rec["config_digest"] = config_digest
        records.append(rec)
    write_jsonl(path, records)


def read_dataset(path: str | Path) -> list[CompletionSample]:
    return [CompletionSample.from_record(r) for r in read_jsonl(path)]
