"""Weighted perplexity of a target under retrieved context, and argmin rewards."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .chunker import Candidate
from .ingest import Language
from .lm import NGramModel, Token, TokenKind, lm_tokens, sequence_nll
from .sampler import CompletionSample

DEFAULT_CONTEXT_TOKENS = 512


@dataclass(frozen=True)
class WeightConfig:
    k_first: int = 4
    w_first: float = 2.0
    w_api: float = 2.0

    def __post_init__(self):
        if not 0 <= self.k_first <= 10_000:
            raise ValueError("k_first must lie in [0, 10000]")
        for w in (self.w_first, self.w_api):
            if not (math.isfinite(w) and w >= 1):
                raise ValueError("weights must be finite and >= 1")


@dataclass(frozen=True)
class RewardVector:
    rewards: tuple[int, ...]
    ppls: tuple[float, ...]


def token_weights(target: Sequence[Token], config: WeightConfig) -> list[float]:
    """Position rule first (the first ``k_first`` tokens), then identifiers, then 1."""
    weights = []
    for i, tok in enumerate(target, start=1):
        if i <= config.k_first:
            weights.append(config.w_first)
        elif tok.kind is TokenKind.IDENTIFIER:
            weights.append(config.w_api)
        else:
            weights.append(1.0)
    return weights


def weighted_ppl_from_nll(nlls: Sequence[float], weights: Sequence[float]) -> float:
    total = math.fsum(weights)
    return math.exp(math.fsum(w * x for w, x in zip(weights, nlls)) / total)


def weighted_ppl(
    model: NGramModel,
    context: Sequence[Token],
    target: Sequence[Token],
    config: WeightConfig,
) -> float:
    nlls = sequence_nll(model, context, target)
    return weighted_ppl_from_nll(nlls, token_weights(target, config))


def render_candidate(candidate: Candidate, language: Language | str) -> str:
    """Path header plus body, every line comment-prefixed; empty for the stop candidate."""
    if candidate.is_stop:
        return ""
    mark = Language.parse(language).comment_prefix
    lines = [f"{mark} {candidate.rel_path}"]
    lines += [f"{mark} {line}" if line else mark for line in candidate.text.split("\n")]
    return "\n".join(lines) + "\n"


def evaluator_context(
    candidate: Candidate,
    prefix: str,
    language: Language | str,
    max_tokens: int = DEFAULT_CONTEXT_TOKENS,
) -> list[Token]:
    """Rendered candidate followed by the prefix, fitted to ``max_tokens``.

    The prefix is trimmed from the left first; the candidate only gives up
    tokens when it would leave the prefix less than half the budget.
    """
    cand = lm_tokens(render_candidate(candidate, language), language)
    pre = lm_tokens(prefix, language)
    if len(cand) + len(pre) <= max_tokens:
        return cand + pre
    keep_cand = min(len(cand), max_tokens - min(len(pre), max_tokens // 2))
    keep_pre = max_tokens - keep_cand
    return cand[:keep_cand] + (pre[-keep_pre:] if keep_pre else [])


def rewards_from_ppls(ppls: Sequence[float]) -> tuple[int, ...]:
    best = min(ppls)
    return tuple(int(p <= best) for p in ppls)


def compute_rewards(
    model: NGramModel,
    sample: CompletionSample,
    pool: Sequence[Candidate],
    config: WeightConfig,
    max_context_tokens: int = DEFAULT_CONTEXT_TOKENS,
) -> RewardVector:
    if not pool:
        raise ValueError("pool must be non-empty")
    language = Language.from_path(sample.rel_path)
    target = lm_tokens(sample.target, language)
    ppls = tuple(
        weighted_ppl(model, evaluator_context(c, sample.prefix, language, max_context_tokens), target, config)
        for c in pool
    )
    return RewardVector(rewards_from_ppls(ppls), ppls)
