"""Policy-gradient training of the retriever against evaluator rewards."""

from __future__ import annotations

import json
import logging
import random
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .chunker import Candidate, CandidateStore
from .errors import CheckpointError, LmError
from .evaluator import DEFAULT_CONTEXT_TOKENS, WeightConfig, compute_rewards
from .ingest import Language
from .jsonio import canonical_json, digest, dumps_line
from .lm import NGramModel
from .retriever import (
    BM25,
    Features,
    RetrieverModel,
    policy_scores,
    query_from_prefix,
    softmax,
    subtokens,
)
from .sampler import CompletionSample, mask_and_exclude

log = logging.getLogger(__name__)

MAGIC = b"RLCR"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    pool_size: int = 10
    bm25_mix: int = 5
    batch_size: int = 16
    learning_rate: float = 0.05
    epochs: int = 20
    samples_per_epoch: int = 2000
    patience: int = 3
    seed: int = 0
    holdout_fraction: float = 0.1
    momentum: float = 0.0
    query_lines: int = 20
    max_context_tokens: int = DEFAULT_CONTEXT_TOKENS

    def __post_init__(self):
        if self.bm25_mix > self.pool_size:
            raise ValueError("bm25_mix must not exceed pool_size")
        for name in ("pool_size", "batch_size", "epochs", "samples_per_epoch", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.bm25_mix < 0 or self.learning_rate < 0:
            raise ValueError("bm25_mix and learning_rate must be non-negative")

    def digest(self) -> str:
        return digest(asdict(self))


# --------------------------------------------------------------------------
# objective and gradient


def _cos_grads(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        z = np.zeros_like(a)
        return 0.0, z, np.zeros_like(b)
    c = float(a @ b) / (na * nb)
    return c, b / (na * nb) - c * a / (na * na), a / (na * nb) - c * b / (nb * nb)


@dataclass
class PoolGradient:
    objective: float
    rows: np.ndarray  # bucket indices into Wt
    row_grads: np.ndarray  # (len(rows), dim)
    stop_grad: np.ndarray
    probs: np.ndarray


def pool_objective(
    Wt: np.ndarray,
    stop: np.ndarray,
    temperature: float,
    query: Features,
    cands: Sequence[Features | None],
    rewards: Sequence[float],
) -> PoolGradient:
    """Sum of reward-weighted log policy probabilities over one pool, with gradient.

    ``cands[i] is None`` marks the stop candidate, scored through ``stop``.
    Parameters are read in float64 whatever their storage dtype.
    """
    W64 = lambda f: f.val @ Wt[f.idx].astype(np.float64) if not f.empty else np.zeros(Wt.shape[1])
    s = stop.astype(np.float64)
    e_q = W64(query)
    embs = [s if f is None else W64(f) for f in cands]
    n = len(cands)
    scores = np.empty(n)
    d_q = []
    d_c = []
    for i, e in enumerate(embs):
        scores[i], ga, gb = _cos_grads(e_q, e)
        d_q.append(ga)
        d_c.append(gb)
    p = softmax(scores, temperature)
    r = np.asarray(rewards, dtype=np.float64)
    logp = np.log(p)
    J = float(np.sum(r[r != 0] * logp[r != 0]))
    delta = (r - r.sum() * p) / temperature  # dJ/dscore

    g_q = np.zeros_like(e_q)
    g_s = np.zeros_like(s)
    idx_parts = [query.idx]
    grad_parts: list[np.ndarray] = []
    for i in range(n):
        g_q += delta[i] * d_q[i]
    grad_parts.append(np.outer(query.val, g_q))
    for i, f in enumerate(cands):
        g = delta[i] * d_c[i]
        if f is None:
            g_s += g
        elif not f.empty:
            idx_parts.append(f.idx)
            grad_parts.append(np.outer(f.val, g))
    idx = np.concatenate(idx_parts)
    grads = np.concatenate(grad_parts) if grad_parts else np.zeros((0, Wt.shape[1]))
    rows, inv = np.unique(idx, return_inverse=True)
    acc = np.zeros((len(rows), Wt.shape[1]))
    np.add.at(acc, inv, grads)
    return PoolGradient(J, rows, acc, g_s, p)


# --------------------------------------------------------------------------
# per-sample bookkeeping


@dataclass
class _Prepared:
    sample: CompletionSample
    language: Language
    query: Features
    cands: list[Candidate]  # non-stop candidates of the masked store
    stop: Candidate
    feats: list[Features]
    local: sp.csr_matrix  # candidate features over `uniq`
    uniq: np.ndarray
    bm25_order: list[int]
    ppl: dict = field(default_factory=dict)


def _prepare(sample: CompletionSample, store: CandidateStore, model: RetrieverModel, cfg: TrainConfig) -> _Prepared:
    language = Language.from_path(sample.rel_path)
    masked = mask_and_exclude(sample, store)
    cands = masked.non_stop()
    stop = masked.stop_candidate
    query = query_from_prefix(sample.prefix, cfg.query_lines)
    feats = [model.features(c.text, language) for c in cands]
    if cands and any(f.idx.size for f in feats):
        idx = np.concatenate([f.idx for f in feats])
        val = np.concatenate([f.val for f in feats])
        indptr = np.cumsum([0] + [f.idx.size for f in feats])
        uniq, inv = np.unique(idx, return_inverse=True)
        local = sp.csr_matrix((val, inv, indptr), shape=(len(cands), len(uniq)))
    else:
        uniq = np.zeros(0, dtype=np.int64)
        local = sp.csr_matrix((len(cands), 0))
    bm = BM25([subtokens(c.text, language) for c in cands])
    scores = bm.scores(subtokens(query, language))
    bm25_order = sorted(range(len(cands)), key=lambda i: (-scores[i], cands[i].rel_path, cands[i].start_line))
    return _Prepared(sample, language, model.features(query, language), cands, stop, feats, local, uniq, bm25_order)


def _policy_order(prep: _Prepared, model: RetrieverModel) -> tuple[list[int], np.ndarray, float]:
    """Indices of non-stop candidates by descending policy score, their scores, and the stop score."""
    q = model.embed_features(prep.query)
    if prep.cands:
        embs = np.asarray(prep.local @ model.Wt[prep.uniq].astype(np.float64)) if prep.uniq.size else np.zeros((len(prep.cands), model.dim))
    else:
        embs = np.zeros((0, model.dim))
    is_stop = np.zeros(len(prep.cands) + 1, dtype=bool)
    is_stop[-1] = True
    scores = policy_scores(q, np.vstack([embs, np.zeros((1, model.dim))]), is_stop, model.stop)
    order = sorted(range(len(prep.cands)), key=lambda i: (-scores[i], prep.cands[i].rel_path, prep.cands[i].start_line))
    return order, scores[:-1], float(scores[-1])


def _pool_indices(prep: _Prepared, model: RetrieverModel, cfg: TrainConfig) -> list[int]:
    """Pool as indices into ``prep.cands``; ``-1`` is the stop candidate."""
    order, scores, stop_score = _policy_order(prep, model)
    n, m = cfg.pool_size, cfg.bm25_mix
    chosen = list(order[: n - m])
    seen = set(chosen)
    for i in prep.bm25_order[:m]:
        if i not in seen:
            chosen.append(i)
            seen.add(i)
    for i in order:
        if len(chosen) >= n:
            break
        if i not in seen:
            chosen.append(i)
            seen.add(i)
    keyed = [((-scores[i], prep.cands[i].rel_path, prep.cands[i].start_line), i) for i in chosen]
    keyed.append(((-stop_score, "￿", 0), -1))
    return [i for _, i in sorted(keyed)]


def build_pool(
    sample: CompletionSample,
    store: CandidateStore,
    model: RetrieverModel,
    config: TrainConfig = TrainConfig(),
) -> list[Candidate]:
    """Top policy candidates, BM25 top-``bm25_mix`` mixed in, plus the stop candidate.

    ``store`` is the repository store; the sample's own file is excluded here.
    """
    prep = _prepare(sample, store, model, config)
    return [prep.stop if i < 0 else prep.cands[i] for i in _pool_indices(prep, model, config)]


# --------------------------------------------------------------------------
# trainer


@dataclass
class StepResult:
    loss: float
    objective: float
    skipped: list[str]


class Trainer:
    """Holds the evaluator, candidate stores and reward memo for one training run."""

    def __init__(
        self,
        model: RetrieverModel,
        ngram: NGramModel,
        stores: dict[str, CandidateStore],
        weights: WeightConfig = WeightConfig(),
        config: TrainConfig = TrainConfig(),
        log_file=None,
    ):
        self.model = model
        self.ngram = ngram
        self.stores = stores
        self.weights = weights
        self.config = config
        self.log_file = log_file
        self._prepared: dict[str, _Prepared] = {}
        self._velocity: tuple[np.ndarray, np.ndarray] | None = None
        self.steps = 0

    def prepared(self, sample: CompletionSample) -> _Prepared:
        prep = self._prepared.get(sample.id)
        if prep is None:
            prep = _prepare(sample, self.stores[sample.repo_id], self.model, self.config)
            self._prepared[sample.id] = prep
        return prep

    def pool(self, sample: CompletionSample) -> list[Candidate]:
        prep = self.prepared(sample)
        return [prep.stop if i < 0 else prep.cands[i] for i in _pool_indices(prep, self.model, self.config)]

    def rewards(self, prep: _Prepared, pool_idx: Sequence[int]) -> tuple[list[int], list[float]]:
        """Rewards over the pool; perplexities are memoised per (sample, candidate)."""
        missing = [i for i in pool_idx if i not in prep.ppl]
        if missing:
            cands = [prep.stop if i < 0 else prep.cands[i] for i in missing]
            rv = compute_rewards(self.ngram, prep.sample, cands, self.weights, self.config.max_context_tokens)
            prep.ppl.update(zip(missing, rv.ppls))
        ppls = [prep.ppl[i] for i in pool_idx]
        best = min(ppls)
        return [int(p <= best) for p in ppls], ppls

    def _sample_gradient(self, sample: CompletionSample) -> PoolGradient | None:
        prep = self.prepared(sample)
        pool_idx = _pool_indices(prep, self.model, self.config)
        try:
            rewards, ppls = self.rewards(prep, pool_idx)
        except LmError as exc:
            log.warning("skipping sample %s: %s", sample.id, exc)
            self._log({"step": self.steps, "sample_id": sample.id, "skipped": str(exc)})
            return None
        self._log({"step": self.steps, "sample_id": sample.id, "ppls": ppls, "rewards": rewards})
        feats = [None if i < 0 else prep.feats[i] for i in pool_idx]
        return pool_objective(self.model.Wt, self.model.stop, self.model.temperature, prep.query, feats, rewards)

    def _log(self, rec: dict) -> None:
        if self.log_file is not None:
            self.log_file.write(dumps_line(rec) + "\n")

    def step(self, batch: Sequence[CompletionSample]) -> StepResult:
        """One ascent step on the mean pool objective of ``batch``."""
        if not batch:
            raise ValueError("batch must be non-empty")
        grads = []
        skipped = []
        for s in batch:
            g = self._sample_gradient(s)
            if g is None:
                skipped.append(s.id)
            else:
                grads.append(g)
        self.steps += 1
        if not grads:
            return StepResult(0.0, 0.0, skipped)
        scale = 1.0 / len(grads)
        objective = sum(g.objective for g in grads) * scale
        rows, inv = np.unique(np.concatenate([g.rows for g in grads]), return_inverse=True)
        G = np.zeros((len(rows), self.model.dim))
        np.add.at(G, inv, np.concatenate([g.row_grads for g in grads]))
        G *= scale
        g_s = sum(g.stop_grad for g in grads) * scale
        self._apply(rows, G, g_s)
        return StepResult(-objective, objective, skipped)

    def _apply(self, rows: np.ndarray, G: np.ndarray, g_s: np.ndarray) -> None:
        lr, mu = self.config.learning_rate, self.config.momentum
        model = self.model
        if lr == 0:
            return
        if mu:
            if self._velocity is None:
                self._velocity = (np.zeros(model.Wt.shape), np.zeros(model.dim))
            vW, vs = self._velocity
            vW *= mu
            vW[rows] += G
            vs *= mu
            vs += g_s
            touched = np.flatnonzero(np.any(vW != 0, axis=1))
            model.Wt[touched] = (model.Wt[touched].astype(np.float64) + lr * vW[touched]).astype(np.float32)
            model.stop[:] = (model.stop.astype(np.float64) + lr * vs).astype(np.float32)
            return
        model.Wt[rows] = (model.Wt[rows].astype(np.float64) + lr * G).astype(np.float32)
        model.stop[:] = (model.stop.astype(np.float64) + lr * g_s).astype(np.float32)

    def evaluate(self, samples: Iterable[CompletionSample]) -> dict:
        """Mean reward-weighted log-probability and top-1 reward-hit rate."""
        hits, logps, n = 0, 0.0, 0
        for s in samples:
            prep = self.prepared(s)
            pool_idx = _pool_indices(prep, self.model, self.config)
            try:
                rewards, _ = self.rewards(prep, pool_idx)
            except LmError:
                continue
            feats = [None if i < 0 else prep.feats[i] for i in pool_idx]
            g = pool_objective(self.model.Wt, self.model.stop, self.model.temperature, prep.query, feats, rewards)
            hits += rewards[int(np.argmax(g.probs))]
            logps += g.objective
            n += 1
        return {"hit_rate": hits / n if n else 0.0, "logprob": logps / n if n else 0.0, "n": n}


def split_holdout(dataset: Sequence[CompletionSample], fraction: float, seed: int) -> tuple[list, list]:
    idx = list(range(len(dataset)))
    random.Random(seed).shuffle(idx)
    n_hold = int(round(fraction * len(dataset))) if len(dataset) > 1 else 0
    n_hold = min(n_hold, len(dataset) - 1)
    hold = sorted(idx[:n_hold])
    train = sorted(idx[n_hold:])
    return [dataset[i] for i in train], [dataset[i] for i in hold]


def _epoch_order(n: int, count: int, rng: random.Random) -> list[int]:
    out: list[int] = []
    while len(out) < count:
        perm = list(range(n))
        rng.shuffle(perm)
        out.extend(perm)
    return out[:count]


@dataclass
class Checkpoint:
    model: RetrieverModel
    weights: WeightConfig = WeightConfig()
    train_config: TrainConfig = TrainConfig()
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    config_digest: str | None = None

    def header(self) -> dict:
        hdr = {
            "dim": self.model.dim,
            "hash_dim": self.model.hash_dim,
            "temperature": self.model.temperature,
            "seed": self.model.seed,
            "weights": asdict(self.weights),
            "train_config": asdict(self.train_config),
            "train_config_digest": self.train_config.digest(),
            "epoch": self.epoch,
            "history": self.history,
        }
        if self.config_digest:
            hdr["config_digest"] = self.config_digest
        return hdr


def train(
    dataset: Sequence[CompletionSample],
    stores: dict[str, CandidateStore],
    ngram: NGramModel,
    weights: WeightConfig = WeightConfig(),
    config: TrainConfig = TrainConfig(),
    model: RetrieverModel | None = None,
    on_epoch: Callable[[int, RetrieverModel], dict] | None = None,
    log_file=None,
) -> Checkpoint:
    """Run the training schedule and return the checkpoint with the best held-out hit rate."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    model = model if model is not None else RetrieverModel.init(seed=config.seed)
    trainer = Trainer(model, ngram, stores, weights, config, log_file)
    train_set, holdout = split_holdout(dataset, config.holdout_fraction, config.seed)
    monitor = holdout or train_set
    rng = random.Random(config.seed)

    def record(epoch: int, loss: float | None) -> dict:
        row = {"epoch": epoch, **trainer.evaluate(monitor)}
        if loss is not None:
            row["train_loss"] = loss
        if on_epoch is not None:
            row.update(on_epoch(epoch, model))
        log.info("epoch %d: %s", epoch, row)
        return row

    history = [record(0, None)]
    best = history[0]["hit_rate"]
    best_state = (model.copy(), 0)
    bad = 0
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(len(train_set), config.samples_per_epoch, rng)
        losses = []
        for b in range(0, len(order), config.batch_size):
            res = trainer.step([train_set[i] for i in order[b : b + config.batch_size]])
            losses.append(res.loss)
        row = record(epoch, float(np.mean(losses)) if losses else 0.0)
        history.append(row)
        if row["hit_rate"] > best:
            best, best_state, bad = row["hit_rate"], (model.copy(), epoch), 0
        else:
            bad += 1
            if bad >= config.patience:
                log.info("early stop after epoch %d", epoch)
                break
    best_model, best_epoch = best_state
    return Checkpoint(best_model, weights, config, best_epoch, history)


def step(
    batch: Sequence[CompletionSample],
    model: RetrieverModel,
    ngram: NGramModel,
    weights: WeightConfig,
    config: TrainConfig,
    stores: dict[str, CandidateStore],
) -> tuple[float, RetrieverModel]:
    """Functional form of :meth:`Trainer.step`; ``model`` is updated in place and returned."""
    res = Trainer(model, ngram, stores, weights, config).step(batch)
    return res.loss, model


# --------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = canonical_json(ckpt.header()).encode("utf-8")
    W = np.ascontiguousarray(ckpt.model.Wt.T, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(W.tobytes())
        fh.write(np.asarray(ckpt.model.stop, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointError("file shorter than the fixed header", reason="Truncated")
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes", reason="BadMagic")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", reason="UnsupportedVersion")
    if len(data) < 12 + hlen:
        raise CheckpointError("header truncated", reason="Truncated")
    try:
        hdr = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        d, h = int(hdr["dim"]), int(hdr["hash_dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}", reason="Corrupt") from None
    if d < 1 or h < 1:
        raise CheckpointError("invalid dimensions", reason="Corrupt")
    body = data[12 + hlen :]
    need = 4 * (d * h + d)
    if len(body) < need:
        raise CheckpointError("parameter block truncated", reason="Truncated")
    if len(body) > need:
        raise CheckpointError("trailing bytes after parameters", reason="Corrupt")
    W = np.frombuffer(body, dtype="<f4", count=d * h).reshape(d, h)
    stop = np.frombuffer(body, dtype="<f4", count=d, offset=4 * d * h)
    model = RetrieverModel(
        np.ascontiguousarray(W.T, dtype=np.float32), stop.astype(np.float32), hdr["temperature"], hdr["seed"]
    )
    tc = hdr.get("train_config")
    return Checkpoint(
        model,
        WeightConfig(**hdr.get("weights", {})),
        TrainConfig(**tc) if tc else TrainConfig(),
        hdr.get("epoch", 0),
        hdr.get("history", []),
        hdr.get("config_digest"),
    )
