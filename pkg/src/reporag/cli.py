"""Command-line entry point: ``reporag <command> [options]``.

Every tunable flag has a matching key in the optional ``--config`` JSON file
(the flag name with dashes turned into underscores). Flags win over the file,
the file wins over built-in defaults. The resolved values, minus file paths,
are hashed into a run digest that is stamped into every output artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from dataclasses import dataclass
from pathlib import Path

from .chunker import Candidate, CandidateStore, ChunkerConfig, build_candidate_store, read_candidates, write_candidates
from .errors import ReporagError
from .evaluator import WeightConfig
from .ingest import (
    DEFAULT_MAX_BYTES,
    FileCluster,
    Language,
    build_dependency_graph,
    cluster_and_sort,
    scan_repository,
    write_clusters,
)
from .jsonio import digest, dumps_line, read_jsonl
from .lm import NGramModel, train_ngram
from .pipeline import (
    RETRIEVAL_MODES,
    CompletionConfig,
    NGramAdapter,
    SubprocessAdapter,
    evaluate_benchmark,
    iterative_complete,
)
from .retriever import RetrieverModel, bm25_rank, policy_rank
from .sampler import SamplerConfig, build_dataset, mask_and_exclude, read_dataset, write_dataset
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("reporag")

SEED_ENV = "RLCODER_SEED"

# Built-in defaults for every tunable option. Paths are listed separately and
# never enter the run digest.
DEFAULTS = {
    "lang": "python",
    "max_bytes": DEFAULT_MAX_BYTES,
    "threshold": 20,
    "count": 1000,
    "margin_fraction": 0.1,
    "min_target_lines": 1,
    "max_target_lines": 3,
    "max_prefix_lines": 120,
    "order": 3,
    "add_k": 0.01,
    "min_count": 2,
    "cache_order": 6,
    "cache_weight": 0.7,
    "dim": 128,
    "hash_dim": 1 << 16,
    "temperature": 0.1,
    "pool_size": 10,
    "bm25_mix": 5,
    "batch_size": 16,
    "learning_rate": 0.05,
    "epochs": 20,
    "samples_per_epoch": 2000,
    "patience": 3,
    "holdout_fraction": 0.1,
    "momentum": 0.0,
    "query_lines": 20,
    "max_context_tokens": 512,
    "k_first": 4,
    "w_first": 2.0,
    "w_api": 2.0,
    "retrieval": "policy",
    "use_stop": True,
    "max_keep": 5,
    "budget": 1024,
    "max_new_tokens": 64,
    "rounds": 1,
    "topk": 10,
    "timeout": 60.0,
}
PATH_KEYS = {
    "repo", "out", "clusters", "data", "candidates", "lm", "ckpt", "log",
    "predictions", "query", "query_file", "repo_id", "id", "generator",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage problems exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    command: str
    seed: int
    options: dict

    def to_json(self) -> dict:
        tunable = {k: v for k, v in self.options.items() if k not in PATH_KEYS}
        return {"command": self.command, "seed": self.seed, "options": tunable}

    @property
    def digest(self) -> str:
        return digest(self.to_json())


# --------------------------------------------------------------------------
# parser


def _opt(p: argparse.ArgumentParser, name: str, type=None, choices=None, help=None, **kw):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=type, choices=choices, default=None, help=help, **kw)


def _repo_args(p):
    p.add_argument("--repo", action="append", default=None, metavar="DIR", help="repository root (repeatable)")
    _opt(p, "lang", choices=["python", "java"], help="source language (default python)")


def _completion_args(p):
    _opt(p, "retrieval", choices=list(RETRIEVAL_MODES), help="ranking used for context (default policy)")
    p.add_argument("--use-stop", dest="use_stop", action=argparse.BooleanOptionalAction, default=None,
                   help="truncate the ranking at the stop candidate (default on)")
    _opt(p, "max_keep", int, help="candidates kept after truncation (default 5)")
    _opt(p, "budget", int, help="prompt budget in tokens (default 1024)")
    _opt(p, "max_new_tokens", int, help="generation length limit (default 64)")
    _opt(p, "query_lines", int, help="non-blank prefix lines used as the query (default 20)")
    _opt(p, "rounds", int, help="retrieve-generate rounds (default 1)")
    _opt(p, "generator", help="external generator command speaking the JSON-lines protocol")
    _opt(p, "timeout", float, help="seconds to wait for the external generator (default 60)")


def _model_inputs(p):
    _opt(p, "data", help="dataset JSONL")
    _opt(p, "candidates", help="candidates JSONL (default: candidates.jsonl beside --data)")
    _opt(p, "ckpt", help="retriever checkpoint")
    _opt(p, "lm", help="n-gram model JSON")


def _global_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help=f"random seed (else ${SEED_ENV}, else config, else 0)")
    p.add_argument("--config", metavar="FILE", help="JSON file of option values")
    p.add_argument("--deterministic", action="store_true", help="single worker, byte-reproducible outputs")
    p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="reporag", description="Repository-level code completion with a learned retriever.")
    _global_args(ap)
    ap.set_defaults(seed=None, config=None, deterministic=False, jobs=None, verbose=False)
    # global flags are also accepted after the command name
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    _global_args(common)
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help, parents=[common])

    p = command("ingest", help="scan repositories and write dependency clusters")
    _repo_args(p)
    _opt(p, "max_bytes", int, help="skip files larger than this")
    _opt(p, "out", help="output JSONL (default clusters.jsonl)")

    p = command("chunk", help="split repositories into retrieval candidates")
    _repo_args(p)
    _opt(p, "threshold", int, help="maximum lines per candidate (default 20)")
    _opt(p, "max_bytes", int, help="skip files larger than this")
    _opt(p, "out", help="output JSONL (default candidates.jsonl)")

    p = command("build-dataset", help="draw completion samples from clustered files")
    _repo_args(p)
    _opt(p, "clusters", help="clusters JSONL from `ingest` (recomputed when absent)")
    _opt(p, "count", int, help="number of samples (default 1000)")
    _opt(p, "margin_fraction", float, help="fraction of lines kept clear at each end (default 0.1)")
    _opt(p, "min_target_lines", int)
    _opt(p, "max_target_lines", int)
    _opt(p, "max_prefix_lines", int)
    _opt(p, "max_bytes", int, help="skip files larger than this")
    _opt(p, "out", help="output JSONL (default data.jsonl)")

    p = command("train-lm", help="fit the n-gram evaluator/generator")
    _repo_args(p)
    _opt(p, "order", int)
    _opt(p, "add_k", float)
    _opt(p, "min_count", int)
    _opt(p, "cache_order", int)
    _opt(p, "cache_weight", float)
    _opt(p, "max_bytes", int, help="skip files larger than this")
    _opt(p, "out", help="output JSON (default lm.json)")

    p = command("train", help="train the retriever with evaluator rewards")
    _model_inputs(p)
    for name, typ in [
        ("dim", int), ("hash_dim", int), ("temperature", float), ("pool_size", int), ("bm25_mix", int),
        ("batch_size", int), ("learning_rate", float), ("epochs", int), ("samples_per_epoch", int),
        ("patience", int), ("holdout_fraction", float), ("momentum", float), ("query_lines", int),
        ("max_context_tokens", int), ("k_first", int), ("w_first", float), ("w_api", float),
    ]:
        _opt(p, name, typ)
    _opt(p, "log", help="per-step JSONL log")
    _opt(p, "out", help="output checkpoint (default model.rlr)")

    p = command("retrieve", help="rank one repository's candidates for a query")
    _opt(p, "candidates", help="candidates JSONL")
    _opt(p, "ckpt", help="retriever checkpoint (policy ranking)")
    _opt(p, "repo_id", help="repository to search (default: the only one)")
    _opt(p, "query", help="query text")
    _opt(p, "query_file", help="read the query from this file")
    _opt(p, "retrieval", choices=["policy", "bm25"], help="ranking (default policy)")
    _opt(p, "topk", int, help="entries to print (default 10)")
    _opt(p, "lang", choices=["python", "java"])
    _opt(p, "out", help="output JSONL (default stdout)")

    p = command("complete", help="complete dataset samples")
    _model_inputs(p)
    _completion_args(p)
    _opt(p, "id", help="only this sample id")
    _opt(p, "out", help="output JSONL (default stdout)")

    p = command("eval", help="complete and score a dataset")
    _model_inputs(p)
    _completion_args(p)
    _opt(p, "out", help="report JSON (default report.json)")
    _opt(p, "predictions", help="per-sample JSONL (default predictions.jsonl beside --out)")
    return ap


# --------------------------------------------------------------------------
# option resolution


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def resolve(args: argparse.Namespace, file_cfg: dict) -> RunConfig:
    skip = {"command", "seed", "config", "deterministic", "jobs", "verbose"}
    options = {}
    for key, value in vars(args).items():
        if key in skip:
            continue
        if value is None:
            value = file_cfg.get(key, DEFAULTS.get(key))
        options[key] = value
    if args.seed is not None:
        seed = args.seed
    elif os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    else:
        seed = int(file_cfg.get("seed", 0))
    return RunConfig(args.command, seed, options)


def _need(opts: dict, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if not opts.get(n)]
    if missing:
        raise UsageError(f"the following arguments are required: {', '.join(missing)}")


def _candidates_path(opts: dict) -> str:
    if opts.get("candidates"):
        return opts["candidates"]
    return str(Path(opts["data"]).with_name("candidates.jsonl"))


def _scan_all(opts: dict):
    files = []
    for root in opts["repo"]:
        files.extend(scan_repository(root, opts["lang"], max_bytes=opts["max_bytes"]))
    return files


def _by_repo(files):
    out: dict[str, list] = {}
    for f in files:
        out.setdefault(f.repo_id, []).append(f)
    return out


def _completion_config(opts: dict) -> CompletionConfig:
    return CompletionConfig(
        retrieval=opts["retrieval"],
        use_stop=bool(opts["use_stop"]),
        max_keep=opts["max_keep"],
        budget=opts["budget"],
        max_new_tokens=opts["max_new_tokens"],
        query_lines=opts["query_lines"],
        rounds=opts["rounds"],
    )


def _check_model_flags(opts: dict, cfg: CompletionConfig) -> None:
    _need(opts, "data")
    if cfg.retrieval == "policy":
        _need(opts, "ckpt")
    if not opts.get("generator"):
        _need(opts, "lm")


def _load_models(opts: dict, cfg: CompletionConfig):
    model = load_checkpoint(opts["ckpt"]).model if cfg.retrieval == "policy" else None
    ngram = None if opts.get("generator") else NGramModel.load(opts["lm"])
    return model, ngram


# --------------------------------------------------------------------------
# commands


def cmd_ingest(run: RunConfig, jobs: int) -> None:
    opts = run.options
    _need(opts, "repo")
    clusters = []
    for repo, files in _by_repo(_scan_all(opts)).items():
        clusters.extend(cluster_and_sort(build_dependency_graph(files), repo))
    write_clusters(opts["out"] or "clusters.jsonl", clusters, run.digest)
    log.info("wrote %d clusters", len(clusters))


def cmd_chunk(run: RunConfig, jobs: int) -> None:
    opts = run.options
    _need(opts, "repo")
    stores = []
    for root in opts["repo"]:
        files = scan_repository(root, opts["lang"], max_bytes=opts["max_bytes"])
        repo_id = Path(root).resolve().name
        stores.append(build_candidate_store(files, ChunkerConfig.for_language(opts["lang"], opts["threshold"]), repo_id))
    write_candidates(opts["out"] or "candidates.jsonl", stores, run.digest)
    log.info("wrote %d candidates", sum(len(s) for s in stores))


def cmd_build_dataset(run: RunConfig, jobs: int) -> None:
    opts = run.options
    _need(opts, "repo")
    files = _scan_all(opts)
    if opts.get("clusters"):
        clusters = [FileCluster(r["repo"], tuple(r["files"]), r["cyclic"]) for r in read_jsonl(opts["clusters"])]
    else:
        clusters = []
        for repo, fs in _by_repo(files).items():
            clusters.extend(cluster_and_sort(build_dependency_graph(fs), repo))
    config = SamplerConfig(
        margin_fraction=opts["margin_fraction"],
        min_target_lines=opts["min_target_lines"],
        max_target_lines=opts["max_target_lines"],
        max_prefix_lines=opts["max_prefix_lines"],
        seed=run.seed,
    )
    samples = build_dataset(clusters, files, config, opts["count"])
    write_dataset(opts["out"] or "data.jsonl", samples, run.digest)
    log.info("wrote %d samples", len(samples))


def cmd_train_lm(run: RunConfig, jobs: int) -> None:
    opts = run.options
    _need(opts, "repo")
    model = train_ngram(
        _scan_all(opts),
        order=opts["order"],
        add_k=opts["add_k"],
        min_count=opts["min_count"],
        cache_order=opts["cache_order"],
        cache_weight=opts["cache_weight"],
    )
    model.save(opts["out"] or "lm.json", run.digest)
    log.info("vocabulary size %d", len(model.vocab))


def cmd_train(run: RunConfig, jobs: int) -> None:
    opts = run.options
    _need(opts, "data", "lm")
    dataset = read_dataset(opts["data"])
    stores = read_candidates(_candidates_path(opts))
    ngram = NGramModel.load(opts["lm"])
    weights = WeightConfig(opts["k_first"], opts["w_first"], opts["w_api"])
    config = TrainConfig(
        pool_size=opts["pool_size"],
        bm25_mix=opts["bm25_mix"],
        batch_size=opts["batch_size"],
        learning_rate=opts["learning_rate"],
        epochs=opts["epochs"],
        samples_per_epoch=opts["samples_per_epoch"],
        patience=opts["patience"],
        seed=run.seed,
        holdout_fraction=opts["holdout_fraction"],
        momentum=opts["momentum"],
        query_lines=opts["query_lines"],
        max_context_tokens=opts["max_context_tokens"],
    )
    model = RetrieverModel.init(opts["dim"], opts["hash_dim"], opts["temperature"], run.seed)
    log_fh = open(opts["log"], "w", encoding="utf-8", newline="\n") if opts.get("log") else None
    try:
        ckpt = train(dataset, stores, ngram, weights, config, model=model, log_file=log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = Checkpoint(ckpt.model, ckpt.weights, ckpt.train_config, ckpt.epoch, ckpt.history, run.digest)
    save_checkpoint(ckpt, opts["out"] or "model.rlr")
    log.info("best epoch %d", ckpt.epoch)


def cmd_retrieve(run: RunConfig, jobs: int) -> None:
    opts = run.options
    _need(opts, "candidates")
    if opts.get("query_file"):
        query = Path(opts["query_file"]).read_text(encoding="utf-8")
    elif opts.get("query") is not None:
        query = opts["query"]
    else:
        raise UsageError("one of --query or --query-file is required")
    stores = read_candidates(opts["candidates"])
    repo_id = opts.get("repo_id")
    if repo_id is None:
        if len(stores) != 1:
            raise UsageError("--repo-id is required when the candidate file holds several repositories")
        repo_id = next(iter(stores))
    if repo_id not in stores:
        raise ReporagError(f"no candidates for repository {repo_id!r}")
    language = Language.parse(opts["lang"] or "python")
    if opts["retrieval"] == "bm25":
        ranked = bm25_rank(query, stores[repo_id], language=language)
    else:
        _need(opts, "ckpt")
        ranked = policy_rank(query, stores[repo_id], load_checkpoint(opts["ckpt"]).model, language)
    lines = []
    for rank, (c, score) in enumerate(ranked.entries[: opts["topk"]], start=1):
        rec = {"rank": rank, "path": c.rel_path, "start": c.start_line, "end": c.end_line,
               "stop": c.is_stop, "score": score, "config_digest": run.digest}
        lines.append(dumps_line(rec) + "\n")
    _emit(opts.get("out"), lines)


def cmd_complete(run: RunConfig, jobs: int) -> None:
    opts = run.options
    cfg = _completion_config(opts)
    _check_model_flags(opts, cfg)
    dataset = read_dataset(opts["data"])
    if opts.get("id"):
        dataset = [s for s in dataset if s.id == opts["id"]]
        if not dataset:
            raise ReporagError(f"no sample with id {opts['id']!r}")
    stores = read_candidates(_candidates_path(opts)) if opts["retrieval"] != "none" else {}
    model, ngram = _load_models(opts, cfg)
    adapter = SubprocessAdapter(shlex.split(opts["generator"]), opts["timeout"]) if opts.get("generator") else None
    lines = []
    try:
        for s in dataset:
            if s.repo_id in stores:
                store = mask_and_exclude(s, stores[s.repo_id])
            else:
                store = CandidateStore(s.repo_id, [Candidate.stop(s.repo_id)])
            gen = adapter or NGramAdapter(ngram, Language.from_path(s.rel_path))
            text = iterative_complete(s, store, model, ngram, gen, cfg)
            lines.append(dumps_line({"id": s.id, "completion": text, "config_digest": run.digest}) + "\n")
    finally:
        if adapter is not None:
            adapter.close()
    _emit(opts.get("out"), lines)


def cmd_eval(run: RunConfig, jobs: int) -> None:
    opts = run.options
    cfg = _completion_config(opts)
    _check_model_flags(opts, cfg)
    dataset = read_dataset(opts["data"])
    stores = read_candidates(_candidates_path(opts)) if opts["retrieval"] != "none" else {}
    model, ngram = _load_models(opts, cfg)
    out = opts["out"] or "report.json"
    predictions = opts.get("predictions") or str(Path(out).with_name("predictions.jsonl"))
    report = evaluate_benchmark(
        dataset,
        stores,
        model,
        ngram,
        cfg=cfg,
        report_path=out,
        predictions_path=predictions,
        config_digest=run.digest,
        jobs=jobs,
        generator_command=shlex.split(opts["generator"]) if opts.get("generator") else None,
        timeout=opts["timeout"],
    )
    print(f"n={report.n} em={report.em:.2f} es={report.es:.2f}")


def _emit(path: str | None, lines: list[str]) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
    else:
        sys.stdout.writelines(lines)


COMMANDS = {
    "ingest": cmd_ingest,
    "chunk": cmd_chunk,
    "build-dataset": cmd_build_dataset,
    "train-lm": cmd_train_lm,
    "train": cmd_train,
    "retrieve": cmd_retrieve,
    "complete": cmd_complete,
    "eval": cmd_eval,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("reporag: error: a command is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = resolve(args, _load_config(args.config))
        jobs = 1 if args.deterministic else (args.jobs or os.cpu_count() or 1)
        if jobs < 1:
            raise UsageError("--jobs must be positive")
        log.info("run digest %s", run.digest)
        COMMANDS[args.command](run, jobs)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"reporag {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ReporagError, OSError, ValueError, KeyError) as exc:
        print(f"reporag {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
