"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest summary:

    pytest tests/test_acceptance.py -v
"""

import json
import math
import random
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from reporag.chunker import ChunkerConfig, chunk_file
from reporag.evaluator import WeightConfig, rewards_from_ppls, token_weights, weighted_ppl, weighted_ppl_from_nll
from reporag.lm import lm_tokens, sequence_nll, train_ngram
from reporag.pipeline import CompletionConfig, evaluate_benchmark, levenshtein
from reporag.retriever import BM25, policy_rank, query_from_prefix
from reporag.sampler import mask_and_exclude
from reporag.synthetic import SyntheticConfig, make_benchmark
from reporag.trainer import TrainConfig, pool_objective, split_holdout, train

import oracles
import test_ingest
from conftest import ACCEPTANCE, py


@contextmanager
def criterion(num, title, limit):
    """Time the body, enforce the runtime limit and record the outcome."""
    detail = {}
    start = time.perf_counter()
    ok = False
    try:
        yield detail
        secs = time.perf_counter() - start
        assert secs < limit, f"took {secs:.1f}s, limit {limit}s"
        ok = True
    finally:
        secs = time.perf_counter() - start
        text = " ".join(f"{k}={v}" for k, v in detail.items())
        ACCEPTANCE.append((num, title, ok, secs, text))
        print(f"{'PASS' if ok else 'FAIL'} [{num}] {title} ({secs:.1f}s) {text}")


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b))


def test_1_weighted_ppl_oracle():
    with criterion(1, "weighted PPL matches the weighted-geometric-mean oracle", 5) as d:
        rng = random.Random(1)
        worst = 0.0
        for _ in range(500):
            n = rng.randint(1, 64)
            nll = [rng.uniform(0, 12) for _ in range(n)]
            w = [rng.choice([1.0, 2.0, rng.uniform(0.1, 5)]) for _ in range(n)]
            worst = max(worst, rel_err(weighted_ppl_from_nll(nll, w), oracles.weighted_ppl(nll, w)))
        # end to end through the language model
        lm = train_ngram([py("a.py", "def f(path):\n    with open(path) as fh:\n        return fh.read()\n" * 3)])
        cfg = WeightConfig()
        for i in range(20):
            target = lm_tokens(rng.choice(["return fh.read()", "open(path)", f"x{i} = f(path)"]))
            ctx = "def g(path):\n" * rng.randint(0, 3)
            nll = sequence_nll(lm, ctx, target)
            worst = max(worst, rel_err(weighted_ppl(lm, ctx, target, cfg), oracles.weighted_ppl(nll, token_weights(target, cfg))))
        d["max_rel_err"] = f"{worst:.2e}"
        assert worst <= 1e-12
        nll = [math.log(2), math.log(8)]
        assert weighted_ppl_from_nll(nll, [1, 1]) == 4.0
        assert rel_err(weighted_ppl_from_nll(nll, [2, 1]), 2 ** (5 / 3)) <= 1e-12


def test_2_reward_argmin():
    with criterion(2, "rewards equal the brute-force argmin set with ties", 5) as d:
        rng = random.Random(2)
        ties = 0
        for _ in range(1000):
            n = rng.randint(1, 64)
            levels = [rng.uniform(1, 50) for _ in range(rng.randint(1, 6))]
            ppls = [rng.choice(levels) for _ in range(n)]
            got = rewards_from_ppls(ppls)
            assert got == oracles.argmin_rewards(ppls)
            ties += sum(got) > 1
        d["pools_with_ties"] = ties
        assert ties > 100


def test_3_gradient_check():
    with criterion(3, "analytic gradient matches central differences", 30) as d:
        rng = np.random.default_rng(3)
        h, dim, eps, temp = 64, 8, 1e-5, 0.1
        worst = 0.0
        for probe in range(100):
            Wt = rng.uniform(-0.5, 0.5, size=(h, dim))
            stop = rng.uniform(-0.5, 0.5, size=dim)

            def feats():
                idx = np.unique(rng.integers(0, h, size=rng.integers(1, 8)))
                val = rng.normal(size=idx.size)
                return oracles.Features(idx.astype(np.int64), val / np.linalg.norm(val))

            pool = int(rng.integers(2, 11))
            cands = [None] + [feats() for _ in range(pool - 1)]
            rewards = rng.integers(0, 2, size=pool).astype(float)
            if not rewards.any():
                rewards[rng.integers(pool)] = 1
            q = feats()
            g = pool_objective(Wt, stop, temp, q, cands, rewards)
            if probe % 4 == 0:
                j = int(rng.integers(dim))
                plus, minus = stop.copy(), stop.copy()
                plus[j] += eps
                minus[j] -= eps
                num = (oracles.objective(Wt, plus, temp, q, cands, rewards) - oracles.objective(Wt, minus, temp, q, cands, rewards)) / (2 * eps)
                ana = g.stop_grad[j]
            else:
                k = int(rng.integers(len(g.rows)))
                j = int(rng.integers(dim))
                plus, minus = Wt.copy(), Wt.copy()
                plus[g.rows[k], j] += eps
                minus[g.rows[k], j] -= eps
                num = (oracles.objective(plus, stop, temp, q, cands, rewards) - oracles.objective(minus, stop, temp, q, cands, rewards)) / (2 * eps)
                ana = g.row_grads[k, j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            worst = max(worst, err)
        d["max_rel_err"] = f"{worst:.2e}"
        assert worst <= 1e-4


def gold_accuracy(bench, model, samples):
    hits = 0
    for s in samples:
        store = mask_and_exclude(s, bench.stores[s.repo_id])
        top = policy_rank(query_from_prefix(s.prefix), store, model).candidates[0]
        hits += (not top.is_stop) and (top.rel_path, top.start_line) == bench.gold[s.id]
    return hits / len(samples)


def moving_average(xs, k=3):
    return [sum(xs[i - k + 1 : i + 1]) / k for i in range(k - 1, len(xs))]


@pytest.mark.slow
def test_4_synthetic_learning():
    with criterion(4, "retriever learns the synthetic gold candidates", 600) as d:
        syn = SyntheticConfig()
        bench = make_benchmark(syn)
        assert len(bench.samples) == 200
        distractors = min(len(st.non_stop()) - 1 for st in bench.stores.values())
        d["min_distractors"] = distractors
        assert distractors >= 50
        lm = train_ngram(make_benchmark(SyntheticConfig(seed=syn.seed + 1000)).files)
        tcfg = TrainConfig()
        _, hold = split_holdout(bench.samples, tcfg.holdout_fraction, tcfg.seed)
        ck = train(bench.samples, bench.stores, lm, WeightConfig(), tcfg, on_epoch=lambda e, m: {"acc": gold_accuracy(bench, m, hold)})
        accs = [row["acc"] for row in ck.history]
        final = gold_accuracy(bench, ck.model, hold)
        d["acc_by_epoch"] = ",".join(f"{a:.2f}" for a in accs)
        d["heldout_acc"] = f"{final:.2f}"
        reports = {mode: evaluate_benchmark(bench.samples, bench.stores, ck.model, lm, cfg=CompletionConfig(retrieval=mode))
                   for mode in ("none", "bm25", "policy")}
        em = {mode: r.em for mode, r in reports.items()}
        d["em"] = "/".join(f"{m}:{v:.1f}" for m, v in em.items())
        # (a)
        assert final >= 0.8
        assert final - accs[0] >= 0.5
        # (b)
        ma = moving_average(accs)
        peak = ma.index(max(ma))
        assert all(a <= b for a, b in zip(ma[:peak], ma[1 : peak + 1])), ma
        # (c)
        assert em["policy"] - em["none"] >= 30
        assert em["policy"] - em["bm25"] >= 5


def stop_first_rate(bench, model, samples):
    solvable = [s for s in samples if s.id in bench.prefix_solvable]
    first = sum(policy_rank(query_from_prefix(s.prefix), mask_and_exclude(s, bench.stores[s.repo_id]), model).candidates[0].is_stop
                for s in solvable)
    return first / len(solvable), len(solvable)


@pytest.mark.slow
def test_5_stop_signal():
    with criterion(5, "stop candidate learned for prefix-solvable samples", 300) as d:
        syn = SyntheticConfig(prefix_solvable_fraction=0.5)
        bench = make_benchmark(syn)
        d["solvable"] = len(bench.prefix_solvable)
        lm = train_ngram(make_benchmark(SyntheticConfig(prefix_solvable_fraction=0.5, seed=syn.seed + 1000)).files)
        tcfg = TrainConfig()
        _, hold = split_holdout(bench.samples, tcfg.holdout_fraction, tcfg.seed)
        ck = train(bench.samples, bench.stores, lm, WeightConfig(), tcfg)
        rate, n = stop_first_rate(bench, ck.model, hold)
        d["stop_first_heldout"] = f"{rate:.2f}(n={n})"
        d["stop_first_all"] = "{:.2f}(n={})".format(*stop_first_rate(bench, ck.model, bench.samples))
        with_stop = evaluate_benchmark(bench.samples, bench.stores, ck.model, lm, cfg=CompletionConfig(use_stop=True)).em
        without = evaluate_benchmark(bench.samples, bench.stores, ck.model, lm, cfg=CompletionConfig(use_stop=False)).em
        d["em"] = f"stop:{with_stop:.1f}/nostop:{without:.1f}"
        assert rate >= 0.6
        assert with_stop >= without


def nonblank(text):
    return [line for line in text.split("\n") if line.strip()]


def test_6_structural_suites():
    with criterion(6, "chunker, topological order, Levenshtein and BM25 suites", 120) as d:
        rng = random.Random(6)
        # chunker coverage and size bound
        alphabet = "abc xyz=()"
        for _ in range(300):
            lines = [rng.choice(["", "   ", "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12)))])
                     for _ in range(rng.randint(0, 80))]
            f = py("f.py", "\n".join(lines))
            T = rng.randint(1, 25)
            cands = chunk_file(f, ChunkerConfig(T))
            covered = []
            for c in cands:
                assert c.line_count <= T
                assert nonblank(c.text) == [x for x in f.lines[c.start_line - 1 : c.end_line] if x.strip()]
                covered.extend(nonblank(c.text))
            assert covered == [x for x in f.lines if x.strip()]
        # topological order on random DAGs
        for _ in range(200):
            test_ingest.check_topological(test_ingest.random_dag(rng, rng.randint(1, 50), rng.choice([0.02, 0.05, 0.1, 0.3])))
        # Levenshtein against the full DP table
        for _ in range(1000):
            a = "".join(rng.choice("ab c\n") for _ in range(rng.randint(0, 64)))
            b = "".join(rng.choice("ab c\n") for _ in range(rng.randint(0, 64)))
            assert levenshtein(a, b) == oracles.levenshtein(a, b)
        # BM25 against the direct formula
        vocab = "alpha beta gamma delta eps zeta eta theta".split()
        for _ in range(100):
            docs = [[rng.choice(vocab) for _ in range(rng.randint(1, 12))] for _ in range(rng.randint(1, 32))]
            query = [rng.choice(vocab) for _ in range(rng.randint(0, 6))]
            for g, w in zip(BM25(docs).scores(query), oracles.bm25(query, docs)):
                assert abs(g - w) <= 1e-9 * max(abs(w), 1e-3)
        d["cases"] = "300 files, 200 DAGs, 1000 pairs, 100 pools"


def cli(*argv, cwd):
    proc = subprocess.run([sys.executable, "-m", "reporag.cli", *argv], cwd=cwd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_7_cli_reproducibility(tmp_path):
    with criterion(7, "deterministic CLI runs are byte-identical", 300) as d:
        make_benchmark(SyntheticConfig(repos=2, samples_per_repo=8, topics=16, fillers_per_repo=6, seed=7)).write(tmp_path / "repos")
        make_benchmark(SyntheticConfig(repos=2, samples_per_repo=8, topics=16, fillers_per_repo=6, seed=1007)).write(tmp_path / "lmrepos")
        repos = [x for r in sorted((tmp_path / "repos").iterdir()) for x in ("--repo", str(r))]
        lmrepos = [x for r in sorted((tmp_path / "lmrepos").iterdir()) for x in ("--repo", str(r))]
        common = ["--deterministic", "--seed", "11"]
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run
            out.mkdir()
            cli("ingest", *repos, "--out", "clusters.jsonl", *common, cwd=out)
            cli("chunk", *repos, "--threshold", "12", *common, cwd=out)
            cli("build-dataset", *repos, "--clusters", "clusters.jsonl", "--count", "40", *common, cwd=out)
            cli("train-lm", *lmrepos, *common, cwd=out)
            cli("train", "--data", "data.jsonl", "--lm", "lm.json", "--dim", "32", "--hash-dim", "4096",
                "--epochs", "3", "--samples-per-epoch", "100", *common, cwd=out)
            cli("eval", "--data", "data.jsonl", "--ckpt", "model.rlr", "--lm", "lm.json", *common, cwd=out)
            outputs.append(out)
        names = ["clusters.jsonl", "candidates.jsonl", "data.jsonl", "lm.json", "model.rlr", "report.json", "predictions.jsonl"]
        same = [n for n in names if (outputs[0] / n).read_bytes() == (outputs[1] / n).read_bytes()]
        d["identical"] = f"{len(same)}/{len(names)}"
        assert same == names
        assert json.loads((outputs[0] / "report.json").read_text())["n"] == 40


def test_8_reduction_identity():
    with criterion(8, "equal weights reduce weighted PPL to plain PPL", 5) as d:
        rng = random.Random(8)
        worst = 0.0
        for _ in range(500):
            n = rng.randint(1, 64)
            nll = [rng.uniform(0, 12) for _ in range(n)]
            w = rng.choice([1.0, 2.0, rng.uniform(0.1, 10)])
            worst = max(worst, rel_err(weighted_ppl_from_nll(nll, [w] * n), oracles.plain_ppl(nll)))
        d["max_rel_err"] = f"{worst:.2e}"
        assert worst <= 1e-12


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
