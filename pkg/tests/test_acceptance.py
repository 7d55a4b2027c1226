"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
with its measured time. Run with ``pytest tests/test_acceptance.py -v -s``.
"""
import json
import math
import time

import numpy as np
import pytest

from desklm import tensor as T
from desklm.bpe import bpe_decode, bpe_encode, bpe_train
from desklm.config import build_config
from desklm.corpus import (
    DedupConfig,
    MinHasher,
    RedditThread,
    dedup_corpus,
    exact_jaccard,
    extract_longest_chain,
    shingle,
)
from desklm.evalharness import icat_score, normalized_perplexity, unigram_f1
from desklm.logbook import read_events
from desklm.model import ModelConfig, get_preset, init_parameters
from desklm.optim import PredivideConfig, ScheduleConfig, lr_at, predivide_reduce
from desklm.trainer import FaultEntry, FaultSchedule, train

from helpers import planted_dedup_corpus, repetition_corpus, tiny_config
from oracles import max_rel_error, numeric_gradient
from test_bpe import merges_as_bytes, reference_bpe_train
from test_corpus import exhaustive_longest_path, random_tree


def report(number: int, name: str, started: float, budget_s: float):
    elapsed = time.time() - started
    print(f"\nACCEPTANCE {number:2d} PASS  {name}  ({elapsed:.2f}s, budget {budget_s:.0f}s)")
    assert elapsed < budget_s, f"criterion {number} exceeded its {budget_s}s budget"


# -- 1. gradient fidelity ----------------------------------------------------


def test_acceptance_01_gradient_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    CASES = 100
    worst: dict[str, float] = {}

    def check(name, build, x0):
        analytic_holder = T.Tensor(x0.copy(), requires_grad=True)
        with T.Tape() as tape:
            loss = build(analytic_holder)
        T.backward(tape, loss)
        numeric = numeric_gradient(lambda arr: build(T.Tensor(arr)).item(), x0)
        err = max_rel_error(analytic_holder.grad, numeric)
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(CASES):
        b = T.Tensor(rng.standard_normal((3, 2)))
        w = T.Tensor(rng.standard_normal(2))
        check("matmul", lambda x: T.sum_all(T.mul(T.matmul(x, b), w)), rng.standard_normal((2, 3)))

        w2 = T.Tensor(rng.standard_normal((2, 4)))
        check("softmax", lambda x: T.sum_all(T.mul(T.softmax(x, axis=-1), w2)), rng.standard_normal((2, 4)))

        gain = T.Tensor(rng.standard_normal(4))
        bias = T.Tensor(rng.standard_normal(4))
        w3 = T.Tensor(rng.standard_normal((2, 4)))
        check(
            "layer_norm",
            lambda x: T.sum_all(T.mul(T.layer_norm(x, gain, bias), w3)),
            rng.standard_normal((2, 4)),
        )

        # keep relu inputs away from the kink at 0
        relu_in = rng.standard_normal(6)
        relu_in[np.abs(relu_in) < 0.1] += 0.2
        w4 = T.Tensor(rng.standard_normal(6))
        check("relu", lambda x: T.sum_all(T.mul(T.relu(x), w4)), relu_in)

        targets = rng.integers(0, 5, size=3)
        check("cross_entropy", lambda x: T.cross_entropy(x, targets)[0], rng.standard_normal((3, 5)))

        other = T.Tensor(rng.standard_normal((2, 3)))
        w5 = T.Tensor(rng.standard_normal((2, 3)))
        check("add", lambda x: T.sum_all(T.mul(T.add(x, other), w5)), rng.standard_normal((2, 3)))
        check("mul", lambda x: T.sum_all(T.mul(T.mul(x, other), w5)), rng.standard_normal((2, 3)))

        ids = rng.integers(0, 4, size=3)
        w6 = T.Tensor(rng.standard_normal((3, 2)))
        check("embedding", lambda x: T.sum_all(T.mul(T.embedding(x, ids), w6)), rng.standard_normal((4, 2)))

        seed = int(rng.integers(0, 2**31))
        w7 = T.Tensor(rng.standard_normal(8))
        check(
            "dropout",
            lambda x: T.sum_all(T.mul(T.dropout(x, 0.3, np.random.default_rng(seed)), w7)),
            rng.standard_normal(8),
        )

        check("sum", lambda x: T.sum_all(T.mul(x, x)), rng.standard_normal(5))
        check("mean", lambda x: T.mean_all(T.mul(x, x)), rng.standard_normal(5))
        w8 = T.Tensor(rng.standard_normal((3, 2)))
        check(
            "transpose",
            lambda x: T.sum_all(T.mul(T.transpose(x, (1, 0)), w8)),
            rng.standard_normal((2, 3)),
        )
        w9 = T.Tensor(rng.standard_normal(6))
        check(
            "reshape",
            lambda x: T.sum_all(T.mul(T.reshape(x, (6,)), w9)),
            rng.standard_normal((2, 3)),
        )

    assert max(worst.values()) < 1e-4, worst
    report(1, f"gradcheck: 13 ops x {CASES} cases, worst rel err {max(worst.values()):.2e}", t0, 5.0)


# -- 2. init statistics ------------------------------------------------------


def test_acceptance_02_init_statistics():
    t0 = time.time()
    for layers, d in ((2, 512), (8, 256)):
        cfg = ModelConfig(n_layers=layers, n_heads=4, d_model=d, vocab_size=128,
                          max_seq_len=16, dropout=0.0)
        params = init_parameters(cfg, seed=layers)
        out_pool = np.concatenate(
            [params[f"layers.{i}.attn.wo"].data.ravel() for i in range(layers)]
            + [params[f"layers.{i}.ffn.w2"].data.ravel() for i in range(layers)]
        )
        base_pool = np.concatenate(
            [params[f"layers.{i}.attn.wq"].data.ravel() for i in range(layers)]
            + [params[f"layers.{i}.ffn.w1"].data.ravel() for i in range(layers)]
            + [params["embed.tokens"].data.ravel(), params["lm_head"].data.ravel()]
        )
        assert out_pool.size >= 1_000_000 and base_pool.size >= 1_000_000
        target_out = 0.006 / math.sqrt(2 * layers)
        assert abs(out_pool.std() - target_out) / target_out < 0.01, layers
        assert abs(base_pool.std() - 0.006) / 0.006 < 0.01, layers
        for name, tns in params.tensors.items():
            if ".b" in name or name.endswith("norm.bias"):
                assert (tns.data == 0).all(), name
    report(2, "init std within 1% for L in {2,8}; all biases exactly 0", t0, 5.0)


# -- 3. schedule exactness ---------------------------------------------------


def test_acceptance_03_schedule_exactness():
    t0 = time.time()
    p125 = get_preset("125M")
    s125 = ScheduleConfig(max_lr=p125.max_lr, warmup_tokens=375_000_000,
                          decay_horizon_tokens=300_000_000_000)
    batch = p125.batch_tokens  # 0.5M
    cases_125 = [
        (0, 0, 0.0),
        (375, 187_500_000, 3.0e-4),                    # mid-warmup
        (750, 375_000_000, 6.0e-4),                    # warmup end
        (300_375, 150_187_500_000, 3.3e-4),            # mid-decay
        (600_000, 300_000_000_000, 6.0e-5),            # horizon: the 10% floor
        (800_000, 400_000_000_000, 6.0e-5),            # post-horizon
    ]
    for step, tokens, want in cases_125:
        assert abs(lr_at(s125, step, tokens) - want) < 1e-12, (step, tokens)

    p175 = get_preset("175B")
    s175 = ScheduleConfig(max_lr=p175.max_lr, warmup_steps=2000,
                          tokens_per_step=p175.batch_tokens,
                          decay_horizon_tokens=300_000_000_000)
    cases_175 = [
        (0, 0, 0.0),
        (1000, 2_000_000_000, 0.6e-4),                 # mid-warmup
        (2000, 4_000_000_000, 1.2e-4),                 # warmup end
        (76_000, 152_000_000_000, 6.6e-5),             # mid-decay
        (150_000, 300_000_000_000, 1.2e-5),            # horizon: the 10% floor
        (175_000, 350_000_000_000, 1.2e-5),            # post-horizon
    ]
    for step, tokens, want in cases_175:
        assert abs(lr_at(s175, step, tokens) - want) < 1e-12, (step, tokens)
    report(3, "lr_at matches 12 hand-computed points (125M, 175B) to 1e-12", t0, 5.0)


# -- 4. learning progress ----------------------------------------------------


def test_acceptance_04_learning_progress(tmp_path):
    t0 = time.time()
    corpus = repetition_corpus()
    traces = []
    for sub in ("a", "b"):
        cfg = build_config(tiny_config(500, master=1))
        res = train(cfg, corpus, tmp_path / sub)
        assert res.completed
        traces.append([r.loss for r in res.history])
    assert traces[0] == traces[1]  # bit-identical loss traces
    assert traces[0][-1] < 0.5 * traces[0][0]
    report(
        4,
        f"2L/d64 repetition run: loss {traces[0][0]:.3f} -> {traces[0][-1]:.3f} "
        "in 500 steps, two seeded runs bit-identical",
        t0, 120.0,
    )


# -- 5. stability state machine ----------------------------------------------


def test_acceptance_05_stability_state_machine(tmp_path):
    t0 = time.time()
    noisy = repetition_corpus(noise=0.10)
    cfg = build_config(tiny_config(650, master=1))
    faults = FaultSchedule([FaultEntry(step=421, kind="grad-bomb", factor=1e6)])
    res = train(cfg, noisy, tmp_path / "scenario", faults=faults)
    assert res.completed and res.state.step == 650  # token budget completed
    events = read_events(tmp_path / "scenario" / "logbook.jsonl")
    restarts = [e for e in events if e.kind == "restart"]
    assert len(restarts) == 1  # exactly one restart event
    payload = restarts[0].payload
    assert payload["checkpoint_scale"] >= 1.0
    assert payload["activation_slope"] <= 0.0

    # paired runs: crash-and-resume matches fault-free bit-exactly
    clean_corpus = repetition_corpus()
    plain = train(build_config(tiny_config(200, master=1)), clean_corpus, tmp_path / "plain")
    crashed = train(
        build_config(tiny_config(200, master=1)), clean_corpus, tmp_path / "crashed",
        faults=FaultSchedule([FaultEntry(step=150, kind="crash")]),
    )
    for name, tns in plain.state.params.tensors.items():
        assert (crashed.state.params.tensors[name].data == tns.data).all(), name
    plain_losses = {r.step: r.loss for r in plain.history}
    assert all(plain_losses[r.step] == r.loss for r in crashed.history)
    report(
        5,
        "grad-bomb run: 1 restart (scale >= 1, slope <= 0), budget completed; "
        "crash-and-resume bit-equals fault-free",
        t0, 180.0,
    )


# -- 6. loss-scaler equivalence ----------------------------------------------


def test_acceptance_06_loss_scaler_equivalence(tmp_path):
    t0 = time.time()
    corpus = repetition_corpus()
    scaled = train(
        build_config(tiny_config(100, extra={"scaler": {"initial_scale": 2.0**16}})),
        corpus, tmp_path / "scaled",
    )
    unscaled = train(
        build_config(tiny_config(100, extra={"scaler": {"initial_scale": 1.0}})),
        corpus, tmp_path / "unscaled",
    )
    worst = 0.0
    for name, tns in unscaled.state.params.tensors.items():
        a = scaled.state.params.tensors[name].data
        b = tns.data
        denom = np.maximum(np.abs(b), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    assert worst < 1e-6

    # overflow steps provably skip the update (bit comparison at the skip step)
    shared = {"schedule": {"warmup_tokens": 10 * 32 * 8, "decay_horizon_tokens": 50 * 32 * 8}}
    faulted = train(
        build_config(tiny_config(50, cadence=50, extra=shared)), corpus, tmp_path / "sk",
        faults=FaultSchedule([FaultEntry(step=50, kind="nan-grad")]),
    )
    reference = train(
        build_config(tiny_config(49, cadence=49, extra=shared)), corpus, tmp_path / "ref"
    )
    for name, tns in reference.state.params.tensors.items():
        assert (faulted.state.params.tensors[name].data == tns.data).all(), name
    assert faulted.history[-1].scale == 2.0**15
    report(
        6,
        f"scaled-vs-unscaled 100-step param rel diff {worst:.1e} < 1e-6; "
        "overflow step skipped bit-exactly",
        t0, 60.0,
    )


# -- 7. dedup quality ----------------------------------------------------------


def test_acceptance_07_dedup_quality():
    t0 = time.time()
    cfg = DedupConfig()
    docs, dup_pairs, distant_pairs = planted_dedup_corpus(n=1000, n_dups=50, n_distant=50)
    assert len(docs) == 1000

    # exhaustive exact-Jaccard oracle over the planted pairs
    shingles = {d.id: shingle(d.text, cfg.shingle_width) for d in docs}
    for a, b in dup_pairs:
        assert exact_jaccard(shingles[a], shingles[b]) >= 0.95
    for a, b in distant_pairs:
        assert exact_jaccard(shingles[a], shingles[b]) <= 0.5

    result = dedup_corpus(docs, cfg)
    removed = {r.removed_id for r in result.removals}
    recall = sum(1 for a, b in dup_pairs if a in removed or b in removed) / len(dup_pairs)
    assert recall >= 0.9
    false_hits = sum(1 for a, b in distant_pairs if a in removed or b in removed)
    assert false_hits == 0
    report(7, f"dedup recall {recall:.2f} >= 0.9 on planted dups, 0 distant removals", t0, 30.0)


# -- 8. thread flattening ------------------------------------------------------


def test_acceptance_08_thread_flattening():
    t0 = time.time()
    rng = np.random.default_rng(8)
    agree = 0
    for _ in range(500):
        thread = random_tree(rng, int(rng.integers(1, 40)))
        if extract_longest_chain(thread).text == exhaustive_longest_path(thread):
            agree += 1
    assert agree == 500
    report(8, "longest-chain matches exhaustive DFS on 500/500 random trees", t0, 5.0)


# -- 9. tokenizer ----------------------------------------------------------------


def test_acceptance_09_tokenizer():
    t0 = time.time()
    vocab = bpe_train(
        ["the cat sat on the mat", "a cat and a hat", "the bat and the rat sat"],
        vocab_size=300,
    )
    rng = np.random.default_rng(9)
    for _ in range(10_000):
        raw = bytes(rng.integers(0, 256, size=int(rng.integers(0, 64))))
        assert bpe_decode(vocab, bpe_encode(vocab, raw)) == raw

    corpora = [
        ["low lower lowest", "newer newest", "wider widest wide"],
        ["abababab", "aabbaabb", "bababa"],
        ["the quick brown fox jumps over the lazy dog", "pack my box with five dozen jugs"],
    ]
    for corpus in corpora:
        ours = bpe_train(corpus, vocab_size=290)
        assert merges_as_bytes(ours) == reference_bpe_train(corpus, vocab_size=290)
    report(9, "byte round trip on 10^4 random strings; merge lists equal reference on 3 corpora", t0, 30.0)


# -- 10. metrics -----------------------------------------------------------------


def test_acceptance_10_metrics():
    t0 = time.time()
    rng = np.random.default_rng(10)
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    for _ in range(100):
        hyp = " ".join(rng.choice(words, size=rng.integers(1, 12)))
        ref = " ".join(rng.choice(words, size=rng.integers(1, 12)))
        got = unigram_f1(hyp, ref)
        # direct definition: multiset overlap precision/recall
        from collections import Counter

        h, r = Counter(hyp.split()), Counter(ref.split())
        overlap = sum((h & r).values())
        want = 0.0
        if overlap:
            p_ = overlap / sum(h.values())
            r_ = overlap / sum(r.values())
            want = 2 * p_ * r_ / (p_ + r_)
        assert abs(got - want) < 1e-12

        total_nll = float(rng.uniform(0.1, 50.0))
        count = int(rng.integers(1, 40))
        assert abs(normalized_perplexity(total_nll, count) - math.exp(total_nll / count)) < 1e-12

    icat = icat_score(74.8, 59.9)
    assert round(icat, 1) == 60.0  # published overall row, within rounding
    assert abs(icat - 74.8 * 40.1 / 50.0) < 1e-12
    report(10, "UF1 + normalized ppl match direct definitions on 100 cases; ICAT row reproduced", t0, 10.0)


# -- 11. predivide ----------------------------------------------------------------


def test_acceptance_11_predivide():
    t0 = time.time()
    rng = np.random.default_rng(11)
    for n in (1, 4, 16, 64):
        workers = [
            {"a": rng.standard_normal((4, 5)), "b": rng.standard_normal(7)} for _ in range(n)
        ]
        out = predivide_reduce(workers, PredivideConfig(world_size=n))
        for key in ("a", "b"):
            naive = sum(w[key] for w in workers) / n
            assert np.max(np.abs(out[key] - naive)) < 1e-12, n
            gmax = max(np.abs(w[key]).max() for w in workers)
            partial = np.zeros_like(workers[0][key])
            for w in workers:
                partial = partial + w[key] / np.sqrt(n)
                assert np.abs(partial).max() <= gmax * np.sqrt(n) * (1 + 1e-12), n
    report(11, "predivide equals naive mean for N in {1,4,16,64}; intermediates bounded", t0, 5.0)


# -- 12. resume equivalence --------------------------------------------------------


def test_acceptance_12_resume_equivalence(tmp_path):
    t0 = time.time()
    corpus = repetition_corpus()
    rng = np.random.default_rng(12)
    for trial in range(3):
        steps = 120
        cadence = int(rng.choice([20, 30, 40, 60]))
        crash_at = int(rng.integers(cadence + 1, steps))
        cfg_kw = dict(cadence=cadence, master=trial + 1)
        plain = train(build_config(tiny_config(steps, **cfg_kw)), corpus, tmp_path / f"p{trial}")
        crashed = train(
            build_config(tiny_config(steps, **cfg_kw)), corpus, tmp_path / f"c{trial}",
            faults=FaultSchedule([FaultEntry(step=crash_at, kind="crash")]),
        )
        for name, tns in plain.state.params.tensors.items():
            assert (crashed.state.params.tensors[name].data == tns.data).all(), (trial, name)
        for name in plain.state.opt_state.m:
            assert (crashed.state.opt_state.m[name] == plain.state.opt_state.m[name]).all()
            assert (crashed.state.opt_state.v[name] == plain.state.opt_state.v[name]).all()
        assert crashed.state.scaler == plain.state.scaler
        plain_losses = {r.step: r.loss for r in plain.history}
        assert all(plain_losses[r.step] == r.loss for r in crashed.history)
    report(12, "3 random (cadence, crash) draws: resumed runs bit-identical", t0, 180.0)
