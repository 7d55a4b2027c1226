"""Shared fixtures-in-spirit: synthetic corpora and tiny run configs."""
from __future__ import annotations

import numpy as np


def repetition_corpus(noise: float = 0.0, n_rep: int = 3000, seed: int = 0) -> np.ndarray:
    """Repeating 16-token motifs over a 64-id vocabulary; optional token noise
    keeps the loss floor above zero so activation norms reach equilibrium."""
    rng = np.random.default_rng(seed)
    motifs = [rng.integers(1, 64, size=16) for _ in range(8)]
    toks = np.concatenate([motifs[i % 8] for i in range(n_rep)])
    if noise > 0:
        flip = rng.random(toks.size) < noise
        toks = np.where(flip, rng.integers(1, 64, size=toks.size), toks)
    return toks


def tiny_config(steps: int, *, max_lr: float = 1e-3, cadence: int = 100, master: int = 1,
                dropout: float = 0.0, extra: dict | None = None) -> dict:
    """2-layer d=64 run config sized to ``steps`` updates of 8x32 tokens."""
    warmup_steps_equiv = min(100, max(1, steps // 5))
    raw = {
        "model": {"n_layers": 2, "n_heads": 2, "d_model": 64, "vocab_size": 64,
                  "max_seq_len": 32, "dropout": dropout},
        "schedule": {"max_lr": max_lr, "warmup_tokens": warmup_steps_equiv * 32 * 8},
        "training": {"seq_len": 32, "micro_batch": 8, "token_budget": steps * 32 * 8,
                     "checkpoint_cadence": cadence, "validation_cadence": 50,
                     "dtype": "float64"},
        "seeds": {"master": master},
    }
    if extra:
        for k, v in extra.items():
            raw.setdefault(k, {}).update(v)
    return raw


def planted_dedup_corpus(seed=5, n=1000, n_dups=50, n_distant=50, tokens=400):
    """(docs, dup_pairs, distant_pairs): near-duplicate pairs at exact Jaccard
    >= 0.95 (a mix of verbatim copies and one-token edits), distant pairs at
    <= 0.5 (sharing only a third of their tokens)."""
    from desklm.corpus import Document

    rng = np.random.default_rng(seed)
    docs = []
    dup_pairs = []
    distant_pairs = []

    def add(text):
        docs.append(Document(id=len(docs), source="planted", text=text))
        return docs[-1].id

    def random_text():
        return " ".join(f"t{rng.integers(0, 10**9)}" for _ in range(tokens))

    for _ in range(n - 2 * n_dups - 2 * n_distant):
        add(random_text())
    for i in range(n_dups):
        words = [f"t{rng.integers(0, 10**9)}" for _ in range(tokens)]
        a = add(" ".join(words))
        if i % 3 == 0:
            b = add(" ".join(words))
        else:
            mutated = list(words)
            mutated[-1] = "XCHANGED"
            b = add(" ".join(mutated))
        dup_pairs.append((a, b))
    for _ in range(n_distant):
        words = [f"t{rng.integers(0, 10**9)}" for _ in range(tokens)]
        a = add(" ".join(words))
        other = [f"t{rng.integers(0, 10**9)}" for _ in range(tokens)]
        b = add(" ".join(words[: tokens // 3] + other[tokens // 3 :]))
        distant_pairs.append((a, b))
    return docs, dup_pairs, distant_pairs
