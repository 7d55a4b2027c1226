"""Byte-level BPE: train, encode, decode.

The base alphabet is all 256 byte values (ids 1..256), with id 0 reserved for
end-of-text, so every byte string tokenizes and round-trips exactly — invalid
UTF-8 included. Training greedily merges the most frequent adjacent pair;
ties go to the lexicographically smallest (byte-string) pair. Pair counts
include overlapping occurrences; replacement is greedy left-to-right within
each document, and pairs never span document boundaries.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

EOT_ID = 0
BASE_VOCAB = 257  # end-of-text + 256 byte symbols


@dataclass
class BPEVocab:
    merges: list[tuple[int, int]] = field(default_factory=list)
    token_bytes: dict[int, bytes] = field(default_factory=dict)
    eot_id: int = EOT_ID

    def __post_init__(self):
        if not self.token_bytes:
            self.token_bytes = _base_table()
            for i, (a, b) in enumerate(self.merges):
                self.token_bytes[BASE_VOCAB + i] = self.token_bytes[a] + self.token_bytes[b]

    @property
    def size(self) -> int:
        return BASE_VOCAB + len(self.merges)

    def merge_ranks(self) -> dict[tuple[int, int], int]:
        return {pair: i for i, pair in enumerate(self.merges)}

    def save(self, path: str | Path) -> None:
        data = {"version": 1, "merges": [list(m) for m in self.merges]}
        Path(path).write_text(json.dumps(data))

    @classmethod
    def load(cls, path: str | Path) -> "BPEVocab":
        data = json.loads(Path(path).read_text())
        return cls(merges=[tuple(m) for m in data["merges"]])


def _base_table() -> dict[int, bytes]:
    table = {EOT_ID: b""}
    for b in range(256):
        table[b + 1] = bytes([b])
    return table


def _to_bytes(text: str | bytes) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def _pair_counts(sequences: list[list[int]]) -> Counter:
    counts: Counter = Counter()
    for seq in sequences:
        for pair in zip(seq, seq[1:]):
            counts[pair] += 1
    return counts


def _merge_sequence(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    """Replace non-overlapping occurrences of ``pair`` left to right."""
    a, b = pair
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_train(corpus: list[str | bytes], vocab_size: int) -> BPEVocab:
    """Learn merges until the table reaches ``vocab_size`` entries (or no pair
    repeats). The table includes the 256 byte symbols and the end-of-text id,
    so ``vocab_size`` must exceed 256."""
    if vocab_size <= 256:
        raise ValueError(f"vocab_size must be > 256, got {vocab_size}")
    sequences = [[b + 1 for b in _to_bytes(doc)] for doc in corpus]
    table = _base_table()
    merges: list[tuple[int, int]] = []
    while BASE_VOCAB + len(merges) < vocab_size:
        counts = _pair_counts(sequences)
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best = min(
            (p for p, c in counts.items() if c == best_count),
            key=lambda p: (table[p[0]], table[p[1]]),
        )
        new_id = BASE_VOCAB + len(merges)
        merges.append(best)
        table[new_id] = table[best[0]] + table[best[1]]
        sequences = [_merge_sequence(s, best, new_id) for s in sequences]
    return BPEVocab(merges=merges)


def bpe_encode(vocab: BPEVocab, text: str | bytes) -> list[int]:
    """Apply merges in learned order (lowest rank first) until none apply."""
    seq = [b + 1 for b in _to_bytes(text)]
    ranks = vocab.merge_ranks()
    while len(seq) > 1:
        best_rank = None
        best_pair = None
        for pair in zip(seq, seq[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
                best_pair = pair
        if best_pair is None:
            break
        seq = _merge_sequence(seq, best_pair, BASE_VOCAB + best_rank)
    return seq


def bpe_decode(vocab: BPEVocab, ids: list[int]) -> bytes:
    out = bytearray()
    for i in ids:
        piece = vocab.token_bytes.get(i)
        if piece is None:
            raise KeyError(f"unknown token id {i} (vocab size {vocab.size})")
        out += piece
    return bytes(out)


def bpe_decode_text(vocab: BPEVocab, ids: list[int]) -> str:
    return bpe_decode(vocab, ids).decode("utf-8", errors="replace")
