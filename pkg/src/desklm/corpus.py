"""Corpus curation: whitespace normalization, MinHashLSH near-duplicate
removal, and conversational-thread flattening.

Deduplication follows the classic recipe: per-document shingle sets, k
min-hash values under independent seeded hash functions, banded LSH for
candidate generation (equal band => candidate pair), then verification of
candidates against the similarity threshold. Clusters keep their lowest
document id.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, TreeError


@dataclass(frozen=True)
class Document:
    id: int
    source: str
    text: str


@dataclass(frozen=True)
class DedupConfig:
    jaccard_threshold: float = 0.95
    shingle_width: int = 5
    num_hashes: int = 128
    bands: int = 16
    seed: int = 0
    exact_verify: bool = False  # verify candidates with exact Jaccard (test aid)

    def __post_init__(self):
        if not 0.0 < self.jaccard_threshold <= 1.0:
            raise ConfigError("jaccard_threshold must be in (0, 1]")
        if self.shingle_width < 1:
            raise ConfigError("shingle_width must be >= 1")
        if self.num_hashes % self.bands != 0:
            raise ConfigError(
                f"num_hashes {self.num_hashes} must split evenly into {self.bands} bands"
            )

    @property
    def rows_per_band(self) -> int:
        return self.num_hashes // self.bands


# ---------------------------------------------------------------------------
# Whitespace normalization
# ---------------------------------------------------------------------------

_RUNS = re.compile(r"[ \t]+")
_TRAILING = re.compile(r" +(?=\n)")
_NEWLINES = re.compile(r"\n{3,}")


def normalize_whitespace(text: str) -> str:
    """Collapse space/tab runs, strip trailing spaces, cap blank lines at one.

    Idempotent: normalize(normalize(t)) == normalize(t).
    """
    text = _RUNS.sub(" ", text)
    text = _TRAILING.sub("", text)
    text = _NEWLINES.sub("\n\n", text)
    return text.rstrip(" ")


# ---------------------------------------------------------------------------
# MinHash signatures
# ---------------------------------------------------------------------------


def shingle(text: str, width: int) -> frozenset[str]:
    """Whitespace-token w-grams. Texts with fewer than ``width`` tokens yield
    the empty set (such documents bypass dedup and are flagged short)."""
    tokens = text.split()
    if len(tokens) < width:
        return frozenset()
    return frozenset(
        " ".join(tokens[i : i + width]) for i in range(len(tokens) - width + 1)
    )


def exact_jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


class MinHasher:
    """k independent multiply-add hash functions over 64-bit shingle digests.

    Signature component i is the minimum of hash_i over the shingle set, so
    P(sig_i(A) == sig_i(B)) estimates the Jaccard similarity of A and B.
    Deterministic across processes (no salted builtin hash).
    """

    def __init__(self, num_hashes: int = 128, seed: int = 0):
        self.num_hashes = num_hashes
        self.seed = seed
        rng = np.random.default_rng(seed)
        # odd multipliers for a well-mixing multiply-add family mod 2^64
        self._a = (rng.integers(1, 2**63, size=num_hashes, dtype=np.uint64) << np.uint64(1)) | np.uint64(1)
        self._b = rng.integers(0, 2**63, size=num_hashes, dtype=np.uint64)

    @staticmethod
    def _digest(s: str) -> int:
        return int.from_bytes(hashlib.blake2b(s.encode(), digest_size=8).digest(), "little")

    def signature(self, shingles: Iterable[str]) -> np.ndarray:
        base = np.array([self._digest(s) for s in shingles], dtype=np.uint64)
        if base.size == 0:
            raise ValueError("cannot sign an empty shingle set")
        with np.errstate(over="ignore"):
            table = base[:, None] * self._a[None, :] + self._b[None, :]
        return table.min(axis=0)

    @staticmethod
    def agreement(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
        return float(np.mean(sig_a == sig_b))


def minhash(shingles: Iterable[str], hasher: MinHasher) -> np.ndarray:
    return hasher.signature(shingles)


# ---------------------------------------------------------------------------
# LSH index + dedup
# ---------------------------------------------------------------------------


class LSHIndex:
    """Banded index: a signature splits into b bands of r rows; documents
    sharing any full band land in the same bucket and become candidates."""

    def __init__(self, cfg: DedupConfig):
        self.cfg = cfg
        self.buckets: dict[tuple[int, bytes], list[int]] = {}

    def insert(self, doc_id: int, sig: np.ndarray) -> None:
        r = self.cfg.rows_per_band
        for band in range(self.cfg.bands):
            key = (band, sig[band * r : (band + 1) * r].tobytes())
            self.buckets.setdefault(key, []).append(doc_id)

    def candidate_pairs(self) -> list[tuple[int, int]]:
        pairs = set()
        for ids in self.buckets.values():
            if len(ids) < 2:
                continue
            for i, a in enumerate(ids):
                for b in ids[i + 1 :]:
                    pairs.add((a, b) if a < b else (b, a))
        return sorted(pairs)


@dataclass(frozen=True)
class RemovalRecord:
    removed_id: int
    kept_id: int
    estimate: float


@dataclass
class DedupReport:
    kept: list[Document]
    removals: list[RemovalRecord]
    short_ids: list[int] = field(default_factory=list)
    candidates_checked: int = 0

    def to_jsonl(self) -> str:
        return "\n".join(
            json.dumps({"removed_id": r.removed_id, "kept_id": r.kept_id, "estimate": r.estimate})
            for r in self.removals
        )


def dedup_corpus(docs: Sequence[Document], cfg: DedupConfig) -> DedupReport:
    """Remove near-duplicates at Jaccard >= threshold; keep lowest id per cluster."""
    hasher = MinHasher(cfg.num_hashes, cfg.seed)
    shingles: dict[int, frozenset[str]] = {}
    sigs: dict[int, np.ndarray] = {}
    short: list[int] = []
    index = LSHIndex(cfg)
    for doc in docs:
        sh = shingle(doc.text, cfg.shingle_width)
        if not sh:
            short.append(doc.id)  # bypasses dedup, kept
            continue
        shingles[doc.id] = sh
        sig = hasher.signature(sh)
        sigs[doc.id] = sig
        index.insert(doc.id, sig)

    # union-find over verified candidate pairs
    parent: dict[int, int] = {}

    def find(x: int) -> int:
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            lo, hi = (ra, rb) if ra < rb else (rb, ra)
            parent[hi] = lo

    pairs = index.candidate_pairs()
    for a, b in pairs:
        if cfg.exact_verify:
            estimate = exact_jaccard(shingles[a], shingles[b])
        else:
            estimate = MinHasher.agreement(sigs[a], sigs[b])
        if estimate >= cfg.jaccard_threshold:
            union(a, b)

    clusters: dict[int, list[int]] = {}
    for doc_id in sigs:
        clusters.setdefault(find(doc_id), []).append(doc_id)

    removed: dict[int, RemovalRecord] = {}
    for root, members in clusters.items():
        keep = min(members)
        for m in members:
            if m == keep:
                continue
            if cfg.exact_verify:
                est = exact_jaccard(shingles[m], shingles[keep])
            else:
                est = MinHasher.agreement(sigs[m], sigs[keep])
            removed[m] = RemovalRecord(removed_id=m, kept_id=keep, estimate=est)

    kept = [d for d in docs if d.id not in removed]
    removals = sorted(removed.values(), key=lambda r: r.removed_id)
    return DedupReport(kept=kept, removals=removals, short_ids=short, candidates_checked=len(pairs))


# ---------------------------------------------------------------------------
# Conversational thread flattening
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommentNode:
    id: int
    parent_id: int | None  # None marks the root post
    timestamp: float
    text: str


@dataclass
class RedditThread:
    nodes: list[CommentNode]

    def root(self) -> CommentNode:
        roots = [n for n in self.nodes if n.parent_id is None]
        if len(roots) != 1:
            raise TreeError(f"thread must have exactly one root, found {len(roots)}")
        return roots[0]


def extract_longest_chain(thread: RedditThread, source: str = "reddit") -> Document:
    """Longest root-to-leaf path; ties break on earliest leaf timestamp, then
    smallest leaf id. Node texts are concatenated in chronological order."""
    root = thread.root()
    by_id = {n.id: n for n in thread.nodes}
    if len(by_id) != len(thread.nodes):
        raise TreeError("duplicate comment ids")
    children: dict[int, list[CommentNode]] = {}
    for n in thread.nodes:
        if n.parent_id is None:
            continue
        if n.parent_id not in by_id:
            raise TreeError(f"comment {n.id} has unknown parent {n.parent_id}")
        children.setdefault(n.parent_id, []).append(n)

    # iterative DFS; detects cycles by visiting each node at most once
    best: tuple[int, float, int] | None = None  # (-length, leaf_ts, leaf_id)
    best_path: list[CommentNode] | None = None
    stack: list[tuple[CommentNode, list[CommentNode]]] = [(root, [root])]
    visited = {root.id}
    while stack:
        node, path = stack.pop()
        kids = children.get(node.id, [])
        if not kids:
            key = (-len(path), node.timestamp, node.id)
            if best is None or key < best:
                best, best_path = key, path
            continue
        for kid in kids:
            if kid.id in visited:
                raise TreeError(f"cycle detected at comment {kid.id}")
            visited.add(kid.id)
            stack.append((kid, path + [kid]))
    if len(visited) != len(thread.nodes):
        raise TreeError("unreachable comments: parent links do not form one tree")

    assert best_path is not None
    ordered = sorted(enumerate(best_path), key=lambda p: (p[1].timestamp, p[0]))
    text = "\n".join(node.text for _, node in ordered)
    return Document(id=root.id, source=source, text=text)


# ---------------------------------------------------------------------------
# Document IO: line-delimited and length-prefixed records, plus manifests
# ---------------------------------------------------------------------------


def read_documents(path: str | Path, source: str, fmt: str = "lines", start_id: int = 0) -> list[Document]:
    path = Path(path)
    docs: list[Document] = []
    if fmt == "lines":
        with open(path, "r", encoding="utf-8", errors="replace") as f:
            for line in f:
                line = line.rstrip("\n")
                if line:
                    docs.append(Document(id=start_id + len(docs), source=source, text=line))
    elif fmt == "length-prefixed":
        raw = path.read_bytes()
        pos = 0
        while pos < len(raw):
            nl = raw.index(b"\n", pos)
            length = int(raw[pos:nl])
            body = raw[nl + 1 : nl + 1 + length]
            docs.append(Document(id=start_id + len(docs), source=source, text=body.decode("utf-8", errors="replace")))
            pos = nl + 1 + length
            if pos < len(raw) and raw[pos : pos + 1] == b"\n":
                pos += 1
    else:
        raise ConfigError(f"unknown document format {fmt!r} (use 'lines' or 'length-prefixed')")
    return docs


def write_length_prefixed(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "wb") as f:
        for d in docs:
            body = d.text.encode("utf-8")
            f.write(str(len(body)).encode() + b"\n" + body + b"\n")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    source: str
    weight: float = 1.0
    format: str = "lines"


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid manifest JSON: {e.msg}") from None
    if not isinstance(data, list):
        raise ConfigError(f"{path}: manifest must be a JSON array of entries")
    entries = []
    for i, raw in enumerate(data):
        known = {"path", "source", "weight", "format"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"{path}[{i}]: unknown keys {sorted(extra)}")
        if "path" not in raw or "source" not in raw:
            raise ConfigError(f"{path}[{i}]: entries need 'path' and 'source'")
        entries.append(ManifestEntry(**raw))
    return entries


def load_manifest_documents(manifest_path: str | Path) -> list[Document]:
    manifest_path = Path(manifest_path)
    docs: list[Document] = []
    for entry in read_manifest(manifest_path):
        p = Path(entry.path)
        if not p.is_absolute():
            p = manifest_path.parent / p
        docs.extend(read_documents(p, entry.source, fmt=entry.format, start_id=len(docs)))
    return docs
