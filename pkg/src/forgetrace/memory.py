"""Replay memory: storage policies, random and BM25 retrieval, exit mechanism.

The memory holds training samples (packed rows) keyed by sample_id. An entry
becomes ineligible once it has been replayed max_replays times, at which point
it is dropped from the in-process BM25 index. The index is derived state and
is rebuilt, never persisted.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BM25_K1 = 1.2
BM25_B = 0.75
NO_EXIT = 2**31  # effectively unlimited replays


@dataclass
class MemoryEntry:
    sample_id: int
    tokens: np.ndarray
    has_entity: bool
    last_loss: float
    replay_count: int = 0
    insert_step: int = 0


@dataclass
class StoragePolicy:
    kind: str  # "all" | "entity_only" | "high_loss"
    high_loss_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in ("all", "entity_only", "high_loss"):
            raise ValueError(f"unknown storage policy {self.kind!r}")
        if self.kind == "high_loss" and not (0 < self.high_loss_fraction <= 1):
            raise ValueError("high_loss_fraction must be in (0, 1]")


@dataclass
class RetrievalStrategy:
    kind: str  # "random" | "bm25"

    def __post_init__(self):
        if self.kind not in ("random", "bm25"):
            raise ValueError(f"unknown retrieval strategy {self.kind!r}")


@dataclass
class ExitPolicy:
    max_replays: int = 5

    def __post_init__(self):
        if self.max_replays < 1:
            raise ValueError("max_replays must be >= 1")


class InvertedIndex:
    """Token-id postings with Okapi BM25 scoring (k1=1.2, b=0.75)."""

    def __init__(self, k1: float = BM25_K1, b: float = BM25_B):
        self.k1 = k1
        self.b = b
        self.postings: dict[int, dict[int, int]] = {}
        self.doc_len: dict[int, int] = {}
        self._len_sum = 0
        self._doc_terms: dict[int, list[int]] = {}

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    @property
    def avgdl(self) -> float:
        return self._len_sum / self.n_docs if self.n_docs else 0.0

    def add(self, sample_id: int, tokens: Sequence[int]) -> None:
        if sample_id in self.doc_len:
            raise ValueError(f"sample {sample_id} already indexed")
        self.doc_len[sample_id] = len(tokens)
        self._len_sum += len(tokens)
        counts = Counter(int(t) for t in tokens)
        self._doc_terms[sample_id] = list(counts)
        for tok, tf in counts.items():
            self.postings.setdefault(tok, {})[sample_id] = tf

    def remove(self, sample_id: int) -> None:
        length = self.doc_len.pop(sample_id, None)
        if length is None:
            return
        self._len_sum -= length
        for tok in self._doc_terms.pop(sample_id, ()):
            plist = self.postings.get(tok)
            if plist is not None:
                plist.pop(sample_id, None)
                if not plist:
                    del self.postings[tok]

    def _idf(self, token: int) -> float:
        n_t = len(self.postings.get(token, ()))
        return math.log((self.n_docs - n_t + 0.5) / (n_t + 0.5) + 1.0)

    def score(self, query: Sequence[int], sample_id: int) -> float:
        if sample_id not in self.doc_len:
            raise ValueError(f"sample {sample_id} not live in index")
        length = self.doc_len[sample_id]
        norm = self.k1 * (1.0 - self.b + self.b * length / self.avgdl)
        total = 0.0
        for tok in set(int(t) for t in query):
            tf = self.postings.get(tok, {}).get(sample_id, 0)
            if tf:
                total += self._idf(tok) * tf * (self.k1 + 1.0) / (tf + norm)
        return total

    def scores_for_query(self, query: Sequence[int]) -> dict[int, float]:
        """Accumulated BM25 score for every live doc sharing a query term."""
        out: dict[int, float] = {}
        avgdl = self.avgdl
        for tok in set(int(t) for t in query):
            plist = self.postings.get(tok)
            if not plist:
                continue
            idf = self._idf(tok)
            for sid, tf in plist.items():
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[sid] / avgdl)
                out[sid] = out.get(sid, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        return out


def bm25_score(index: InvertedIndex, query: Sequence[int], sample_id: int) -> float:
    return index.score(query, sample_id)


class ReplayMemory:
    """Single-writer replay memory; scheduler serializes store/retrieve/mark."""

    def __init__(
        self,
        storage: StoragePolicy,
        retrieval: RetrievalStrategy,
        exit_policy: ExitPolicy | None = None,
        capacity: int = 0,
    ):
        self.storage = storage
        self.retrieval = retrieval
        self.exit_policy = exit_policy or ExitPolicy()
        self.capacity = capacity  # 0 = unbounded
        self.entries: dict[int, MemoryEntry] = {}
        self.index = InvertedIndex()
        self._insert_order: list[int] = []

    # -- storage ------------------------------------------------------------

    def store(self, samples: list, losses: Sequence[float], step: int = 0) -> int:
        """Insert batch samples per the storage policy; returns insert count.

        samples need .sample_id, .tokens and .has_entity (corpus rows qualify).
        """
        if len(samples) != len(losses):
            raise ValueError("losses not aligned with batch")
        kind = self.storage.kind
        if kind == "all":
            chosen = list(range(len(samples)))
        elif kind == "entity_only":
            chosen = [i for i, s in enumerate(samples) if s.has_entity]
        else:  # high_loss: per-batch top fraction by loss
            n_keep = math.ceil(self.storage.high_loss_fraction * len(samples))
            order = sorted(
                range(len(samples)), key=lambda i: (-losses[i], samples[i].sample_id)
            )
            chosen = sorted(order[:n_keep])
        inserted = 0
        for i in chosen:
            s = samples[i]
            if s.sample_id in self.entries:
                continue  # duplicate sample_id rejected
            entry = MemoryEntry(
                sample_id=s.sample_id,
                tokens=np.asarray(s.tokens, dtype=np.int32),
                has_entity=bool(s.has_entity),
                last_loss=float(losses[i]),
                replay_count=0,
                insert_step=step,
            )
            self.entries[s.sample_id] = entry
            self._insert_order.append(s.sample_id)
            if self.retrieval.kind == "bm25":
                self.index.add(s.sample_id, entry.tokens)
            inserted += 1
        if self.capacity:
            self._evict_to_capacity()
        return inserted

    def _evict_to_capacity(self) -> None:
        live = [sid for sid in self._insert_order if sid in self.entries]
        while len(live) > self.capacity:
            victim = live.pop(0)
            del self.entries[victim]
            self.index.remove(victim)
            self._insert_order.remove(victim)

    # -- eligibility ----------------------------------------------------------

    def is_eligible(self, sample_id: int) -> bool:
        e = self.entries.get(sample_id)
        return e is not None and e.replay_count < self.exit_policy.max_replays

    def eligible_ids(self) -> list[int]:
        return sorted(sid for sid in self.entries if self.is_eligible(sid))

    # -- retrieval ------------------------------------------------------------

    def retrieve(self, query_samples: list, k: int, seed: int) -> list[MemoryEntry]:
        """Up to k eligible entries: seeded uniform for random retrieval; for
        bm25 each query sample takes its top-scoring entry, deduped, with any
        shortfall backfilled by next-best scores."""
        if k < 1:
            raise ValueError("k must be >= 1")
        eligible = self.eligible_ids()
        if not eligible:
            return []
        if self.retrieval.kind == "random":
            rng = np.random.default_rng(seed)
            n = min(k, len(eligible))
            picked = rng.choice(np.asarray(eligible), size=n, replace=False)
            return [self.entries[int(sid)] for sid in picked]

        # bm25: score each query against the live index
        eligible_set = set(eligible)
        ranked_pool: list[tuple[float, int]] = []
        chosen: list[int] = []
        taken: set[int] = set()
        per_query: list[list[tuple[float, int]]] = []
        for q in query_samples[:k]:
            scores = self.index.scores_for_query(np.asarray(q.tokens))
            cands = sorted(
                ((s, sid) for sid, s in scores.items() if sid in eligible_set),
                key=lambda p: (-p[0], p[1]),
            )
            per_query.append(cands)
            ranked_pool.extend(cands)
        for cands in per_query:
            for score, sid in cands:
                if sid not in taken:
                    chosen.append(sid)
                    taken.add(sid)
                    break
        if len(chosen) < k:
            for score, sid in sorted(ranked_pool, key=lambda p: (-p[0], p[1])):
                if sid not in taken:
                    chosen.append(sid)
                    taken.add(sid)
                    if len(chosen) == k:
                        break
        return [self.entries[sid] for sid in chosen[:k]]

    # -- replay accounting ------------------------------------------------------

    def mark_replayed(self, entries: Iterable[MemoryEntry]) -> None:
        """One replay event: each entry's count moves by exactly 1 regardless of
        how many epochs the event trained; entries at the threshold exit."""
        seen: set[int] = set()
        for e in entries:
            live = self.entries.get(e.sample_id)
            if live is None:
                raise ValueError(f"entry {e.sample_id} is not live")
            if live.replay_count >= self.exit_policy.max_replays:
                raise ValueError(f"entry {e.sample_id} already exited")
            if e.sample_id in seen:
                raise ValueError(f"entry {e.sample_id} marked twice in one event")
            seen.add(e.sample_id)
        for sid in seen:
            live = self.entries[sid]
            live.replay_count += 1
            if live.replay_count >= self.exit_policy.max_replays:
                self.index.remove(sid)

    # -- inspection / persistence ------------------------------------------------

    def replay_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for e in self.entries.values():
            hist[e.replay_count] = hist.get(e.replay_count, 0) + 1
        return dict(sorted(hist.items()))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sid in self._insert_order:
                e = self.entries.get(sid)
                if e is None:
                    continue
                fh.write(
                    json.dumps(
                        {
                            "sample_id": e.sample_id,
                            "tokens": [int(t) for t in e.tokens],
                            "has_entity": e.has_entity,
                            "last_loss": e.last_loss,
                            "replay_count": e.replay_count,
                            "insert_step": e.insert_step,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def restore(
        cls,
        path: str | Path,
        storage: StoragePolicy,
        retrieval: RetrievalStrategy,
        exit_policy: ExitPolicy | None = None,
    ) -> "ReplayMemory":
        mem = cls(storage, retrieval, exit_policy)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            e = MemoryEntry(
                sample_id=int(rec["sample_id"]),
                tokens=np.asarray(rec["tokens"], dtype=np.int32),
                has_entity=bool(rec["has_entity"]),
                last_loss=float(rec["last_loss"]),
                replay_count=int(rec["replay_count"]),
                insert_step=int(rec["insert_step"]),
            )
            mem.entries[e.sample_id] = e
            mem._insert_order.append(e.sample_id)
            if retrieval.kind == "bm25" and mem.is_eligible(e.sample_id):
                mem.index.add(e.sample_id, e.tokens)
        return mem
