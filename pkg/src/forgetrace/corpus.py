"""Corpus ingestion: word-level vocab, tokenization, dictionary entity tagging,
A+B composition into a packed training stream, and step-ordered eval sampling.

Tokenization is lowercase whitespace word-level so entity spans stay aligned
with tokens. One vocab is shared across the A and B corpora.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .rng import substream

UNK_ID = 0
BOS_ID = 1
PAD_ID = 2
SPECIAL_TOKENS = ("<unk>", "<bos>", "<pad>")
ENTITY_TYPES = ("MISC", "PER", "LOC", "ORG")


@dataclass
class Vocab:
    """Dense id space [0, V): specials at 0..2, then word types."""

    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:3] != list(SPECIAL_TOKENS):
            raise ValueError("vocab must start with <unk>, <bos>, <pad>")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab surface strings must be unique")
        # word -> id map excludes specials so raw text can never produce BOS/PAD
        self._word2id = {w: i for i, w in enumerate(self.tokens) if i >= 3}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass(frozen=True)
class EntitySpan:
    entity_id: int
    token_start: int
    token_end: int  # exclusive
    entity_type: str


@dataclass
class Document:
    doc_id: int
    source: str  # "A" | "B"
    tokens: np.ndarray  # int32 token ids
    entities: list[EntitySpan] = field(default_factory=list)
    char_text: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class EntityEntry:
    surface: str
    token_ids: tuple[int, ...]
    entity_type: str


class EntityDictionary:
    """entity_id -> (surface form, token-id sequence, type)."""

    def __init__(self, entries: dict[int, EntityEntry]):
        for eid, e in entries.items():
            if not e.surface:
                raise ValueError(f"entity {eid}: empty surface form")
            if e.entity_type not in ENTITY_TYPES:
                raise ValueError(f"entity {eid}: unknown type {e.entity_type!r}")
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, entity_id: int) -> EntityEntry:
        return self.entries[entity_id]

    def ids(self) -> list[int]:
        return sorted(self.entries)


def build_vocab(texts: Iterable[str], max_size: int) -> Vocab:
    """Most frequent (max_size - 3) lowercase word types; ties lexicographic."""
    if max_size < 4:
        raise ValueError("max_size must be >= 4")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(text.lower().split())
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: max_size - 3]]
    return Vocab(list(SPECIAL_TOKENS) + words)


def tokenize(text: str, vocab: Vocab) -> np.ndarray:
    """Lowercase whitespace split; OOV words map to UNK. Never emits BOS/PAD."""
    ids = [vocab._word2id.get(w, UNK_ID) for w in text.lower().split()]
    return np.asarray(ids, dtype=np.int32)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


def tokenize_surface(surface: str, vocab: Vocab) -> tuple[int, ...]:
    return tuple(int(i) for i in tokenize(surface, vocab))


def tag_entities(doc: Document, dictionary: EntityDictionary, vocab: Vocab) -> Document:
    """Left-to-right longest-match entity tagging over token ids.

    Returns a copy of the document with non-overlapping spans filled.
    """
    by_first: dict[int, list[tuple[int, int, tuple[int, ...]]]] = {}
    for eid, entry in dictionary.entries.items():
        if any(t >= vocab.size for t in entry.token_ids):
            raise ValueError("dictionary/vocab mismatch")
        if not entry.token_ids:
            continue
        by_first.setdefault(entry.token_ids[0], []).append(
            (len(entry.token_ids), eid, entry.token_ids)
        )
    for cands in by_first.values():
        # longest first; entity_id breaks exact-length ties deterministically
        cands.sort(key=lambda c: (-c[0], c[1]))

    toks = doc.tokens
    spans: list[EntitySpan] = []
    i = 0
    n = len(toks)
    while i < n:
        matched = False
        for length, eid, ids in by_first.get(int(toks[i]), ()):
            if i + length <= n and tuple(int(t) for t in toks[i : i + length]) == ids:
                spans.append(
                    EntitySpan(eid, i, i + length, dictionary[eid].entity_type)
                )
                i += length
                matched = True
                break
        if not matched:
            i += 1
    return replace(doc, entities=spans)


# ---------------------------------------------------------------------------
# Training stream: documents packed head-to-tail into seq_len rows
# ---------------------------------------------------------------------------


@dataclass
class Row:
    """One packed training sample: a seq_len window of the BOS-joined stream."""

    sample_id: int
    tokens: np.ndarray  # int32, length <= seq_len
    parts: list[tuple[int, int, int]]  # (doc_id, doc_token_lo, doc_token_hi)
    has_entity: bool


class CorpusStream:
    """Deterministic ordered batches over a composed corpus.

    Documents are concatenated in composition order, each prefixed with BOS,
    and the joined stream is chopped into seq_len windows (long documents
    therefore split across rows, short ones pack together). Single-consumer:
    create one stream per concurrent iterator.
    """

    def __init__(
        self,
        documents: list[Document],
        batch_size: int,
        seq_len: int,
        shuffle_seed: int,
        mode: str,
        boundary_doc: int | None = None,
    ):
        if batch_size <= 0:
            raise ValueError("config error: batch_size must be positive")
        if seq_len <= 0:
            raise ValueError("config error: seq_len must be positive")
        self.documents = documents
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.shuffle_seed = shuffle_seed
        self.mode = mode
        self.rows: list[Row] = []
        self.boundary_row: int | None = None
        if boundary_doc is None:
            self._pack(documents)
        else:
            self._pack(documents[:boundary_doc])
            self.boundary_row = len(self.rows)
            self._pack(documents[boundary_doc:])

    def _pack(self, docs: list[Document]) -> None:
        if not docs:
            return
        seq_len = self.seq_len
        stream = np.concatenate(
            [np.concatenate(([BOS_ID], d.tokens)).astype(np.int32) for d in docs]
        )
        # stream position where each doc's BOS sits
        doc_starts = np.cumsum([0] + [len(d) + 1 for d in docs[:-1]])
        n_rows = (len(stream) + seq_len - 1) // seq_len
        first_id = len(self.rows)
        for r in range(n_rows):
            lo, hi = r * seq_len, min((r + 1) * seq_len, len(stream))
            # docs overlapping [lo, hi): first doc whose region ends after lo
            d0 = int(np.searchsorted(doc_starts, lo, side="right")) - 1
            parts: list[tuple[int, int, int]] = []
            has_entity = False
            for d in range(max(d0, 0), len(docs)):
                ds = int(doc_starts[d])
                if ds >= hi:
                    break
                doc = docs[d]
                # token k of the doc sits at stream position ds + 1 + k
                tok_lo = max(lo - ds - 1, 0)
                tok_hi = min(hi - ds - 1, len(doc))
                if tok_hi <= tok_lo:
                    if ds >= lo:  # only the BOS landed in this row
                        parts.append((doc.doc_id, 0, 0))
                    continue
                parts.append((doc.doc_id, tok_lo, tok_hi))
                if not has_entity:
                    has_entity = any(
                        s.token_start < tok_hi and s.token_end > tok_lo
                        for s in doc.entities
                    )
            self.rows.append(
                Row(
                    sample_id=first_id + r,
                    tokens=stream[lo:hi],
                    parts=parts,
                    has_entity=has_entity,
                )
            )

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_batches(self) -> int:
        return sum(1 for _ in self.iter_row_batches())

    def iter_row_batches(self) -> Iterator[list[Row]]:
        """Batches of rows; a sequential A|B boundary is never straddled."""
        cuts = [0]
        if self.boundary_row is not None:
            cuts.append(self.boundary_row)
        cuts.append(len(self.rows))
        for lo, hi in zip(cuts, cuts[1:]):
            for i in range(lo, hi, self.batch_size):
                batch = self.rows[i : min(i + self.batch_size, hi)]
                if batch:
                    yield batch


def compose_corpus(
    a: list[Document],
    b: list[Document],
    mode: str,
    seed: int,
    batch_size: int,
    seq_len: int,
) -> CorpusStream:
    """sequential_AB keeps A-then-B order (boundary tracked); mixed_shuffled is
    a seed-deterministic permutation of A ∪ B."""
    if mode == "sequential_AB":
        docs = list(a) + list(b)
        return CorpusStream(docs, batch_size, seq_len, seed, mode, boundary_doc=len(a))
    if mode == "mixed_shuffled":
        docs = list(a) + list(b)
        rng = substream(seed, "corpus-shuffle")
        order = rng.permutation(len(docs))
        docs = [docs[i] for i in order]
        return CorpusStream(docs, batch_size, seq_len, seed, mode)
    raise ValueError(f"config error: unknown corpus mode {mode!r}")


def segment_eval_set(
    stream: CorpusStream,
    fraction,
    n_segments: int = 100,
    seed: int | None = None,
) -> list[Document]:
    """Uniformly sample floor(fraction * |segment|) documents from each of
    n_segments contiguous step-order segments, reassembled in stream order."""
    if fraction <= 0 or fraction > 1:
        raise ValueError("config error: fraction must be in (0, 1]")
    docs = stream.documents
    if fraction == 1:
        return list(docs)
    rng = substream(stream.shuffle_seed if seed is None else seed, "segment-eval")
    picked: list[Document] = []
    for seg_idx in np.array_split(np.arange(len(docs)), n_segments):
        k = int(len(seg_idx) * fraction)
        if k <= 0 or len(seg_idx) == 0:
            continue
        chosen = rng.choice(seg_idx, size=k, replace=False)
        picked.extend(docs[i] for i in sorted(int(c) for c in chosen))
    return picked


# ---------------------------------------------------------------------------
# JSONL / text file interfaces
# ---------------------------------------------------------------------------


def load_raw_documents(path: str | Path) -> list[dict]:
    """Raw corpus JSONL: one {"id": int, "text": str, "source": "A"|"B"} per line."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "id" not in rec or "text" not in rec:
            raise ValueError(f"{path}:{lineno}: record needs 'id' and 'text'")
        rec.setdefault("source", "A")
        if rec["source"] not in ("A", "B"):
            raise ValueError(f"{path}:{lineno}: source must be 'A' or 'B'")
        records.append(rec)
    return records


def save_documents(docs: list[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            rec = {
                "id": d.doc_id,
                "source": d.source,
                "tokens": [int(t) for t in d.tokens],
                "text": d.char_text,
            }
            if d.entities:
                rec["entities"] = [
                    {
                        "entity_id": s.entity_id,
                        "start": s.token_start,
                        "end": s.token_end,
                        "type": s.entity_type,
                    }
                    for s in d.entities
                ]
            fh.write(json.dumps(rec) + "\n")


def load_documents(path: str | Path) -> list[Document]:
    docs = []
    seen: set[int] = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        doc_id = int(rec["id"])
        if doc_id in seen:
            raise ValueError(f"duplicate doc_id {doc_id}")
        seen.add(doc_id)
        spans = [
            EntitySpan(int(e["entity_id"]), int(e["start"]), int(e["end"]), e["type"])
            for e in rec.get("entities", [])
        ]
        docs.append(
            Document(
                doc_id=doc_id,
                source=rec.get("source", "A"),
                tokens=np.asarray(rec["tokens"], dtype=np.int32),
                entities=spans,
                char_text=rec.get("text", ""),
            )
        )
    return docs


def load_entity_dictionary(path: str | Path, vocab: Vocab) -> EntityDictionary:
    """Entity JSONL: {"entity_id": int, "surface": str, "type": MISC|PER|LOC|ORG}."""
    entries: dict[int, EntityEntry] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        eid = int(rec["entity_id"])
        if eid in entries:
            raise ValueError(f"{path}:{lineno}: duplicate entity_id {eid}")
        entries[eid] = EntityEntry(
            surface=rec["surface"],
            token_ids=tokenize_surface(rec["surface"], vocab),
            entity_type=rec["type"],
        )
    return EntityDictionary(entries)


def save_entity_dictionary_jsonl(
    records: list[dict], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
