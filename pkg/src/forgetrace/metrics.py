"""Forgetting metrics and eval-set construction.

ppl   -- exp of mean next-token NLL, token-weighted across documents
mf    -- fraction of (context, next-token) pairs whose argmax matches
m_in  -- per-token accuracy of a greedy continuation whose prefix ends with
         the entity (32 in / 32 out in production)
m_ex  -- fraction of items whose entity tokens appear contiguously in the
         greedy continuation of a prefix that excludes the entity

Eval items come in inclusive/exclusive twin pairs per qualifying entity
occurrence. Substring checks run on token-id sequences, which under the
word-level tokenizer coincide with surface matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import BOS_ID, ENTITY_TYPES, Document, EntityDictionary
from .model import ModelState, greedy_decode_batch, last_logits_batch, sequence_scores
from .rng import substream

PREFIX_LEN = 32
TARGET_LEN = 32


@dataclass(frozen=True)
class MfContext:
    s: tuple[int, ...]  # incomplete token sequence, |s| >= 1
    y: int  # correct next token id


@dataclass
class EvalItem:
    item_id: str
    doc_id: int
    entity_id: int
    mode: str  # "inclusive" | "exclusive"
    prefix: np.ndarray
    target: np.ndarray
    entity_tokens: tuple[int, ...]
    entity_type: str

    @property
    def pair_id(self) -> str:
        return self.item_id.rsplit(":", 1)[0]


@dataclass
class MetricReport:
    step: int
    tokens_seen: int
    ppl: float
    mf: float
    m_in: float
    m_ex: float
    n_items: int
    per_type: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass
class DifficultyBucket:
    bucket_id: int
    entity_ids: set[int]
    mean_accuracy: float


def is_subsequence(needle: Sequence[int], haystack: Sequence[int]) -> bool:
    """Contiguous token-id subsequence test."""
    n, m = len(needle), len(haystack)
    if n == 0 or n > m:
        return False
    needle = list(needle)
    hay = [int(t) for t in haystack]
    return any(hay[i : i + n] == needle for i in range(m - n + 1))


# ---------------------------------------------------------------------------
# Core metrics
# ---------------------------------------------------------------------------


def _doc_seqs(
    docs: Iterable[Document], prepend_bos: bool, context_len: int
) -> tuple[list[np.ndarray], list[int]]:
    """BOS-prefixed scoring windows; documents longer than the context are
    chunked into context-sized windows that share the document's index."""
    seqs: list[np.ndarray] = []
    owner: list[int] = []
    width = context_len - 1 if prepend_bos else context_len
    for i, d in enumerate(docs):
        if len(d.tokens) < (1 if prepend_bos else 2):
            raise ValueError("document too short to score")
        for lo in range(0, len(d.tokens), width):
            piece = d.tokens[lo : lo + width]
            if prepend_bos:
                piece = np.concatenate(([BOS_ID], piece))
            if len(piece) < 2:
                continue
            seqs.append(piece.astype(np.int32))
            owner.append(i)
    return seqs, owner


def doc_scores(
    state: ModelState, docs: list[Document], prepend_bos: bool = True
) -> list[tuple[float, int, int]]:
    """(sum log p, positions, argmax hits) per document."""
    if not docs:
        raise ValueError("empty document set")
    seqs, owner = _doc_seqs(docs, prepend_bos, state.config.context_len)
    lps, hits = sequence_scores(state, seqs)
    out = [[0.0, 0, 0] for _ in docs]
    for i, lp, h in zip(owner, lps, hits):
        out[i][0] += float(lp.sum())
        out[i][1] += len(lp)
        out[i][2] += int(h.sum())
    return [tuple(row) for row in out]  # type: ignore[return-value]


def _aggregate_ppl(stats: Iterable[tuple[float, int, int]]) -> float:
    total_lp = sum(s[0] for s in stats)
    total_n = sum(s[1] for s in stats)
    if total_n == 0:
        raise ValueError("nothing to score")
    return float(np.exp(-total_lp / total_n))


def _aggregate_mf(stats: Iterable[tuple[float, int, int]]) -> float:
    total_n = sum(s[1] for s in stats)
    total_hit = sum(s[2] for s in stats)
    if total_n == 0:
        raise ValueError("nothing to score")
    return total_hit / total_n


def ppl(state: ModelState, docs: list[Document], prepend_bos: bool = True) -> float:
    """Token-weighted perplexity over all predicted positions of the doc set."""
    return _aggregate_ppl(doc_scores(state, docs, prepend_bos))


def mf(state: ModelState, contexts: Sequence[MfContext]) -> float:
    """Fraction of contexts where the model's top-1 next token is correct."""
    if not contexts:
        raise ValueError("empty context set")
    by_len: dict[int, list[int]] = {}
    for i, c in enumerate(contexts):
        if len(c.s) < 1:
            raise ValueError("context prefix must be non-empty")
        by_len.setdefault(len(c.s), []).append(i)
    correct = 0
    for L, idxs in sorted(by_len.items()):
        for lo in range(0, len(idxs), 64):
            group = idxs[lo : lo + 64]
            toks = np.asarray([contexts[i].s for i in group], dtype=np.int32)
            pred = np.argmax(last_logits_batch(state, toks), axis=-1)
            correct += sum(int(p) == contexts[i].y for p, i in zip(pred, group))
    return correct / len(contexts)


def mf_on_docs(state: ModelState, docs: list[Document], prepend_bos: bool = True) -> float:
    """mf over every (prefix, next-token) context of each document."""
    return _aggregate_mf(doc_scores(state, docs, prepend_bos))


def _decode_items(state: ModelState, items: list[EvalItem]) -> list[np.ndarray]:
    """Greedy continuation per item, batched over equal-shape groups."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, it in enumerate(items):
        groups.setdefault((len(it.prefix), len(it.target)), []).append(i)
    decoded: list[np.ndarray | None] = [None] * len(items)
    for (plen, tlen), idxs in sorted(groups.items()):
        for lo in range(0, len(idxs), 64):
            chunk = idxs[lo : lo + 64]
            prefixes = np.asarray([items[i].prefix for i in chunk], dtype=np.int32)
            outs = greedy_decode_batch(state, prefixes, tlen)
            for row, i in zip(outs, chunk):
                decoded[i] = row
    return decoded  # type: ignore[return-value]


def _require_mode(items: list[EvalItem], mode: str) -> None:
    if not items:
        raise ValueError("no eval items")
    bad = [it.item_id for it in items if it.mode != mode]
    if bad:
        raise ValueError(f"mode mismatch: expected all {mode}, got {bad[:3]}")


def m_in(state: ModelState, items: list[EvalItem]) -> float:
    """Mean per-token positional accuracy of greedy continuations."""
    _require_mode(items, "inclusive")
    decoded = _decode_items(state, items)
    correct = 0
    total = 0
    for it, out in zip(items, decoded):
        tgt = np.asarray(it.target, dtype=np.int32)
        correct += int((out == tgt).sum())
        total += len(tgt)
    return correct / total


def m_ex_scores(state: ModelState, items: list[EvalItem]) -> np.ndarray:
    """Per-item 0/1: does the entity occur contiguously in the continuation?"""
    _require_mode(items, "exclusive")
    decoded = _decode_items(state, items)
    return np.asarray(
        [1.0 if is_subsequence(it.entity_tokens, out) else 0.0 for it, out in zip(items, decoded)]
    )


def m_ex(state: ModelState, items: list[EvalItem]) -> float:
    return float(m_ex_scores(state, items).mean())


# ---------------------------------------------------------------------------
# Eval-set construction
# ---------------------------------------------------------------------------


def entity_counts(docs: list[Document], dictionary: EntityDictionary) -> dict[int, int]:
    counts = {eid: 0 for eid in dictionary.entries}
    for d in docs:
        for span in d.entities:
            if span.entity_id in counts:
                counts[span.entity_id] += 1
    return counts


def select_ab_entities(
    a: list[Document], b: list[Document], dictionary: EntityDictionary
) -> set[int]:
    """Entities in the top half by A-frequency and bottom half by B-frequency.

    Halves split at the median over all dictionary entities; an exact tie with
    the median lands in the higher-frequency bucket.
    """
    ca = entity_counts(a, dictionary)
    cb = entity_counts(b, dictionary)
    ids = sorted(dictionary.entries)
    med_a = float(np.median([ca[e] for e in ids]))
    med_b = float(np.median([cb[e] for e in ids]))
    return {e for e in ids if ca[e] >= med_a and cb[e] < med_b}


def _items_for_span(
    doc: Document, span, dictionary: EntityDictionary
) -> list[EvalItem]:
    ent = dictionary[span.entity_id]
    toks = doc.tokens
    start, end = span.token_start, span.token_end
    if len(ent.token_ids) > PREFIX_LEN:
        return []
    if start < PREFIX_LEN or len(toks) - end < TARGET_LEN:
        return []
    prefix_ex = toks[start - PREFIX_LEN : start]
    if is_subsequence(ent.token_ids, prefix_ex):
        return []  # exclusive prefix must not mention the entity
    base = f"{doc.doc_id}:{start}"
    inc = EvalItem(
        item_id=f"{base}:inc",
        doc_id=doc.doc_id,
        entity_id=span.entity_id,
        mode="inclusive",
        prefix=toks[end - PREFIX_LEN : end].copy(),
        target=toks[end : end + TARGET_LEN].copy(),
        entity_tokens=ent.token_ids,
        entity_type=ent.entity_type,
    )
    exc = EvalItem(
        item_id=f"{base}:exc",
        doc_id=doc.doc_id,
        entity_id=span.entity_id,
        mode="exclusive",
        prefix=prefix_ex.copy(),
        target=toks[start : start + TARGET_LEN].copy(),
        entity_tokens=ent.token_ids,
        entity_type=ent.entity_type,
    )
    return [inc, exc]


def build_entity_evalset(
    a: list[Document], b: list[Document], dictionary: EntityDictionary
) -> list[EvalItem]:
    """Twin inclusive/exclusive items for every qualifying occurrence in A of
    an entity frequent in A but rare in B."""
    selected = select_ab_entities(a, b, dictionary)
    if not selected:
        raise ValueError("empty intersection")
    items: list[EvalItem] = []
    for doc in a:
        for span in doc.entities:
            if span.entity_id in selected:
                items.extend(_items_for_span(doc, span, dictionary))
    items.sort(key=lambda it: (it.doc_id, it.item_id))
    return items


def build_items_from_docs(
    docs: list[Document],
    dictionary: EntityDictionary,
    fraction: float = 1.0,
    seed: int = 0,
) -> list[EvalItem]:
    """Twin items from every qualifying tagged occurrence, optionally keeping a
    seeded uniform fraction of the pairs."""
    if not (0 < fraction <= 1):
        raise ValueError("config error: fraction must be in (0, 1]")
    items: list[EvalItem] = []
    for doc in docs:
        for span in doc.entities:
            items.extend(_items_for_span(doc, span, dictionary))
    items.sort(key=lambda it: (it.doc_id, it.item_id))
    if fraction < 1.0:
        pairs = sorted({it.pair_id for it in items})
        k = max(1, int(len(pairs) * fraction))
        rng = substream(seed, "evalset-subsample")
        keep = set(rng.choice(np.asarray(pairs, dtype=object), size=k, replace=False))
        items = [it for it in items if it.pair_id in keep]
    return items


def filter_memorized(state: ModelState, items: list[EvalItem]) -> list[EvalItem]:
    """Keep twin pairs whose exclusive item scores 1 under the given state."""
    excl = [it for it in items if it.mode == "exclusive"]
    if not excl:
        return []
    scores = m_ex_scores(state, excl)
    kept = {it.pair_id for it, s in zip(excl, scores) if s == 1.0}
    return [it for it in items if it.pair_id in kept]


def entity_accuracy(state: ModelState, items: list[EvalItem]) -> dict[int, float]:
    """Mean exclusive-item score per entity."""
    excl = [it for it in items if it.mode == "exclusive"]
    if not excl:
        raise ValueError("no exclusive items")
    scores = m_ex_scores(state, excl)
    sums: dict[int, list[float]] = {}
    for it, s in zip(excl, scores):
        sums.setdefault(it.entity_id, []).append(float(s))
    return {eid: float(np.mean(v)) for eid, v in sums.items()}


def bucket_by_difficulty(
    per_entity_accuracy: dict[int, float], k: int
) -> list[DifficultyBucket]:
    """k quantile buckets by accuracy, sizes within 1, means non-decreasing."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(per_entity_accuracy):
        raise ValueError("k exceeds entity count")
    ranked = sorted(per_entity_accuracy.items(), key=lambda kv: (kv[1], kv[0]))
    buckets = []
    for i, chunk in enumerate(np.array_split(np.arange(len(ranked)), k)):
        members = [ranked[j] for j in chunk]
        buckets.append(
            DifficultyBucket(
                bucket_id=i,
                entity_ids={eid for eid, _ in members},
                mean_accuracy=float(np.mean([acc for _, acc in members])),
            )
        )
    return buckets


# ---------------------------------------------------------------------------
# Combined reporting
# ---------------------------------------------------------------------------


def per_type_report(
    state: ModelState,
    items: list[EvalItem],
    docs: list[Document],
    contexts: Sequence[MfContext] | None = None,
    step: int = 0,
    tokens_seen: int = 0,
) -> MetricReport:
    """All four metrics overall and restricted per entity type.

    ppl/mf run on the entity-involved documents (ppl_ent / mf_ent); when an
    explicit context set is given it overrides the doc-derived mf overall.
    Per-doc and per-item scores are computed once and re-aggregated per type.
    """
    stats = doc_scores(state, docs)
    inc = [it for it in items if it.mode == "inclusive"]
    exc = [it for it in items if it.mode == "exclusive"]
    inc_dec = _decode_items(state, inc)
    exc_dec = _decode_items(state, exc)

    def agg_m_in(sel: list[int]) -> float:
        c = sum(int((inc_dec[i] == inc[i].target).sum()) for i in sel)
        t = sum(len(inc[i].target) for i in sel)
        return c / t if t else float("nan")

    def agg_m_ex(sel: list[int]) -> float:
        if not sel:
            return float("nan")
        return float(
            np.mean([1.0 if is_subsequence(exc[i].entity_tokens, exc_dec[i]) else 0.0 for i in sel])
        )

    overall_mf = mf(state, contexts) if contexts is not None else _aggregate_mf(stats)

    doc_index = {d.doc_id: i for i, d in enumerate(docs)}
    per_type: dict[str, dict[str, float]] = {}
    for t in ENTITY_TYPES:
        inc_sel = [i for i, it in enumerate(inc) if it.entity_type == t]
        exc_sel = [i for i, it in enumerate(exc) if it.entity_type == t]
        type_docs = sorted(
            {doc_index[it.doc_id] for it in items if it.entity_type == t and it.doc_id in doc_index}
        )
        n_t = len(inc_sel) + len(exc_sel)
        if n_t == 0:
            per_type[t] = {
                "ppl": float("nan"),
                "mf": float("nan"),
                "m_in": float("nan"),
                "m_ex": float("nan"),
                "n_items": 0,
            }
            continue
        sub = [stats[i] for i in type_docs]
        per_type[t] = {
            "ppl": _aggregate_ppl(sub) if sub else float("nan"),
            "mf": _aggregate_mf(sub) if sub else float("nan"),
            "m_in": agg_m_in(inc_sel),
            "m_ex": agg_m_ex(exc_sel),
            "n_items": n_t,
        }

    return MetricReport(
        step=step,
        tokens_seen=tokens_seen,
        ppl=_aggregate_ppl(stats),
        mf=overall_mf,
        m_in=agg_m_in(list(range(len(inc)))),
        m_ex=agg_m_ex(list(range(len(exc)))),
        n_items=len(items),
        per_type=per_type,
    )


# ---------------------------------------------------------------------------
# Persistence: eval items JSONL and metrics CSV
# ---------------------------------------------------------------------------


def save_eval_items(items: list[EvalItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(
                json.dumps(
                    {
                        "item_id": it.item_id,
                        "doc_id": it.doc_id,
                        "entity_id": it.entity_id,
                        "mode": it.mode,
                        "prefix": [int(t) for t in it.prefix],
                        "target": [int(t) for t in it.target],
                        "entity_tokens": list(it.entity_tokens),
                        "entity_type": it.entity_type,
                    }
                )
                + "\n"
            )


def load_eval_items(path: str | Path) -> list[EvalItem]:
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        items.append(
            EvalItem(
                item_id=rec["item_id"],
                doc_id=int(rec["doc_id"]),
                entity_id=int(rec["entity_id"]),
                mode=rec["mode"],
                prefix=np.asarray(rec["prefix"], dtype=np.int32),
                target=np.asarray(rec["target"], dtype=np.int32),
                entity_tokens=tuple(rec["entity_tokens"]),
                entity_type=rec["entity_type"],
            )
        )
    return items


def _fmt(x: float) -> str:
    return "%.10g" % x


def metrics_csv_header() -> str:
    cols = ["step", "tokens_seen", "ppl", "mf", "m_in", "m_ex", "n_items"]
    for t in ENTITY_TYPES:
        cols += [f"ppl_{t}", f"mf_{t}", f"m_in_{t}", f"m_ex_{t}", f"n_items_{t}"]
    return ",".join(cols)


def metrics_csv_row(report: MetricReport) -> str:
    vals = [
        str(report.step),
        str(report.tokens_seen),
        _fmt(report.ppl),
        _fmt(report.mf),
        _fmt(report.m_in),
        _fmt(report.m_ex),
        str(report.n_items),
    ]
    for t in ENTITY_TYPES:
        pt = report.per_type.get(t)
        if pt is None:
            vals += ["nan", "nan", "nan", "nan", "0"]
        else:
            vals += [
                _fmt(pt["ppl"]),
                _fmt(pt["mf"]),
                _fmt(pt["m_in"]),
                _fmt(pt["m_ex"]),
                str(int(pt["n_items"])),
            ]
    return ",".join(vals)


def append_metrics_row(path: str | Path, report: MetricReport) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(metrics_csv_header() + "\n")
        fh.write(metrics_csv_row(report) + "\n")


def append_aborted_row(path: str | Path, step: int) -> None:
    """Marker row flagging a divergence abort; step column carries the step."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(metrics_csv_header() + "\n")
        fh.write(f"aborted,{step}" + ",nan" * 25 + "\n")
