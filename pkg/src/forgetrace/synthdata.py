"""Synthetic corpora with planted entities for the desk-scale experiments.

Every mention of a target entity is preceded by its anchor word, a token
unique to that entity, placed `gap` filler tokens before the mention; a short
fixed continuation head follows it. Everything else in an entity document is
fresh random filler, so the anchor -> entity association and the continuation
head are the only memorizable entity content: recall (m_ex / m_in) is
learnable and erodible while perplexity stays dominated by generic text. The
gap varies per entity, which spreads recall difficulty (gap 0 is a pure
bigram; larger gaps need the association carried across intervening tokens).

Corpus B shares the filler grammar but mentions only its own distractor
entities, so target entities receive zero reinforcement during B; distractors
also give the A/B frequency split a populated upper half in B. Pool sizes are
budgeted so the default spec's vocabulary lands at exactly 2048 types
including the three specials.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ENTITY_TYPES
from .rng import substream

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_FUNCTION_WORDS = (
    "the a of in on with and or is was near under over to from by at for "
    "its this that which while after before often rarely always"
).split()


def _pseudo_words(count: int, syllables: int, rng: np.random.Generator) -> list[str]:
    out: set[str] = set()
    while len(out) < count:
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        out.add(word)
    return sorted(out)


@dataclass
class SynthSpec:
    n_a_docs: int = 2000
    n_b_docs: int = 10000
    n_target_entities: int = 50
    n_distractor_entities: int = 50
    target_occurrences: int = 30
    distractor_occurrences: int = 30
    filler_doc_len: int = 96
    continuation_len: int = 32
    fixed_continuation: int = 4  # continuation tokens fixed per entity
    mentions_per_doc: int = 2  # anchor+entity blocks per entity document
    cue_len: int = 12  # filler tokens carrying the anchor before each mention
    anchor_gaps: tuple = (0, 0, 1, 2, 4, 6)  # cycled per entity; larger = harder
    n_nouns: int = 1150
    n_verbs: int = 170
    n_adjectives: int = 400
    seed: int = 0


@dataclass
class SynthCorpus:
    a_records: list[dict]
    b_records: list[dict]
    entity_records: list[dict]

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        corpus_path = out / "raw_corpus.jsonl"
        with open(corpus_path, "w", encoding="utf-8") as fh:
            for rec in self.a_records + self.b_records:
                fh.write(json.dumps(rec) + "\n")
        entities_path = out / "entities.jsonl"
        with open(entities_path, "w", encoding="utf-8") as fh:
            for rec in self.entity_records:
                fh.write(json.dumps(rec) + "\n")
        return corpus_path, entities_path


class _Grammar:
    def __init__(self, spec: "SynthSpec"):
        rng = substream(spec.seed, "synth-grammar")
        # one draw split in two keeps the 2-syllable pools textually disjoint
        two_syll = _pseudo_words(spec.n_nouns + spec.n_verbs, 2, rng)
        self.nouns = two_syll[: spec.n_nouns]
        self.verbs = two_syll[spec.n_nouns :]
        self.adjectives = _pseudo_words(spec.n_adjectives, 3, rng)

    def sentence(self, rng: np.random.Generator) -> list[str]:
        pick = lambda pool: pool[rng.integers(len(pool))]
        forms = (
            ["the", pick(self.adjectives), pick(self.nouns), pick(self.verbs),
             "the", pick(self.nouns), "of", "the", pick(self.nouns)],
            [pick(self.nouns), "and", pick(self.nouns), pick(self.verbs),
             "near", "the", pick(self.adjectives), pick(self.nouns)],
            ["a", pick(self.nouns), "was", pick(self.verbs), "by", "the",
             pick(self.nouns), "after", "the", pick(self.nouns)],
        )
        return list(forms[rng.integers(len(forms))])

    def filler(self, n_tokens: int, rng: np.random.Generator) -> list[str]:
        words: list[str] = []
        while len(words) < n_tokens:
            words.extend(self.sentence(rng))
        return words[:n_tokens]


def generate(spec: SynthSpec) -> SynthCorpus:
    grammar = _Grammar(spec)
    rng = substream(spec.seed, "synth-docs")
    ent_rng = substream(spec.seed, "synth-entities")

    # 4-syllable words cannot collide with 2/3-syllable grammar words; one
    # draw split three ways keeps entity names and anchors mutually distinct
    n_ent = spec.n_target_entities + spec.n_distractor_entities
    special = _pseudo_words(3 * n_ent, 4, ent_rng)
    first, second, anchors = (
        special[:n_ent],
        special[n_ent : 2 * n_ent],
        special[2 * n_ent :],
    )
    names = [f"{a} {b}" for a, b in zip(first, second)]
    targets = names[: spec.n_target_entities]
    distractors = names[spec.n_target_entities :]

    entity_records = [
        {"entity_id": i, "surface": name, "type": ENTITY_TYPES[i % len(ENTITY_TYPES)]}
        for i, name in enumerate(names)
    ]

    gaps: dict[str, int] = {}
    continuations: dict[str, list[str]] = {}
    for i, name in enumerate(names):
        crng = substream(spec.seed, f"synth-cue:{name}")
        gaps[name] = min(spec.anchor_gaps[i % len(spec.anchor_gaps)], spec.cue_len - 1)
        continuations[name] = grammar.filler(spec.fixed_continuation, crng)
    anchor_of = dict(zip(names, anchors))

    def entity_doc(doc_id: int, source: str, name: str) -> dict:
        # every mention: fresh filler carrying the anchor `gap` tokens before
        # the entity, then the fixed continuation head and fresh filler again
        words = grammar.filler(int(rng.integers(34, 44)), rng)
        for _ in range(spec.mentions_per_doc):
            cue = grammar.filler(spec.cue_len, rng)
            cue[spec.cue_len - 1 - gaps[name]] = anchor_of[name]
            words += cue + name.split() + continuations[name]
            words += grammar.filler(
                spec.continuation_len - spec.fixed_continuation + 2, rng
            )
        words += grammar.filler(int(rng.integers(4, 12)), rng)
        return {"id": doc_id, "source": source, "text": " ".join(words)}

    def filler_doc(doc_id: int, source: str) -> dict:
        n = int(rng.integers(spec.filler_doc_len - 16, spec.filler_doc_len + 16))
        return {"id": doc_id, "source": source, "text": " ".join(grammar.filler(n, rng))}

    a_records: list[dict] = []
    doc_id = 0
    for name in targets:
        for _ in range(spec.target_occurrences):
            a_records.append(entity_doc(doc_id, "A", name))
            doc_id += 1
    while len(a_records) < spec.n_a_docs:
        a_records.append(filler_doc(doc_id, "A"))
        doc_id += 1
    order = rng.permutation(len(a_records))
    a_records = [a_records[i] for i in order]

    b_records: list[dict] = []
    for name in distractors:
        for _ in range(spec.distractor_occurrences):
            b_records.append(entity_doc(doc_id, "B", name))
            doc_id += 1
    while len(b_records) < spec.n_b_docs:
        b_records.append(filler_doc(doc_id, "B"))
        doc_id += 1
    order = rng.permutation(len(b_records))
    b_records = [b_records[i] for i in order]

    _ensure_all_words_occur(grammar, names, a_records, b_records)
    return SynthCorpus(a_records, b_records, entity_records)


def _ensure_all_words_occur(
    grammar: _Grammar, names: list[str], a_records: list[dict], b_records: list[dict]
) -> None:
    """Swap never-sampled pool words into filler slots of B documents so the
    built vocabulary size is a pure function of the pool budget."""
    pool = set(_FUNCTION_WORDS) | set(grammar.nouns) | set(grammar.verbs) | set(grammar.adjectives)
    used: set[str] = set()
    for rec in a_records + b_records:
        used.update(rec["text"].split())
    entity_words = {w for n in names for w in n.split()}
    missing = sorted(pool - used)
    slot = 0
    for rec in b_records:
        if not missing:
            break
        words = rec["text"].split()
        if any(w in entity_words for w in words):
            continue  # leave entity documents untouched
        words[slot % len(words)] = missing.pop()
        slot += 7
        rec["text"] = " ".join(words)
