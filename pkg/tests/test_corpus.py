"""Corpus module: vocab building, tokenization, tagging, composition, sampling."""

import collections

import numpy as np
import pytest

from forgetrace.corpus import (
    BOS_ID,
    PAD_ID,
    UNK_ID,
    CorpusStream,
    Vocab,
    build_vocab,
    compose_corpus,
    detokenize,
    load_documents,
    save_documents,
    segment_eval_set,
    tag_entities,
    tokenize,
)

from conftest import make_docs, tiny_dictionary, tiny_vocab


# -- build_vocab ---------------------------------------------------------------


def test_build_vocab_two_words():
    v = build_vocab(["a a b"], max_size=5)
    assert v.size == 5
    assert set(v.tokens[3:]) == {"a", "b"}
    assert v.tokens[3] == "a"  # higher frequency first


def test_build_vocab_truncation_matches_brute_force():
    texts = ["red blue blue green green green x y z w q red red red"]
    # independent frequency count
    counts = collections.Counter(" ".join(texts).split())
    expected = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
    v = build_vocab(texts, max_size=8)
    assert v.tokens[3:] == [w for w, _ in expected]


def test_build_vocab_tie_break_lexicographic():
    v = build_vocab(["pear apple pear apple zzz"], max_size=5)
    assert v.tokens[3:] == ["apple", "pear"]


def test_build_vocab_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab([""], max_size=5)
    with pytest.raises(ValueError, match="max_size"):
        build_vocab(["a"], max_size=3)


# -- tokenize / detokenize -------------------------------------------------------


def test_tokenize_case_normalization():
    v = tiny_vocab(["a"])
    assert tokenize("A a", v).tolist() == [3, 3]


def test_tokenize_oov_to_unk():
    v = tiny_vocab(["a"])
    assert tokenize("xyzzy", v).tolist() == [UNK_ID]


def test_tokenize_fixture_sentence():
    v = tiny_vocab("the cat sat on mat quickly".split())
    ids = tokenize("the cat sat on the mat zorp", v)
    assert len(ids) == 7
    assert list(ids).count(UNK_ID) == 1


def test_tokenize_never_emits_specials():
    v = tiny_vocab(["a"])
    ids = tokenize("<bos> <pad> <unk> a", v)
    assert BOS_ID not in ids and PAD_ID not in ids
    assert ids.tolist() == [UNK_ID, UNK_ID, UNK_ID, 3]


def test_roundtrip_identity_on_in_vocab_text(rng):
    words = ["alpha", "beta", "gamma", "delta"]
    v = tiny_vocab(words)
    for _ in range(25):
        text = " ".join(words[i] for i in rng.integers(0, 4, size=10))
        assert detokenize(tokenize(text, v), v) == text


# -- tag_entities ---------------------------------------------------------------


def test_tag_single_match():
    v = tiny_vocab("the amazon rainforest is".split())
    d = tiny_dictionary({1: ("amazon rainforest", (4, 5), "LOC")})
    doc = make_docs([tokenize("the amazon rainforest is", v)])[0]
    tagged = tag_entities(doc, d, v)
    assert len(tagged.entities) == 1
    span = tagged.entities[0]
    assert (span.token_start, span.token_end, span.entity_type) == (1, 3, "LOC")


def test_tag_longest_match_wins():
    v = tiny_vocab("i love new york city pizza".split())
    d = tiny_dictionary(
        {1: ("new york", (5, 6), "LOC"), 2: ("new york city", (5, 6, 7), "LOC")}
    )
    doc = make_docs([tokenize("i love new york city pizza", v)])[0]
    tagged = tag_entities(doc, d, v)
    assert [(s.entity_id, s.token_start, s.token_end) for s in tagged.entities] == [(2, 2, 5)]


def test_tag_fixture_against_brute_force_enumeration():
    v = tiny_vocab("a b c d e f g".split())
    ids = {w: 3 + i for i, w in enumerate("a b c d e f g".split())}
    d = tiny_dictionary(
        {
            1: ("a b", (ids["a"], ids["b"]), "MISC"),
            2: ("b c", (ids["b"], ids["c"]), "PER"),
            3: ("e", (ids["e"],), "ORG"),
        }
    )
    text = "a b c d e f a b"
    doc = make_docs([tokenize(text, v)])[0]
    tagged = tag_entities(doc, d, v)

    # brute force: enumerate every candidate match, then greedy leftmost-longest
    toks = [int(t) for t in doc.tokens]
    matches = []
    for start in range(len(toks)):
        for eid, (surface, eids, _t) in {
            1: ("a b", (ids["a"], ids["b"]), "M"),
            2: ("b c", (ids["b"], ids["c"]), "P"),
            3: ("e", (ids["e"],), "O"),
        }.items():
            if toks[start : start + len(eids)] == list(eids):
                matches.append((start, len(eids), eid))
    expected = []
    pos = 0
    while pos < len(toks):
        here = [m for m in matches if m[0] == pos]
        if here:
            start, length, eid = max(here, key=lambda m: m[1])
            expected.append((eid, start, start + length))
            pos += length
        else:
            pos += 1
    got = [(s.entity_id, s.token_start, s.token_end) for s in tagged.entities]
    assert got == expected == [(1, 0, 2), (3, 4, 5), (1, 6, 8)]


def test_tag_spans_never_overlap_random(rng):
    words = [f"w{i}" for i in range(12)]
    v = tiny_vocab(words)
    for trial in range(30):
        n_ent = int(rng.integers(1, 5))
        entries = {}
        for e in range(n_ent):
            length = int(rng.integers(1, 4))
            ids = tuple(int(rng.integers(3, 15)) for _ in range(length))
            entries[e] = (f"ent{e}", ids, "MISC")
        d = tiny_dictionary(entries)
        doc = make_docs([rng.integers(3, 15, size=40).astype(np.int32)])[0]
        tagged = tag_entities(doc, d, v)
        last_end = 0
        for s in tagged.entities:
            assert 0 <= s.token_start < s.token_end <= len(doc.tokens)
            assert s.token_start >= last_end
            last_end = s.token_end


def test_tag_vocab_mismatch():
    v = tiny_vocab(["a"])
    d = tiny_dictionary({1: ("ghost", (99,), "MISC")})
    doc = make_docs([tokenize("a a", v)])[0]
    with pytest.raises(ValueError, match="dictionary/vocab mismatch"):
        tag_entities(doc, d, v)


# -- compose_corpus ---------------------------------------------------------------


def _sized_docs(n, length, source, first_id=0):
    return make_docs(
        [np.full(length, 5, dtype=np.int32) for _ in range(n)], source, first_id
    )


def test_compose_sequential_batch_order():
    # docs sized one-per-row so batches mirror the document grouping
    a = _sized_docs(4, 15, "A")
    b = _sized_docs(8, 15, "B", first_id=100)
    stream = compose_corpus(a, b, "sequential_AB", seed=0, batch_size=2, seq_len=16)
    batches = list(stream.iter_row_batches())
    assert len(batches) == 6
    sources = ["".join("A" if p[0] < 100 else "B" for r in batch for p in r.parts) for batch in batches]
    assert sources == ["AA", "AA", "BB", "BB", "BB", "BB"]
    assert stream.boundary_row == 4


def test_compose_mixed_deterministic():
    a = _sized_docs(4, 15, "A")
    b = _sized_docs(4, 15, "B", first_id=10)
    s1 = compose_corpus(a, b, "mixed_shuffled", seed=7, batch_size=2, seq_len=16)
    s2 = compose_corpus(a, b, "mixed_shuffled", seed=7, batch_size=2, seq_len=16)
    assert [d.doc_id for d in s1.documents] == [d.doc_id for d in s2.documents]
    for r1, r2 in zip(s1.rows, s2.rows):
        assert np.array_equal(r1.tokens, r2.tokens)


def test_compose_mixed_seed_changes_order(rng):
    docs = make_docs([rng.integers(3, 9, size=20) for _ in range(100)])
    s7 = compose_corpus(docs, [], "mixed_shuffled", seed=7, batch_size=4, seq_len=24)
    s8 = compose_corpus(docs, [], "mixed_shuffled", seed=8, batch_size=4, seq_len=24)
    o7 = [d.doc_id for d in s7.documents]
    o8 = [d.doc_id for d in s8.documents]
    assert o7 != o8
    assert sorted(o7) == sorted(o8)


def test_compose_mixed_is_bijection(rng):
    for trial in range(5):
        na, nb = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        a = make_docs([rng.integers(3, 9, size=int(rng.integers(5, 30))) for _ in range(na)])
        b = make_docs(
            [rng.integers(3, 9, size=int(rng.integers(5, 30))) for _ in range(nb)],
            source="B",
            first_id=1000,
        )
        stream = compose_corpus(a, b, "mixed_shuffled", seed=trial, batch_size=3, seq_len=16)
        assert sorted(d.doc_id for d in stream.documents) == sorted(
            [d.doc_id for d in a] + [d.doc_id for d in b]
        )


def test_every_token_appears_exactly_once(rng):
    docs = make_docs([rng.integers(3, 9, size=int(rng.integers(3, 40))) for _ in range(17)])
    stream = compose_corpus(docs, [], "mixed_shuffled", seed=3, batch_size=4, seq_len=10)
    joined = np.concatenate([r.tokens for r in stream.rows])
    expected = np.concatenate(
        [np.concatenate(([BOS_ID], d.tokens)) for d in stream.documents]
    )
    assert np.array_equal(joined, expected)
    assert all(len(r.tokens) <= 10 for r in stream.rows)


def test_long_document_splits_into_windows():
    doc = make_docs([np.arange(3, 40, dtype=np.int32)])[0]
    stream = CorpusStream([doc], batch_size=2, seq_len=16, shuffle_seed=0, mode="mixed_shuffled")
    assert stream.n_rows == 3  # 38 tokens incl BOS -> 16+16+6
    assert len(stream.rows[-1].tokens) == 6


def test_row_entity_flag_follows_span_location():
    from forgetrace.corpus import EntitySpan

    doc = make_docs([np.arange(3, 40, dtype=np.int32)])[0]
    doc.entities = [EntitySpan(1, 20, 22, "MISC")]  # lands in the second window
    stream = CorpusStream([doc], batch_size=2, seq_len=16, shuffle_seed=0, mode="mixed_shuffled")
    assert [r.has_entity for r in stream.rows] == [False, True, False]


def test_compose_config_errors():
    docs = _sized_docs(2, 5, "A")
    with pytest.raises(ValueError, match="config error"):
        compose_corpus(docs, [], "mixed_shuffled", seed=0, batch_size=0, seq_len=8)
    with pytest.raises(ValueError, match="config error"):
        compose_corpus(docs, [], "mixed_shuffled", seed=0, batch_size=2, seq_len=0)


# -- segment_eval_set ---------------------------------------------------------------


def test_segment_sampling_counts_and_order(rng):
    docs = make_docs([rng.integers(3, 9, size=5) for _ in range(2000)])
    stream = compose_corpus(docs, [], "mixed_shuffled", seed=1, batch_size=4, seq_len=8)
    sample = segment_eval_set(stream, fraction=1 / 100, n_segments=10)
    assert len(sample) == 20
    order = {d.doc_id: i for i, d in enumerate(stream.documents)}
    positions = [order[d.doc_id] for d in sample]
    assert positions == sorted(positions)
    # two per segment of 200
    seg_of = [p // 200 for p in positions]
    assert collections.Counter(seg_of) == {s: 2 for s in range(10)}


def test_segment_fraction_one_is_identity(rng):
    docs = make_docs([rng.integers(3, 9, size=5) for _ in range(30)])
    stream = compose_corpus(docs, [], "mixed_shuffled", seed=1, batch_size=4, seq_len=8)
    sample = segment_eval_set(stream, fraction=1)
    assert [d.doc_id for d in sample] == [d.doc_id for d in stream.documents]


def test_segment_floor_arithmetic(rng):
    docs = make_docs([rng.integers(3, 9, size=5) for _ in range(750)])
    stream = compose_corpus(docs, [], "mixed_shuffled", seed=1, batch_size=4, seq_len=8)
    sample = segment_eval_set(stream, fraction=1 / 100, n_segments=5)
    assert len(sample) == 5  # floor(150/100) per segment


def test_segment_bad_fraction(rng):
    docs = make_docs([rng.integers(3, 9, size=5) for _ in range(10)])
    stream = compose_corpus(docs, [], "mixed_shuffled", seed=1, batch_size=4, seq_len=8)
    with pytest.raises(ValueError, match="config error"):
        segment_eval_set(stream, fraction=0)


# -- persistence ---------------------------------------------------------------


def test_document_jsonl_roundtrip(tmp_path, rng):
    from forgetrace.corpus import EntitySpan

    docs = make_docs([rng.integers(3, 9, size=12) for _ in range(4)])
    docs[1].entities = [EntitySpan(7, 2, 4, "PER")]
    path = tmp_path / "docs.jsonl"
    save_documents(docs, path)
    loaded = load_documents(path)
    assert len(loaded) == 4
    assert np.array_equal(loaded[2].tokens, docs[2].tokens)
    assert loaded[1].entities == docs[1].entities


def test_vocab_file_roundtrip(tmp_path):
    v = tiny_vocab(["alpha", "beta"])
    v.save(tmp_path / "vocab.txt")
    loaded = Vocab.load(tmp_path / "vocab.txt")
    assert loaded.tokens == v.tokens
    assert (tmp_path / "vocab.txt").read_text().splitlines()[3] == "alpha"
