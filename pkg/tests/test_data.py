import itertools
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentadapt.data import (
    CorpusProfile,
    DataError,
    Document,
    SentencePair,
    SkippedItemWarning,
    Triplet,
    build_citation_triplets,
    build_pair_triplets,
    generate_synthetic_corpus,
    make_dataset,
    read_documents,
    read_triplets,
    split,
    topic_of,
    write_documents,
    write_jsonl,
    write_triplets,
)


def doc(i, cites=()):
    return Document(i, f"title {i}", f"abstract {i}", tuple(cites))


def ids_of(triplets):
    return {(t.provenance["anchor_id"], t.provenance["positive_id"], t.provenance["negative_id"]) for t in triplets}


def brute_force(corpus):
    cites = {d.id: set(d.cites) for d in corpus}
    return {(a, p, n) for a, p, n in itertools.permutations(cites, 3)
            if p in cites[a] and n in cites[p] and n not in cites[a]}


@st.composite
def corpora(draw):
    n = draw(st.integers(3, 20))
    names = [f"d{i:02d}" for i in range(n)]
    docs = []
    for i, name in enumerate(names):
        others = [x for x in names if x != name]
        docs.append(doc(name, draw(st.lists(st.sampled_from(others), unique=True, max_size=5))))
    return docs


def test_citation_examples():
    assert ids_of(build_citation_triplets([doc("A", ["B"]), doc("B", ["C"]), doc("C")], 0)) == {("A", "B", "C")}
    assert build_citation_triplets([doc("A", ["B"]), doc("B", ["A"])], 0) == []
    chain = [doc("A", ["B"]), doc("B", ["C"]), doc("C", ["D"]), doc("D")]
    assert ids_of(build_citation_triplets(chain, 0)) == {("A", "B", "C"), ("B", "C", "D")}


def test_anchor_text_joins_title_and_abstract():
    t = build_citation_triplets([doc("A", ["B"]), doc("B", ["C"]), doc("C")], 0)[0]
    assert t.anchor == "title A [SEP] abstract A"


@settings(max_examples=150, deadline=None)
@given(corpora())
def test_exhaustive_builder_equals_brute_force(corpus):
    assert ids_of(build_citation_triplets(corpus, 0, negatives_per_pair=None)) == brute_force(corpus)


@settings(max_examples=100, deadline=None)
@given(corpora(), st.integers(0, 1000))
def test_sampled_triplets_satisfy_predicate(corpus, seed):
    got = ids_of(build_citation_triplets(corpus, seed))
    valid = brute_force(corpus)
    assert got <= valid
    # one triplet per (anchor, positive) that has any valid negative
    assert {(a, p) for a, p, _ in got} == {(a, p) for a, p, _ in valid}
    assert len(got) == len({(a, p) for a, p, _ in got})


def test_citation_builder_errors_and_determinism():
    with pytest.raises(DataError):
        build_citation_triplets([], 0)
    with pytest.raises(DataError, match="unknown"):
        build_citation_triplets([doc("A", ["Z"])], 0)
    with pytest.raises(DataError, match="itself"):
        doc("A", ["A"])
    corpus = generate_synthetic_corpus(3, 10, seed=2)
    assert build_citation_triplets(corpus, 5) == build_citation_triplets(corpus, 5)


def test_pair_examples():
    p = [SentencePair("a", "b", "p", "q")]
    with pytest.warns(SkippedItemWarning):
        assert build_pair_triplets(p, ["p", "q"], 0) == []
    (t,) = build_pair_triplets(p, ["p", "q", "r"], 0)
    assert (t.anchor, t.positive, t.negative) == ("p", "q", "r")


def test_pair_negatives_skip_known_partners():
    pairs = [SentencePair("a", "b", "p", "q"), SentencePair("a", "c", "p", "s")]
    for seed in range(20):
        for t in build_pair_triplets(pairs, ["p", "q", "s", "u"], seed):
            assert t.negative == "u"


def test_pair_builder_deterministic_at_scale():
    pairs = [SentencePair(f"a{i}", f"b{i}", f"text a{i}", f"text b{i}") for i in range(100)]
    texts = [f"text {i}" for i in range(1000)]
    one = [t.to_json() for t in build_pair_triplets(pairs, texts, 9)]
    assert one == [t.to_json() for t in build_pair_triplets(pairs, texts, 9)]
    with pytest.raises(DataError):
        build_pair_triplets([], texts, 0)


def test_triplet_texts_distinct():
    with pytest.raises(DataError):
        Triplet("x", "y", "x")


def test_generator_examples():
    small = generate_synthetic_corpus(2, 3, seed=0)
    assert len(small) == 6 and all(d.id not in d.cites for d in small)
    closed = generate_synthetic_corpus(4, 10, CorpusProfile(cross_topic_rate=0.0), seed=1)
    for d in closed:
        assert all(topic_of(c, 10) == topic_of(d.id, 10) for c in d.cites)
    assert build_citation_triplets(generate_synthetic_corpus(4, 50, seed=7), 7)
    with pytest.raises(DataError):
        generate_synthetic_corpus(1, 10)
    with pytest.raises(DataError):
        generate_synthetic_corpus(2, 2)
    with pytest.raises(DataError):
        CorpusProfile(subtopic_rate=0.8, topic_rate=0.3)


def test_generator_is_seeded():
    a = generate_synthetic_corpus(3, 5, seed=1)
    assert a == generate_synthetic_corpus(3, 5, seed=1)
    assert a != generate_synthetic_corpus(3, 5, seed=2)


def test_topics_have_distinct_vocabularies():
    docs = generate_synthetic_corpus(2, 20, CorpusProfile(subtopic_rate=0.5, topic_rate=0.5), seed=3)
    vocab = [set(), set()]
    for d in docs:
        vocab[topic_of(d.id, 20)].update(d.text.replace("[SEP]", "").split())
    assert not vocab[0] & vocab[1]


def test_shared_vocab_seed_aligns_clusters():
    # 8 topics of 15 words line up with 2 topics x 4 subtopics of 15 words
    fine = generate_synthetic_corpus(8, 6, CorpusProfile(vocab_seed=5, topic_vocab=15, subtopics=1,
                                                         subtopic_rate=1.0, topic_rate=0.0), seed=1)
    coarse = generate_synthetic_corpus(2, 8, CorpusProfile(vocab_seed=5, subtopic_rate=1.0, topic_rate=0.0), seed=2)
    fine_words = {}
    for d in fine:
        fine_words.setdefault(topic_of(d.id, 6), set()).update(d.text.replace("[SEP]", "").split())
    for d in coarse:
        words = set(d.text.replace("[SEP]", "").split())
        assert any(words <= w for w in fine_words.values())


def test_split_examples():
    ts = [Triplet(f"a{i}", f"p{i}", f"n{i}") for i in range(10)]
    train, test = split(ts, 0.9, 0)
    assert (len(train), len(test)) == (9, 1)
    assert split(ts, 0.9, 0) == (train, test)
    with pytest.raises(DataError):
        split([Triplet("a", "p", "n"), Triplet("a", "q", "n")], 0.9, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=2, max_size=80), st.integers(0, 99))
def test_split_disjoint_and_near_ratio_for_singleton_groups(anchor_ids, seed):
    ts = [Triplet(f"a{a}", f"p{i}", f"n{i}") for i, a in enumerate(anchor_ids)]
    if len(set(anchor_ids)) < 2:
        return
    train, test = split(ts, 0.9, seed)
    assert not {t.anchor for t in train} & {t.anchor for t in test}
    assert len(train) + len(test) == len(ts) and train and test
    if len(set(anchor_ids)) == len(anchor_ids):
        assert abs(len(train) - 0.9 * len(ts)) <= 1


def test_synthetic_dataset_split_size():
    docs = generate_synthetic_corpus(4, 50, seed=7)
    ds = make_dataset(build_citation_triplets(docs, 7), "synthetic", 7)
    n = len(ds.train) + len(ds.test)
    assert abs(len(ds.train) - 0.9 * n) <= 1


def test_jsonl_round_trips(tmp_path):
    docs = generate_synthetic_corpus(2, 4, seed=0)
    write_documents(tmp_path / "d.jsonl", docs)
    assert read_documents(tmp_path / "d.jsonl") == docs
    ts = build_citation_triplets(docs, 0)
    write_triplets(tmp_path / "t.jsonl", ts)
    back = read_triplets(tmp_path / "t.jsonl")
    assert back == ts and [t.provenance for t in back] == [t.provenance for t in ts]


def test_malformed_lines_report_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"anchor": "a", "positive": "b", "negative": "c"}\n{oops\n', encoding="utf-8")
    with pytest.raises(DataError, match=":2: malformed"):
        read_triplets(path)
    write_jsonl(path, [{"anchor": "a", "positive": "b"}])
    with pytest.raises(DataError, match="missing field"):
        read_triplets(path)
