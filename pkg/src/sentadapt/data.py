"""Documents, sentence pairs, triplet construction, synthetic corpora and splitting."""

from __future__ import annotations

import json
import math
import warnings
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import SEP_TOKEN


class DataError(ValueError):
    pass


class SkippedItemWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    abstract: str
    cites: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "cites", tuple(self.cites))
        if self.id in self.cites:
            raise DataError(f"document {self.id!r} cites itself")

    @property
    def text(self) -> str:
        return f"{self.title} {SEP_TOKEN} {self.abstract}"

    def to_json(self) -> dict:
        return {"id": self.id, "title": self.title, "abstract": self.abstract, "cites": list(self.cites)}


@dataclass(frozen=True)
class SentencePair:
    id_a: str
    id_b: str
    text_a: str
    text_b: str

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise DataError(f"sentence pair links {self.id_a!r} to itself")

    def to_json(self) -> dict:
        return {"id_a": self.id_a, "id_b": self.id_b, "text_a": self.text_a, "text_b": self.text_b}


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise DataError(f"triplet texts must be pairwise distinct (provenance={self.provenance})")

    @property
    def anchor_key(self) -> str:
        return str(self.provenance.get("anchor_id", self.anchor))

    def to_json(self) -> dict:
        return {"anchor": self.anchor, "positive": self.positive, "negative": self.negative,
                "provenance": self.provenance}


@dataclass
class TripletDataset:
    domain_label: str
    train: list[Triplet]
    test: list[Triplet]
    split_seed: int = 0


# ---------------------------------------------------------------------------
# JSON Lines I/O
# ---------------------------------------------------------------------------


def _read_jsonl(path, required: Sequence[str]) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in required if k not in record]
            if missing:
                raise DataError(f"{path}:{lineno}: missing field(s) {missing}")
            yield lineno, record


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return path


def validate_corpus(docs: Sequence[Document]) -> None:
    ids = set()
    for doc in docs:
        if doc.id in ids:
            raise DataError(f"duplicate document id {doc.id!r}")
        ids.add(doc.id)
    for doc in docs:
        dangling = [c for c in doc.cites if c not in ids]
        if dangling:
            raise DataError(f"document {doc.id!r} cites unknown id(s) {dangling}")


def read_documents(path) -> list[Document]:
    docs = []
    for lineno, r in _read_jsonl(path, ("id", "title", "abstract", "cites")):
        try:
            docs.append(Document(str(r["id"]), str(r["title"]), str(r["abstract"]), tuple(str(c) for c in r["cites"])))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    validate_corpus(docs)
    return docs


def write_documents(path, docs: Iterable[Document]) -> Path:
    return write_jsonl(path, (d.to_json() for d in docs))


def read_pairs(path) -> list[SentencePair]:
    pairs = []
    for lineno, r in _read_jsonl(path, ("id_a", "id_b", "text_a", "text_b")):
        try:
            pairs.append(SentencePair(str(r["id_a"]), str(r["id_b"]), str(r["text_a"]), str(r["text_b"])))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return pairs


def read_triplets(path) -> list[Triplet]:
    out = []
    for lineno, r in _read_jsonl(path, ("anchor", "positive", "negative")):
        try:
            out.append(Triplet(str(r["anchor"]), str(r["positive"]), str(r["negative"]), dict(r.get("provenance") or {})))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def write_triplets(path, triplets: Iterable[Triplet]) -> Path:
    return write_jsonl(path, (t.to_json() for t in triplets))


def read_texts(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


# ---------------------------------------------------------------------------
# triplet construction
# ---------------------------------------------------------------------------


def valid_citation_negatives(by_id: dict[str, Document], anchor_id: str, positive_id: str) -> list[str]:
    """Papers cited by the positive, not cited by the anchor and not the anchor itself."""
    anchor = by_id[anchor_id]
    excluded = set(anchor.cites) | {anchor_id}
    texts = {anchor.text, by_id[positive_id].text}
    return sorted(n for n in set(by_id[positive_id].cites) - excluded if by_id[n].text not in texts)


def build_citation_triplets(corpus: Sequence[Document], seed: int,
                            negatives_per_pair: int | None = 1) -> list[Triplet]:
    """One triplet per (anchor, cited positive), negative drawn from the positive's citations.

    ``negatives_per_pair=None`` emits every valid negative instead of sampling.
    Anchors are visited in sorted id order so the result only depends on ``seed``.
    """
    if not corpus:
        raise DataError("cannot build triplets from an empty corpus")
    validate_corpus(corpus)
    by_id = {d.id: d for d in corpus}
    rng = np.random.default_rng(seed)
    triplets = []
    for anchor_id in sorted(by_id):
        anchor = by_id[anchor_id]
        for positive_id in sorted(set(anchor.cites)):
            if by_id[positive_id].text == anchor.text:
                continue
            candidates = valid_citation_negatives(by_id, anchor_id, positive_id)
            if not candidates:
                continue
            if negatives_per_pair is None:
                chosen = candidates
            else:
                k = min(negatives_per_pair, len(candidates))
                chosen = [candidates[i] for i in sorted(rng.choice(len(candidates), size=k, replace=False))]
            for negative_id in chosen:
                triplets.append(Triplet(
                    anchor.text, by_id[positive_id].text, by_id[negative_id].text,
                    {"source": "citation", "anchor_id": anchor_id, "positive_id": positive_id,
                     "negative_id": negative_id},
                ))
    return triplets


def build_pair_triplets(pairs: Sequence[SentencePair], all_texts: Sequence[str], seed: int) -> list[Triplet]:
    """Anchor/positive from each similar pair; negative sampled from the remaining texts.

    Texts known to be similar to the anchor (any pair it takes part in) are never
    used as negatives. Pairs without a valid negative are skipped with a
    :class:`SkippedItemWarning`.
    """
    if not pairs:
        raise DataError("no sentence pairs given")
    partners: dict[str, set[str]] = {}
    for p in pairs:
        partners.setdefault(p.id_a, set()).add(p.text_b)
        partners.setdefault(p.id_b, set()).add(p.text_a)
    pool = list(dict.fromkeys(all_texts))
    rng = np.random.default_rng(seed)
    triplets = []
    for index, p in enumerate(pairs):
        if p.text_a == p.text_b:
            warnings.warn(f"pair {index} ({p.id_a}, {p.id_b}) has identical texts; skipped", SkippedItemWarning,
                          stacklevel=2)
            continue
        excluded = {p.text_a, p.text_b} | partners[p.id_a]
        candidates = [t for t in pool if t not in excluded]
        if not candidates:
            warnings.warn(f"pair {index} ({p.id_a}, {p.id_b}) has no valid negative; skipped", SkippedItemWarning,
                          stacklevel=2)
            continue
        negative = candidates[int(rng.integers(len(candidates)))]
        triplets.append(Triplet(p.text_a, p.text_b, negative,
                                {"source": "pair", "anchor_id": p.id_a, "positive_id": p.id_b}))
    return triplets


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_ONSETS = ("b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl", "gr")
_NUCLEI = ("a", "e", "i", "o", "u", "ai", "ou", "ea")


@dataclass(frozen=True)
class CorpusProfile:
    """Generator knobs.

    Each topic owns ``topic_vocab`` words split over ``subtopics`` clusters;
    a word in a document is a subtopic word with probability ``subtopic_rate``,
    another word of its topic with probability ``topic_rate`` and a shared
    word otherwise. Citations stay inside the topic except with probability
    ``cross_topic_rate`` and prefer the citing paper's subtopic with
    probability ``locality``. With ``vocab_seed`` set, the word list and its
    layout (shared words first, then topic after topic, subtopics contiguous)
    come from that seed alone, so corpora sharing it also share word clusters:
    e.g. 16 topics of 15 words line up with 4 topics of 4 subtopics of 15.
    """

    topic_vocab: int = 60
    shared_vocab: int = 120
    subtopics: int = 4
    title_words: int = 6
    abstract_words: int = 30
    subtopic_rate: float = 0.35
    topic_rate: float = 0.25
    cites_per_doc: int = 4
    cross_topic_rate: float = 0.05
    locality: float = 0.7
    vocab_seed: int | None = None

    def __post_init__(self):
        for name in ("topic_vocab", "shared_vocab", "subtopics", "title_words", "abstract_words", "cites_per_doc"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        for name in ("subtopic_rate", "topic_rate", "cross_topic_rate", "locality"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if self.subtopic_rate + self.topic_rate > 1.0:
            raise DataError("subtopic_rate + topic_rate must not exceed 1")
        if self.topic_vocab < self.subtopics:
            raise DataError("topic_vocab must be at least the number of subtopics")


def _make_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syllables = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))]
                    for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def generate_synthetic_corpus(n_topics: int, docs_per_topic: int, profile: CorpusProfile | None = None,
                              seed: int = 0) -> list[Document]:
    """Topic-clustered documents with mostly intra-topic citations. Deterministic under ``seed``."""
    if n_topics < 2:
        raise DataError(f"n_topics must be >= 2, got {n_topics}")
    if docs_per_topic < 3:
        raise DataError(f"docs_per_topic must be >= 3, got {docs_per_topic}")
    profile = profile or CorpusProfile()
    rng = np.random.default_rng(seed)
    n_words = profile.shared_vocab + n_topics * profile.topic_vocab
    words = _make_words(rng if profile.vocab_seed is None else np.random.default_rng(profile.vocab_seed),
                        n_words, set())
    shared = words[:profile.shared_vocab]
    topic_words = [words[profile.shared_vocab + t * profile.topic_vocab:][:profile.topic_vocab]
                   for t in range(n_topics)]
    sub_words = [np.array_split(np.array(words), profile.subtopics) for words in topic_words]

    width = len(str(n_topics * docs_per_topic - 1))
    meta = []  # (doc_id, topic, subtopic)
    for t in range(n_topics):
        for i in range(docs_per_topic):
            meta.append((f"d{len(meta):0{width}d}", t, i % profile.subtopics))

    def sample_words(topic: int, sub: int, n: int) -> str:
        out = []
        for u in rng.random(n):
            if u < profile.subtopic_rate:
                pool = sub_words[topic][sub]
            elif u < profile.subtopic_rate + profile.topic_rate:
                pool = topic_words[topic]
            else:
                pool = shared
            out.append(str(pool[rng.integers(len(pool))]))
        return " ".join(out)

    texts = {doc_id: (sample_words(t, s, profile.title_words), sample_words(t, s, profile.abstract_words))
             for doc_id, t, s in meta}

    by_topic: dict[int, list[int]] = {}
    by_sub: dict[tuple[int, int], list[int]] = {}
    for idx, (_, t, s) in enumerate(meta):
        by_topic.setdefault(t, []).append(idx)
        by_sub.setdefault((t, s), []).append(idx)

    docs = []
    for idx, (doc_id, t, s) in enumerate(meta):
        cites: list[str] = []
        attempts = 0
        target = min(profile.cites_per_doc, len(meta) - 1)
        while len(cites) < target and attempts < 50 * target:
            attempts += 1
            if rng.random() < profile.cross_topic_rate:
                pool = [j for j in range(len(meta)) if meta[j][1] != t]
            elif rng.random() < profile.locality:
                pool = by_sub[(t, s)]
            else:
                pool = by_topic[t]
            j = pool[rng.integers(len(pool))]
            if j != idx and meta[j][0] not in cites:
                cites.append(meta[j][0])
        title, abstract = texts[doc_id]
        docs.append(Document(doc_id, title, abstract, tuple(sorted(cites))))
    return docs


def topic_of(doc_id: str, docs_per_topic: int) -> int:
    """Topic index of a generated document id (ids are assigned topic-major)."""
    return int(doc_id[1:]) // docs_per_topic


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split(triplets: Sequence[Triplet], ratio: float = 0.9, seed: int = 0) -> tuple[list[Triplet], list[Triplet]]:
    """Anchor-level random split; no anchor appears on both sides.

    Anchor groups are shuffled under ``seed`` and assigned to the test side
    whenever that moves its size closer to ``n - floor(ratio * n)``.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"ratio must lie in (0, 1), got {ratio}")
    groups: dict[str, list[Triplet]] = {}
    for t in triplets:
        groups.setdefault(t.anchor_key, []).append(t)
    if len(groups) < 2:
        raise DataError(f"need at least 2 distinct anchors to split, got {len(groups)}")
    n = len(triplets)
    target_test = max(1, n - math.floor(ratio * n))
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    test_keys: set[str] = set()
    size = 0
    for i in order:
        g = len(groups[keys[i]])
        if abs(size + g - target_test) < abs(size - target_test):
            test_keys.add(keys[i])
            size += g
    if not test_keys:
        test_keys.add(keys[order[0]])
    if len(test_keys) == len(keys):
        test_keys.discard(keys[order[-1]])
    train = [t for t in triplets if t.anchor_key not in test_keys]
    test = [t for t in triplets if t.anchor_key in test_keys]
    return train, test


def make_dataset(triplets: Sequence[Triplet], domain_label: str, seed: int, ratio: float = 0.9) -> TripletDataset:
    train, test = split(triplets, ratio, seed)
    return TripletDataset(domain_label, train, test, seed)
