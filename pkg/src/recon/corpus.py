"""Corpus ingestion, hashing tokenizer, and the synthetic topic corpus.

The synthetic generator plants the failure mode the training method is built
around: "mixed" documents whose prefix and suffix come from two different
topics, so that random crops can yield lexically unrelated query/positive
pairs. Labels record where each mixed document switches topic, which lets
the tests classify every crop pair as same-topic or cross-topic exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IngestError
from .util import fnv1a64, seeded_rng

DEFAULT_VOCAB_SIZE = 65_536

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass
class Document:
    """One corpus entry: unique id plus non-empty UTF-8 text."""

    id: str
    text: str
    meta: dict[str, str] | None = None

    def __post_init__(self):
        if not self.id:
            raise ConfigError("document id must be non-empty")
        if not self.text:
            raise ConfigError(f"document {self.id!r} has empty text")


@dataclass
class TokenSeq:
    """Token ids in [0, vocab_size), stored as an int64 array."""

    ids: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ConfigError("token ids must be one-dimensional")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocab_size):
            raise ConfigError("token id out of range for vocab size")

    def __len__(self) -> int:
        return int(self.ids.size)


def tokenize(text: str, vocab_size: int = DEFAULT_VOCAB_SIZE) -> TokenSeq:
    """Lowercase, split on non-alphanumeric runs, hash each token mod vocab_size.

    Pure function of (text, vocab_size): the hash is FNV-1a 64-bit, so ids are
    identical across platforms and runs. Raises IngestError when no token
    survives splitting.
    """
    if vocab_size < 2:
        raise ConfigError(f"vocab_size must be >= 2, got {vocab_size}")
    surface = _TOKEN_RE.findall(text.lower())
    if not surface:
        raise IngestError("no tokens survive splitting")
    ids = np.fromiter(
        (fnv1a64(tok.encode("utf-8")) % vocab_size for tok in surface),
        dtype=np.int64,
        count=len(surface),
    )
    return TokenSeq(ids, vocab_size)


def ingest_jsonl(path, vocab_size: int = DEFAULT_VOCAB_SIZE) -> list[Document]:
    """Read one JSON object per line with string fields "id" and "text".

    Order is preserved. Malformed lines and duplicate ids raise IngestError
    naming the offending line.
    """
    docs: list[Document] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            if not isinstance(obj, dict):
                raise IngestError("expected a JSON object", line=lineno)
            doc_id = obj.get("id")
            text = obj.get("text")
            if not isinstance(doc_id, str) or not isinstance(text, str):
                raise IngestError('fields "id" and "text" must be strings', line=lineno)
            if doc_id in seen:
                raise IngestError(
                    f"duplicate document id {doc_id!r} (first seen on line {seen[doc_id]})",
                    line=lineno,
                )
            seen[doc_id] = lineno
            try:
                docs.append(Document(id=doc_id, text=text))
            except ConfigError as exc:
                raise IngestError(str(exc), line=lineno) from exc
    return docs


def write_jsonl(path, docs: list[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps({"id": doc.id, "text": doc.text}, sort_keys=True))
            fh.write("\n")


# --------------------------------------------------------------------------
# Synthetic corpus with planted cross-topic documents
# --------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of the planted-topic corpus generator.

    Each topic's vocabulary has a common head plus a rare tail; every
    document concentrates on a handful of rare types, mimicking the
    document-specific terms of real text. Both parts belong to exactly one
    topic, so topic membership of any token is unambiguous.
    """

    num_topics: int = 4
    docs_per_topic: int = 200
    mixed_fraction: float = 0.5
    tokens_per_doc: int = 128
    vocab_per_topic: int = 64
    # Each document uses only a subset of its topic's common head, so plain
    # lexical overlap between a query and a relevant document is partial
    # (the gap embedding training is supposed to close). None means
    # min(16, vocab_per_topic).
    head_words_per_doc: int | None = None
    seed: int = 0
    # Offset for topic naming: lets a second corpus use fresh vocabulary
    # (topics 4..5 instead of 0..1), modeling a new target domain.
    topic_offset: int = 0
    # Rare tail: per-document specific terms drawn from the topic vocabulary.
    rare_per_topic: int = 192
    rare_types_per_doc: int = 3
    rare_fraction: float = 0.15
    # Boilerplate: repetitive template documents built from a small stock
    # list per topic, the way real corpora carry navigation and spam pages.
    boilerplate_fraction: float = 0.15
    boilerplate_words_per_topic: int = 4
    # Evaluation side: held-out single-topic queries over the common head.
    queries_per_topic: int = 16
    query_tokens: int = 16
    # Tokenizer size the word lists are made collision-free under.
    vocab_size: int = DEFAULT_VOCAB_SIZE

    def validate(self) -> None:
        if self.num_topics < 1 or self.docs_per_topic < 1:
            raise ConfigError("num_topics and docs_per_topic must be positive")
        if not (0.0 <= self.mixed_fraction <= 1.0):
            raise ConfigError("mixed_fraction must lie in [0, 1]")
        if self.tokens_per_doc < 2:
            raise ConfigError("tokens_per_doc must be >= 2 so a boundary can exist")
        if self.vocab_per_topic < 1 or self.query_tokens < 1 or self.queries_per_topic < 0:
            raise ConfigError("vocab_per_topic, query_tokens, queries_per_topic invalid")
        if self.head_words_per_doc is None:
            self.head_words_per_doc = min(16, self.vocab_per_topic)
        if not (1 <= self.head_words_per_doc <= self.vocab_per_topic):
            raise ConfigError("head_words_per_doc must lie in [1, vocab_per_topic]")
        if not (0.0 <= self.rare_fraction < 1.0):
            raise ConfigError("rare_fraction must lie in [0, 1)")
        if self.rare_fraction > 0 and (self.rare_per_topic < 1 or self.rare_types_per_doc < 1):
            raise ConfigError("rare tail needs rare_per_topic and rare_types_per_doc >= 1")
        if self.rare_types_per_doc > self.rare_per_topic and self.rare_fraction > 0:
            raise ConfigError("rare_types_per_doc cannot exceed rare_per_topic")
        if not (0.0 <= self.boilerplate_fraction < 1.0):
            raise ConfigError("boilerplate_fraction must lie in [0, 1)")
        if self.boilerplate_fraction > 0 and self.boilerplate_words_per_topic < 1:
            raise ConfigError("boilerplate needs boilerplate_words_per_topic >= 1")
        total = self.num_topics * self.docs_per_topic
        exact = self.mixed_fraction * total
        if abs(exact - round(exact)) > 1e-9:
            raise ConfigError(
                f"mixed_fraction * total_docs = {exact} is not an integer count"
            )
        if self.mixed_fraction + self.boilerplate_fraction > 1.0 + 1e-9:
            raise ConfigError("mixed_fraction + boilerplate_fraction cannot exceed 1")
        if self.mixed_fraction > 0 and self.num_topics < 2:
            raise ConfigError("mixed documents need at least two topics")


@dataclass
class DocLabel:
    """Ground-truth provenance of one synthetic document."""

    kind: str  # "coherent" | "mixed"
    topic_a: int
    topic_b: int
    boundary: int = -1  # token index where topic_b starts; -1 for coherent

    def majority_topic(self, start: int, end: int) -> int:
        """Majority topic of the token span [start, end); prefix wins ties."""
        if self.kind == "coherent":
            return self.topic_a
        in_a = max(0, min(end, self.boundary) - start)
        in_b = (end - start) - in_a
        return self.topic_a if in_a >= in_b else self.topic_b


def _topic_word_lists(spec: SyntheticSpec):
    """Deterministic per-topic word lists whose hashed ids never collide.

    Candidate words are enumerated in a fixed order and kept only if their
    token id (under spec.vocab_size) is globally unused, so topic vocabularies
    are disjoint in id space, not just as strings. Returns (common, rare,
    boilerplate) lists per topic.
    """
    used_ids: set[int] = set()

    def take(prefix: str, count: int) -> list[str]:
        words: list[str] = []
        candidate = 0
        while len(words) < count:
            word = f"{prefix}{candidate}"
            candidate += 1
            tid = fnv1a64(word.encode("utf-8")) % spec.vocab_size
            if tid in used_ids:
                continue
            used_ids.add(tid)
            words.append(word)
        return words

    rare_count = spec.rare_per_topic if spec.rare_fraction > 0 else 0
    boiler_count = spec.boilerplate_words_per_topic if spec.boilerplate_fraction > 0 else 0
    off = spec.topic_offset
    common = [take(f"t{t + off}w", spec.vocab_per_topic) for t in range(spec.num_topics)]
    rare = [take(f"t{t + off}r", rare_count) for t in range(spec.num_topics)]
    boiler = [take(f"t{t + off}b", boiler_count) for t in range(spec.num_topics)]
    return common, rare, boiler


def gen_synthetic(spec: SyntheticSpec):
    """Build (corpus, queries, qrels, labels) with planted mixed documents.

    Coherent documents draw every token from one topic's vocabulary. Mixed
    documents concatenate a prefix from topic A with a suffix from topic B at
    a recorded boundary. Queries are fresh single-topic strings, held out of
    the corpus; qrels mark every coherent same-topic document relevant with
    gain 1 (mixed documents are never relevant). Bit-identical for a fixed
    spec.
    """
    spec.validate()
    common, rare, boiler = _topic_word_lists(spec)
    total = spec.num_topics * spec.docs_per_topic
    num_mixed = round(spec.mixed_fraction * total)
    num_boiler = round(spec.boilerplate_fraction * total)

    rng = seeded_rng(spec.seed, "synthetic")
    slot_order = rng.permutation(total)
    mixed_slots = set(slot_order[:num_mixed].tolist())
    boiler_slots = set(slot_order[num_mixed : num_mixed + num_boiler].tolist())

    def topic_tokens(topic: int, count: int) -> list[str]:
        """Sample count tokens of one topic for one document (or one half).

        Draws come from a per-document subset of the topic's common head,
        plus a handful of per-document rare types.
        """
        out = []
        head = rng.choice(spec.vocab_per_topic, size=spec.head_words_per_doc, replace=False)
        if spec.rare_fraction > 0:
            doc_rares = rng.choice(spec.rare_per_topic, size=spec.rare_types_per_doc, replace=False)
            rare_mask = rng.random(count) < spec.rare_fraction
        else:
            doc_rares = None
            rare_mask = np.zeros(count, dtype=bool)
        head_draw = rng.integers(0, spec.head_words_per_doc, size=count)
        rare_draw = rng.integers(0, max(spec.rare_types_per_doc, 1), size=count)
        for i in range(count):
            if rare_mask[i]:
                out.append(rare[topic][doc_rares[rare_draw[i]]])
            else:
                out.append(common[topic][head[head_draw[i]]])
        return out

    corpus: list[Document] = []
    labels: dict[str, DocLabel] = {}
    off = spec.topic_offset
    for slot in range(total):
        topic = slot % spec.num_topics
        # Lengths vary 2x around tokens_per_doc, like real corpora.
        length = int(rng.integers(round(0.5 * spec.tokens_per_doc),
                                  round(1.5 * spec.tokens_per_doc) + 1))
        if slot in mixed_slots:
            other = int(rng.integers(0, spec.num_topics - 1))
            if other >= topic:
                other += 1
            # Center-biased boundary: both halves are large enough that crops
            # regularly land entirely on one side, making the planted
            # query/positive mismatches unambiguous.
            lo = max(1, round(0.4 * length))
            hi = min(length - 1, round(0.6 * length))
            boundary = int(rng.integers(lo, hi + 1))
            text = " ".join(
                topic_tokens(topic, boundary) + topic_tokens(other, length - boundary)
            )
            doc_id = f"mix-t{topic + off}t{other + off}-{slot:05d}"
            labels[doc_id] = DocLabel("mixed", topic + off, other + off, boundary)
        elif slot in boiler_slots:
            # Repetitive template page: a handful of stock words, repeated.
            draw = rng.integers(0, spec.boilerplate_words_per_topic, size=length)
            text = " ".join(boiler[topic][i] for i in draw)
            doc_id = f"t{topic + off}-d{slot:05d}"
            labels[doc_id] = DocLabel("coherent", topic + off, topic + off)
        else:
            text = " ".join(topic_tokens(topic, length))
            doc_id = f"t{topic + off}-d{slot:05d}"
            labels[doc_id] = DocLabel("coherent", topic + off, topic + off)
        corpus.append(Document(id=doc_id, text=text))

    queries: list[Document] = []
    qrels: dict[str, dict[str, int]] = {}
    relevant_by_topic: dict[int, dict[str, int]] = {}
    for topic in range(spec.num_topics):
        relevant_by_topic[topic] = {
            doc.id: 1
            for doc in corpus
            if labels[doc.id].kind == "coherent" and labels[doc.id].topic_a == topic + off
        }
    for topic in range(spec.num_topics):
        for j in range(spec.queries_per_topic):
            draw = rng.integers(0, spec.vocab_per_topic, size=spec.query_tokens)
            qid = f"q-t{topic + off}-{j:03d}"
            queries.append(Document(id=qid, text=" ".join(common[topic][i] for i in draw)))
            qrels[qid] = dict(relevant_by_topic[topic])

    return corpus, queries, qrels, labels


def write_labels(path, labels: dict[str, DocLabel]) -> None:
    """TSV: doc_id, kind, topicA, topicB, boundary (boundary -1 for coherent)."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id in sorted(labels):
            lab = labels[doc_id]
            fh.write(f"{doc_id}\t{lab.kind}\t{lab.topic_a}\t{lab.topic_b}\t{lab.boundary}\n")


def read_labels(path) -> dict[str, DocLabel]:
    labels: dict[str, DocLabel] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5 or parts[1] not in ("coherent", "mixed"):
                raise IngestError("expected doc_id<TAB>kind<TAB>a<TAB>b<TAB>boundary", line=lineno)
            labels[parts[0]] = DocLabel(parts[1], int(parts[2]), int(parts[3]), int(parts[4]))
    return labels
