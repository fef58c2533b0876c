"""Exact dense retrieval, ranking metrics, BM25 baseline, significance test.

Everything here is brute force on purpose: corpora are desk scale and the
point is verifiability. Rank ties always break by ascending doc id so runs
are byte-for-byte reproducible.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import Document, tokenize
from .encoder import EncoderParams, encode
from .errors import ConfigError, EvalError, IngestError, ReconError
from .util import worker_count

Qrels = dict[str, dict[str, int]]
RankedRun = dict[str, list[tuple[str, float]]]


@dataclass
class DenseIndex:
    """One encoder embedding per document, rows aligned with doc_ids."""

    doc_ids: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        if len(self.doc_ids) != len(set(self.doc_ids)):
            raise ConfigError("duplicate doc ids in index")
        if self.matrix.shape[0] != len(self.doc_ids):
            raise ConfigError("matrix rows must match doc_ids")


def build_index(params: EncoderParams, corpus: list[Document]) -> DenseIndex:
    """Encode every document with the live encoder.

    Work is chunked over RECON_THREADS workers (results concatenated in
    corpus order, so the index is deterministic regardless of thread count).
    """
    if not corpus:
        raise ConfigError("cannot index an empty corpus")

    def encode_one(doc: Document) -> np.ndarray:
        try:
            seq = tokenize(doc.text, params.vocab_size)
        except IngestError as exc:
            raise ReconError(f"document {doc.id!r} is not tokenizable: {exc}") from exc
        return encode(params, seq)

    workers = min(worker_count(), len(corpus))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(encode_one, corpus))
    else:
        rows = [encode_one(doc) for doc in corpus]
    return DenseIndex([d.id for d in corpus], np.stack(rows))


def search(index: DenseIndex, query_embedding: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by dot product; ties break by ascending doc id.

    k larger than the corpus simply returns everything.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    scores = index.matrix @ np.asarray(query_embedding, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], index.doc_ids[i]))
    top = order[: min(k, len(order))]
    return [(index.doc_ids[i], float(scores[i])) for i in top]


def run_queries(
    params: EncoderParams, index: DenseIndex, queries: list[Document], k: int
) -> RankedRun:
    run: RankedRun = {}
    for q in queries:
        emb = encode(params, tokenize(q.text, params.vocab_size))
        run[q.id] = search(index, emb, k)
    return run


# --------------------------------------------------------------------------
# Ranking metrics
# --------------------------------------------------------------------------


def _gains_for(run_query: str, qrels: Qrels) -> dict[str, int]:
    if run_query not in qrels:
        raise EvalError(f"query {run_query!r} missing from qrels")
    return qrels[run_query]


def ndcg_at_k(run: RankedRun, qrels: Qrels, k: int) -> tuple[dict[str, float], float]:
    """NDCG with gain 2^g - 1 and log2(rank + 1) discount, per query and mean."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    per_query: dict[str, float] = {}
    for qid in sorted(run):
        gains = _gains_for(qid, qrels)
        dcg = 0.0
        for rank, (doc_id, _score) in enumerate(run[qid][:k], start=1):
            g = gains.get(doc_id, 0)
            if g > 0:
                dcg += (2.0**g - 1.0) / math.log2(rank + 1)
        ideal = sorted((g for g in gains.values() if g > 0), reverse=True)[:k]
        idcg = sum((2.0**g - 1.0) / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
        if idcg == 0.0:
            raise EvalError(f"query {qid!r} has no relevant documents in qrels")
        per_query[qid] = dcg / idcg
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return per_query, mean


def recall_at_k(run: RankedRun, qrels: Qrels, k: int) -> tuple[dict[str, float], float]:
    """Fraction of positive-gain documents retrieved in the top k."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    per_query: dict[str, float] = {}
    for qid in sorted(run):
        gains = _gains_for(qid, qrels)
        relevant = {doc for doc, g in gains.items() if g > 0}
        if not relevant:
            raise EvalError(f"query {qid!r} has no relevant documents in qrels")
        got = {doc for doc, _ in run[qid][:k]} & relevant
        per_query[qid] = len(got) / len(relevant)
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return per_query, mean


METRICS = {"ndcg": ndcg_at_k, "recall": recall_at_k}


def parse_metric(name: str) -> tuple[str, int]:
    """Parse "ndcg@10" / "recall@100" into (kind, k)."""
    try:
        kind, k_str = name.lower().split("@")
        k = int(k_str)
    except ValueError:
        raise ConfigError(f"metric must look like ndcg@10 or recall@100, got {name!r}")
    if kind not in METRICS or k < 1:
        raise ConfigError(f"unknown metric {name!r}")
    return kind, k


def evaluate_metric(run: RankedRun, qrels: Qrels, name: str) -> tuple[dict[str, float], float]:
    kind, k = parse_metric(name)
    return METRICS[kind](run, qrels, k)


# --------------------------------------------------------------------------
# BM25
# --------------------------------------------------------------------------


@dataclass
class Bm25Stats:
    """Corpus statistics for Okapi-style scoring with +1-smoothed idf."""

    doc_freq: dict[str, int]
    doc_terms: dict[str, Counter]
    doc_len: dict[str, int]
    avg_len: float
    N: int
    k1: float = 1.2
    b: float = 0.75


def _bm25_terms(text: str) -> list[str]:
    # Same splitting rule as the hashing tokenizer, kept on surface forms.
    return re.findall(r"[^\W_]+", text.lower(), re.UNICODE)


def build_bm25(corpus: list[Document], k1: float = 1.2, b: float = 0.75) -> Bm25Stats:
    if not corpus:
        raise ConfigError("cannot build BM25 stats over an empty corpus")
    doc_freq: Counter = Counter()
    doc_terms: dict[str, Counter] = {}
    doc_len: dict[str, int] = {}
    for doc in corpus:
        terms = _bm25_terms(doc.text)
        counts = Counter(terms)
        doc_terms[doc.id] = counts
        doc_len[doc.id] = len(terms)
        doc_freq.update(counts.keys())
    avg_len = sum(doc_len.values()) / len(corpus)
    return Bm25Stats(dict(doc_freq), doc_terms, doc_len, avg_len, len(corpus), k1, b)


def bm25_idf(term: str, stats: Bm25Stats) -> float:
    """ln(1 + (N - df + 0.5)/(df + 0.5)); non-negative for any df in [0, N]."""
    df = stats.doc_freq.get(term, 0)
    return math.log(1.0 + (stats.N - df + 0.5) / (df + 0.5))


def bm25_score(query_terms: list[str], doc_id: str, stats: Bm25Stats) -> float:
    if doc_id not in stats.doc_terms:
        raise EvalError(f"unknown doc id {doc_id!r}")
    counts = stats.doc_terms[doc_id]
    length = stats.doc_len[doc_id]
    norm = stats.k1 * (1.0 - stats.b + stats.b * length / stats.avg_len)
    score = 0.0
    for term in query_terms:
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        score += bm25_idf(term, stats) * tf * (stats.k1 + 1.0) / (tf + norm)
    return score


def bm25_rank(query_text: str, stats: Bm25Stats, k: int) -> list[tuple[str, float]]:
    terms = _bm25_terms(query_text)
    scored = [(doc_id, bm25_score(terms, doc_id, stats)) for doc_id in stats.doc_terms]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[: min(k, len(scored))]


def mine_bm25_negatives(
    query_text: str, gold_doc_id: str, stats: Bm25Stats, count: int
) -> list[str]:
    """Top `count` BM25 documents for the query, never including the gold one."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    ranked = bm25_rank(query_text, stats, k=stats.N)
    return [doc_id for doc_id, _ in ranked if doc_id != gold_doc_id][:count]


# --------------------------------------------------------------------------
# Paired t-test
# --------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the incomplete beta."""
    if df < 1:
        raise ConfigError("degrees of freedom must be >= 1")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return _betainc(df / 2.0, 0.5, x)


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t, p).

    Sample standard deviation (n-1 denominator). All-zero differences give
    the degenerate (t=0, p=1); a zero-variance nonzero difference gives
    (+/-inf, 0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("paired samples must be equal-length vectors")
    n = a.size
    if n < 2:
        raise ConfigError("need at least two paired observations")
    d = a - b
    if np.all(d == 0.0):
        return 0.0, 1.0
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), t_sf_two_sided(float(t), n - 1)


# --------------------------------------------------------------------------
# File formats: TREC runs, qrels, JSON reports
# --------------------------------------------------------------------------


def write_trec_run(path, run: RankedRun, tag: str = "recon") -> None:
    """TREC format: qid Q0 docid rank score tag."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (doc_id, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score:.10g} {tag}\n")


def read_trec_run(path) -> RankedRun:
    """Read a TREC run; rankings are re-sorted under the deterministic tie rule."""
    raw: dict[str, list[tuple[str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise IngestError("expected 6 whitespace-separated fields", line=lineno)
            qid, _q0, doc_id, _rank, score, _tag = parts
            try:
                value = float(score)
            except ValueError:
                raise IngestError(f"bad score {score!r}", line=lineno)
            raw.setdefault(qid, []).append((doc_id, value))
    run: RankedRun = {}
    for qid, pairs in raw.items():
        seen = {doc for doc, _ in pairs}
        if len(seen) != len(pairs):
            raise IngestError(f"duplicate doc id for query {qid!r}")
        run[qid] = sorted(pairs, key=lambda p: (-p[1], p[0]))
    return run


def write_qrels(path, qrels: Qrels) -> None:
    """TSV: qid 0 docid gain."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                fh.write(f"{qid}\t0\t{doc_id}\t{qrels[qid][doc_id]}\n")


def read_qrels(path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise IngestError("expected qid 0 docid gain", line=lineno)
            qid, _zero, doc_id, gain = parts
            try:
                g = int(gain)
            except ValueError:
                raise IngestError(f"bad gain {gain!r}", line=lineno)
            if g < 0:
                raise IngestError("gains must be non-negative", line=lineno)
            qrels.setdefault(qid, {})[doc_id] = g
    return qrels


def metrics_report(
    run: RankedRun, qrels: Qrels, metric_names: list[str]
) -> dict:
    report: dict = {"metrics": {}}
    for name in metric_names:
        per_query, mean = evaluate_metric(run, qrels, name)
        report["metrics"][name] = {"mean": mean, "per_query": per_query}
    return report


def compare_report(
    run_a: RankedRun, run_b: RankedRun, qrels: Qrels, metric_name: str
) -> dict:
    """Mean metric of both runs plus a paired t-test over per-query values."""
    if sorted(run_a) != sorted(run_b):
        raise EvalError("compared runs must cover the same queries")
    per_a, mean_a = evaluate_metric(run_a, qrels, metric_name)
    per_b, mean_b = evaluate_metric(run_b, qrels, metric_name)
    qids = sorted(per_a)
    t, p = paired_t_test([per_a[q] for q in qids], [per_b[q] for q in qids])
    return {
        "metric": metric_name,
        "mean_a": mean_a,
        "mean_b": mean_b,
        "t": t,
        "p": p,
        "significant_at_0.05": bool(p < 0.05),
        "num_queries": len(qids),
    }


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
