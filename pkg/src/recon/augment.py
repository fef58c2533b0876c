"""Random-crop augmentation: one fixed query span plus n positive spans.

Spans are sampled independently and may overlap; a document that cannot
supply a span under the config is skipped (DocumentTooShort), never padded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Document, TokenSeq
from .errors import ConfigError, DocumentTooShort


@dataclass
class CropConfig:
    """Span sampling parameters; n is the number of positives per document."""

    n: int = 4
    min_ratio: float = 0.1
    max_ratio: float = 0.5
    min_span_tokens: int = 8

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not (0.0 < self.min_ratio <= self.max_ratio <= 1.0):
            raise ConfigError("need 0 < min_ratio <= max_ratio <= 1")
        if self.min_span_tokens < 1:
            raise ConfigError("min_span_tokens must be positive")


@dataclass
class PositiveGroup:
    """One query span plus n positives, all cropped from the same document.

    span_offsets holds (start, end) token offsets, query first.
    """

    doc_id: str
    query: TokenSeq
    positives: list[TokenSeq]
    span_offsets: list[tuple[int, int]] = field(default_factory=list)


def sample_span(doc_tokens: TokenSeq, cfg: CropConfig, rng: np.random.Generator):
    """Crop one contiguous span; returns (span, start, end).

    Length is uniform on [max(min_span_tokens, ceil(min_ratio*len)),
    ceil(max_ratio*len)] and the start uniform over valid positions. Raises
    DocumentTooShort when that interval is empty.
    """
    length = len(doc_tokens)
    if length < cfg.min_span_tokens:
        raise DocumentTooShort(f"{length} tokens < min_span_tokens={cfg.min_span_tokens}")
    lo = max(cfg.min_span_tokens, math.ceil(cfg.min_ratio * length))
    hi = math.ceil(cfg.max_ratio * length)
    if lo > hi:
        raise DocumentTooShort(
            f"no span length satisfies [{lo}, {hi}] for a {length}-token document"
        )
    span_len = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, length - span_len + 1))
    end = start + span_len
    return TokenSeq(doc_tokens.ids[start:end], doc_tokens.vocab_size), start, end


def make_group(
    doc: Document,
    doc_tokens: TokenSeq,
    cfg: CropConfig,
    rng: np.random.Generator,
) -> PositiveGroup:
    """Crop n+1 spans; the first becomes the fixed query, the rest positives."""
    spans = []
    offsets = []
    for _ in range(cfg.n + 1):
        span, start, end = sample_span(doc_tokens, cfg, rng)
        spans.append(span)
        offsets.append((start, end))
    return PositiveGroup(
        doc_id=doc.id, query=spans[0], positives=spans[1:], span_offsets=offsets
    )


def dump_groups_jsonl(path, groups: list[PositiveGroup]) -> None:
    """Debug dump: one group per line with doc id and span offsets."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(
                json.dumps(
                    {"doc_id": g.doc_id, "span_offsets": [list(o) for o in g.span_offsets]}
                )
            )
            fh.write("\n")
