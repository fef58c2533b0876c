import numpy as np
import pytest

from recon.corpus import Document, SyntheticSpec, gen_synthetic


@pytest.fixture(scope="session")
def tiny_synthetic():
    """Small planted corpus shared by fast tests (2 topics, 40 docs)."""
    spec = SyntheticSpec(
        num_topics=2,
        docs_per_topic=20,
        mixed_fraction=0.5,
        tokens_per_doc=64,
        vocab_per_topic=24,
        rare_per_topic=24,
        queries_per_topic=6,
        query_tokens=8,
        seed=7,
    )
    return gen_synthetic(spec)


@pytest.fixture
def toy_corpus():
    """Three tiny hand-written documents for BM25 and ingestion tests."""
    return [
        Document("d1", "a b"),
        Document("d2", "a a c"),
        Document("d3", "b c"),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
