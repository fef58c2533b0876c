"""Relevance-weighted contrastive pre-training for tiny dense retrievers.

The package trains a bag-of-tokens bi-encoder with random-crop positives,
optionally weighting each positive pair's InfoNCE term by the model's own
similarity estimate, and ships the evaluation stack needed to measure the
effect: exact dense retrieval, NDCG/Recall, a BM25 baseline, paired t-tests,
and a synthetic corpus with planted cross-topic documents.
"""

from .augment import CropConfig, PositiveGroup, make_group, sample_span
from .corpus import (
    Document,
    SyntheticSpec,
    TokenSeq,
    gen_synthetic,
    ingest_jsonl,
    tokenize,
)
from .encoder import (
    Checkpoint,
    EncoderParams,
    backward,
    batch_loss,
    check_gradients,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
    similarity,
)
from .loss import (
    LossConfig,
    ScoredGroup,
    batch_relevance_loss,
    info_nce,
    relevance_loss,
    relevance_weights,
    uniform_loss,
)
from .negatives import MomentumState, NegativeQueue, momentum_update, negatives_for
from .retrieval import (
    Bm25Stats,
    DenseIndex,
    bm25_score,
    build_bm25,
    build_index,
    mine_bm25_negatives,
    ndcg_at_k,
    paired_t_test,
    recall_at_k,
    search,
)
from .trainer import (
    FewshotConfig,
    TrainConfig,
    continue_pretrain,
    fewshot_finetune,
    lr_at,
    pretrain,
    train_step,
    weight_audit,
)

__version__ = "0.1.0"
