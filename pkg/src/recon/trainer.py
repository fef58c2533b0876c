"""Training loops: unsupervised pre-training, continued pre-training on a
target corpus, and few-shot fine-tuning with lexical negatives.

Every random decision is keyed by (seed, purpose, step, ...), so a run is a
pure function of (seed, config, corpus): two runs agree bitwise and a resumed
checkpoint continues exactly where the original run would have gone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .augment import CropConfig, make_group
from .corpus import Document, DocLabel, TokenSeq, tokenize
from .encoder import (
    Checkpoint,
    EncoderParams,
    batch_loss,
    encode_batch,
    init_params,
    pairs_loss,
    save_checkpoint,
)
from .errors import ConfigError, DocumentTooShort, IngestError, TrainError
from .loss import MODES, LossConfig, relevance_weights
from .negatives import MomentumState, NegativeQueue, momentum_update_rows
from .retrieval import build_bm25, mine_bm25_negatives
from .util import seeded_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Flat pre-training configuration; every field is config-file addressable."""

    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 0.005
    batch_groups: int = 8
    pairs_per_doc: int = 4
    tau: float = 0.1
    mode: str = "relevance_doc"
    weight_floor: float = 1e-6
    negatives_mode: str = "moco"
    queue_capacity: int = 4096
    mu: float = 0.99
    seed: int = 0
    checkpoint_every: int = 500
    vocab_size: int = 65_536
    dim: int = 64
    normalize: bool = True
    optimizer: str = "sgd"
    min_ratio: float = 0.1
    max_ratio: float = 0.5
    min_span_tokens: int = 8

    def __post_init__(self):
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.batch_groups < 1 or self.pairs_per_doc < 1:
            raise ConfigError("batch_groups and pairs_per_doc must be positive")
        if self.negatives_mode not in ("moco", "in_batch"):
            raise ConfigError(f"negatives_mode must be moco or in_batch, got {self.negatives_mode!r}")
        if self.negatives_mode == "in_batch" and self.batch_groups < 2:
            raise ConfigError("in_batch negatives need batch_groups >= 2")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.queue_capacity < 1 or self.checkpoint_every < 1:
            raise ConfigError("queue_capacity and checkpoint_every must be positive")

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, mode=self.mode, weight_floor=self.weight_floor)

    def crop_config(self) -> CropConfig:
        return CropConfig(
            n=self.pairs_per_doc,
            min_ratio=self.min_ratio,
            max_ratio=self.max_ratio,
            min_span_tokens=self.min_span_tokens,
        )


@dataclass
class FewshotConfig:
    negatives_per_query: int = 8
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.08
    tau: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.negatives_per_query < 1:
            raise ConfigError("negatives_per_query must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.tau <= 0:
            raise ConfigError("invalid few-shot configuration")


def _coerce(value: str, typ):
    if typ is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    return typ(value)


def parse_config_file(path, cls):
    """Read flat `key = value` lines into a TrainConfig or FewshotConfig.

    Blank lines and #-comments are skipped; unknown keys are errors.
    """
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            typ = fields[key]
            if isinstance(typ, str):  # evaluated annotations
                typ = types.get(typ, str)
            try:
                values[key] = _coerce(raw, typ)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    return cls(**values)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then linear decay to zero at total_steps."""
    if step < 0 or step >= cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps})")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    remaining = cfg.total_steps - cfg.warmup_steps
    if remaining == 0:
        return cfg.peak_lr
    return cfg.peak_lr * (1.0 - (step - cfg.warmup_steps) / remaining)


@dataclass
class TrainState:
    """Everything a step mutates; a checkpoint is exactly this plus the step.

    active_rows is the sorted set of table rows that have ever received
    gradient. Untrained rows are exact fixed points of SGD and Adam alike, so
    updates (including the momentum recurrence) only ever touch this set.
    """

    params: EncoderParams
    momentum: MomentumState | None
    queue: NegativeQueue | None
    step: int = 0
    opt_t: int = 0
    opt_m: np.ndarray | None = None
    opt_v: np.ndarray | None = None
    active_rows: np.ndarray | None = None

    def __post_init__(self):
        if self.active_rows is None:
            self.active_rows = np.empty(0, dtype=np.int64)


def init_state(cfg: TrainConfig) -> TrainState:
    params = init_params(cfg.vocab_size, cfg.dim, cfg.seed, cfg.normalize)
    return _state_around(params, cfg)


def _state_around(params: EncoderParams, cfg: TrainConfig) -> TrainState:
    momentum = queue = None
    if cfg.negatives_mode == "moco":
        momentum = MomentumState(params.table.copy(), cfg.mu)
        queue = NegativeQueue(cfg.queue_capacity, cfg.dim)
    state = TrainState(params, momentum, queue)
    if cfg.optimizer == "adam":
        state.opt_m = np.zeros_like(params.table)
        state.opt_v = np.zeros_like(params.table)
    return state


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    if ckpt.params.vocab_size != cfg.vocab_size or ckpt.params.dim != cfg.dim:
        raise ConfigError("checkpoint shape does not match the configuration")
    state = _state_around(ckpt.params, cfg)
    state.step = ckpt.step
    if cfg.negatives_mode == "moco":
        if ckpt.momentum_table is not None:
            state.momentum = MomentumState(ckpt.momentum_table.copy(), cfg.mu)
        if ckpt.queue_entries is not None:
            state.queue = NegativeQueue(ckpt.queue_capacity or cfg.queue_capacity, cfg.dim)
            state.queue.restore(ckpt.queue_entries)
    if cfg.optimizer == "adam" and ckpt.opt_state is not None:
        state.opt_t, state.opt_m, state.opt_v = ckpt.opt_state
        state.opt_m = state.opt_m.copy()
        state.opt_v = state.opt_v.copy()
    if ckpt.active_rows is not None:
        state.active_rows = ckpt.active_rows.astype(np.int64)
    return state


def _apply_update(state: TrainState, grad: np.ndarray, lr: float, cfg: TrainConfig, touched: np.ndarray) -> None:
    """Optimizer step restricted to the rows that can move.

    SGD moves exactly the rows with gradient support; Adam additionally keeps
    decaying the moments of previously-trained rows, which matches the dense
    update because zero-moment zero-gradient rows are fixed points.
    """
    state.active_rows = np.union1d(state.active_rows, touched)
    if cfg.optimizer == "sgd":
        state.params.table[touched] -= lr * grad[touched]
        return
    rows = state.active_rows
    state.opt_t += 1
    g = grad[rows]
    state.opt_m[rows] = ADAM_BETA1 * state.opt_m[rows] + (1.0 - ADAM_BETA1) * g
    state.opt_v[rows] = ADAM_BETA2 * state.opt_v[rows] + (1.0 - ADAM_BETA2) * g * g
    m_hat = state.opt_m[rows] / (1.0 - ADAM_BETA1**state.opt_t)
    v_hat = state.opt_v[rows] / (1.0 - ADAM_BETA2**state.opt_t)
    state.params.table[rows] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _pair_topic_flags(group, label: DocLabel) -> list[bool]:
    """True per positive when its majority topic differs from the query's."""
    q_start, q_end = group.span_offsets[0]
    q_topic = label.majority_topic(q_start, q_end)
    flags = []
    for start, end in group.span_offsets[1:]:
        flags.append(label.majority_topic(start, end) != q_topic)
    return flags


def train_step(
    state: TrainState,
    batch: list[tuple[Document, TokenSeq | None]],
    cfg: TrainConfig,
    labels: dict[str, DocLabel] | None = None,
) -> dict:
    """One optimizer step over a batch of documents.

    Documents too short to crop are skipped; an entirely skipped batch is an
    error. In moco mode the momentum table and the queue are updated after
    the parameter update, so a batch never serves as its own negatives.
    """
    crop_cfg = cfg.crop_config()
    groups = []
    for doc, seq in batch:
        if seq is None:
            continue
        rng = seeded_rng(cfg.seed, "augment", state.step, doc.id)
        try:
            groups.append(make_group(doc, seq, crop_cfg, rng))
        except DocumentTooShort:
            continue
    if not groups:
        raise TrainError(f"empty effective batch at step {state.step}")
    if cfg.negatives_mode == "in_batch" and len(groups) < 2:
        raise TrainError(f"in_batch negatives need two croppable documents at step {state.step}")

    momentum_table = state.momentum.table if state.momentum is not None else None
    result = batch_loss(
        state.params,
        groups,
        cfg.loss_config(),
        cfg.negatives_mode,
        queue=state.queue,
        momentum_table=momentum_table,
    )
    lr = lr_at(state.step, cfg)
    _apply_update(state, result.grad, lr, cfg, result.touched_rows)
    if cfg.negatives_mode == "moco":
        momentum_update_rows(state.momentum, state.params.table, state.active_rows)
        state.queue.enqueue(result.doc_embeddings)

    weights = result.weights
    metrics = {
        "step": state.step,
        "loss": result.loss,
        "lr": lr,
        "w_mean": float(weights.mean()),
        "w_min": float(weights.min()),
        "w_max": float(weights.max()),
        "w_cross_topic": None,
        "w_same_topic": None,
    }
    if labels is not None and all(g.doc_id in labels for g in groups):
        cross, same = [], []
        for gi, g in enumerate(groups):
            flags = _pair_topic_flags(g, labels[g.doc_id])
            for j, is_cross in enumerate(flags):
                (cross if is_cross else same).append(weights[gi, j])
        if cross:
            metrics["w_cross_topic"] = float(np.mean(cross))
        if same:
            metrics["w_same_topic"] = float(np.mean(same))
    state.step += 1
    return metrics


def _tokenize_corpus(corpus: list[Document], vocab_size: int) -> list[TokenSeq | None]:
    out = []
    for doc in corpus:
        try:
            out.append(tokenize(doc.text, vocab_size))
        except IngestError:
            out.append(None)
    return out


def pretrain(
    corpus: list[Document],
    cfg: TrainConfig,
    labels: dict[str, DocLabel] | None = None,
    out_path=None,
    metrics_path=None,
    state: TrainState | None = None,
    max_steps: int | None = None,
):
    """Run cfg.total_steps of training over reshuffled batches.

    Each epoch takes one seeded global permutation of the corpus and drops
    the last partial batch, keeping the group count constant. Pass a state
    restored from a checkpoint to resume; the remaining steps reproduce the
    uninterrupted run bitwise. max_steps truncates the run early without
    touching the schedule (the first k steps of a truncated run equal the
    first k steps of the full one). Returns (state, step_metrics_list).
    """
    if len(corpus) < cfg.batch_groups:
        raise TrainError(
            f"corpus has {len(corpus)} documents, fewer than batch_groups={cfg.batch_groups}"
        )
    tokens = _tokenize_corpus(corpus, cfg.vocab_size)
    if state is None:
        state = init_state(cfg)
    steps_per_epoch = len(corpus) // cfg.batch_groups
    stop_at = cfg.total_steps if max_steps is None else min(cfg.total_steps, max_steps)
    history: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        while state.step < stop_at:
            epoch = state.step // steps_per_epoch
            slot = state.step % steps_per_epoch
            perm = seeded_rng(cfg.seed, "shuffle", epoch).permutation(len(corpus))
            chosen = perm[slot * cfg.batch_groups : (slot + 1) * cfg.batch_groups]
            batch = [(corpus[i], tokens[i]) for i in chosen]
            metrics = train_step(state, batch, cfg, labels)
            history.append(metrics)
            if sink is not None:
                sink.write(json.dumps(metrics) + "\n")
            if out_path is not None and state.step % cfg.checkpoint_every == 0 and state.step < cfg.total_steps:
                save_state(f"{out_path}.step{state.step:06d}", state, cfg)
    finally:
        if sink is not None:
            sink.close()
    if out_path is not None:
        save_state(out_path, state, cfg)
    return state, history


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    opt_state = None
    if cfg.optimizer == "adam":
        opt_state = (state.opt_t, state.opt_m, state.opt_v)
    save_checkpoint(
        path,
        state.params,
        momentum_table=state.momentum.table if state.momentum is not None else None,
        step=state.step,
        queue=state.queue,
        opt_state=opt_state,
        active_rows=state.active_rows,
    )


def continue_pretrain(
    ckpt: Checkpoint,
    target_corpus: list[Document],
    cfg: TrainConfig,
    labels: dict[str, DocLabel] | None = None,
    out_path=None,
    metrics_path=None,
):
    """Further pre-training on a target corpus from loaded weights.

    The checkpoint owns the architecture (vocab size, dimension, pooling
    flag); cfg is adjusted to it. The schedule restarts: step 0, a fresh
    momentum copy, and an empty queue, with the caller supplying the
    low-peak-lr config appropriate for adaptation.
    """
    params = ckpt.params.copy()
    cfg = dataclasses.replace(
        cfg, vocab_size=params.vocab_size, dim=params.dim, normalize=params.normalize
    )
    state = _state_around(params, cfg)
    return pretrain(
        target_corpus, cfg, labels=labels, out_path=out_path,
        metrics_path=metrics_path, state=state,
    )


def fewshot_finetune(
    params: EncoderParams,
    corpus: list[Document],
    examples: list[tuple[str, str]],
    fcfg: FewshotConfig,
):
    """Supervised fine-tuning on (query text, gold doc id) pairs.

    Negatives are the top BM25 documents for each query with the gold one
    excluded, mined once up front; the model's own rankings are never used
    for mining. Returns the fine-tuned parameters (the input is not touched).
    """
    if not examples:
        raise ConfigError("no few-shot examples given")
    by_id = {doc.id: doc for doc in corpus}
    for query_text, gold_id in examples:
        if gold_id not in by_id:
            raise TrainError(f"gold document {gold_id!r} for query {query_text!r} is not in the corpus")

    stats = build_bm25(corpus)
    query_seqs = []
    candidates: list[list[str]] = []  # per example: [gold, neg1, ...]
    for query_text, gold_id in examples:
        query_seqs.append(tokenize(query_text, params.vocab_size))
        negs = mine_bm25_negatives(query_text, gold_id, stats, fcfg.negatives_per_query)
        candidates.append([gold_id] + negs)

    doc_ids = sorted({doc_id for cand in candidates for doc_id in cand})
    doc_pos = {doc_id: i for i, doc_id in enumerate(doc_ids)}
    doc_seqs = [tokenize(by_id[doc_id].text, params.vocab_size) for doc_id in doc_ids]
    pos_index = np.array([doc_pos[cand[0]] for cand in candidates], dtype=np.int64)
    neg_counts = {len(cand) - 1 for cand in candidates}
    width = min(neg_counts)  # ragged only when the corpus is tiny
    neg_indices = np.array(
        [[doc_pos[doc_id] for doc_id in cand[1 : 1 + width]] for cand in candidates],
        dtype=np.int64,
    )

    tuned = params.copy()
    num = len(examples)
    for epoch in range(fcfg.epochs):
        order = seeded_rng(fcfg.seed, "fewshot", epoch).permutation(num)
        for start in range(0, num, fcfg.batch_size):
            chosen = order[start : start + fcfg.batch_size]
            loss, grad = pairs_loss(
                tuned,
                [query_seqs[i] for i in chosen],
                doc_seqs,
                pos_index[chosen],
                neg_indices[chosen],
                fcfg.tau,
            )
            tuned.table -= fcfg.lr * grad
    return tuned


def weight_audit(
    params: EncoderParams,
    momentum_table: np.ndarray | None,
    corpus: list[Document],
    labels: dict[str, DocLabel],
    cfg: TrainConfig,
    audit_seed: int = 0,
) -> dict:
    """Deterministic cross-topic vs same-topic weight summary for a model.

    Crops one group per croppable document with an audit rng, scores pairs
    the same way training does (momentum document side in moco mode), and
    averages the per-group normalized weights by pair class.
    """
    crop_cfg = cfg.crop_config()
    doc_side = momentum_table if (cfg.negatives_mode == "moco" and momentum_table is not None) else params.table
    cross: list[float] = []
    same: list[float] = []
    for doc in corpus:
        if doc.id not in labels:
            continue
        try:
            seq = tokenize(doc.text, cfg.vocab_size)
            group = make_group(doc, seq, crop_cfg, seeded_rng(audit_seed, "audit", doc.id))
        except (IngestError, DocumentTooShort):
            continue
        q_emb = encode_batch(params.table, [group.query], params.normalize)[0]
        p_embs = encode_batch(doc_side, group.positives, params.normalize)
        scores = p_embs @ q_emb
        weights = relevance_weights(scores, cfg.weight_floor)
        for j, is_cross in enumerate(_pair_topic_flags(group, labels[doc.id])):
            (cross if is_cross else same).append(float(weights[j]))
    return {
        "w_cross_topic": float(np.mean(cross)) if cross else None,
        "w_same_topic": float(np.mean(same)) if same else None,
        "num_cross_pairs": len(cross),
        "num_same_pairs": len(same),
    }
