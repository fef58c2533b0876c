"""Tiny bag-of-tokens bi-encoder with hand-derived exact gradients.

A sequence embeds as the mean of its token rows, optionally L2-normalized;
queries and documents share one table. The batched loss below differentiates
plain and relevance-weighted InfoNCE through pooling and normalization in
closed form, with the weights treated as constants. A finite-difference
checker validates the whole path.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .augment import PositiveGroup
from .corpus import TokenSeq
from .errors import ConfigError, ReconError
from .loss import LossConfig
from .negatives import NegativeQueue
from .util import seeded_rng

INIT_SCALE = 0.05


@dataclass
class EncoderParams:
    """Trainable embedding table; rows are token embeddings."""

    table: np.ndarray
    normalize: bool = True

    def __post_init__(self):
        self.table = np.ascontiguousarray(self.table, dtype=np.float64)
        if self.table.ndim != 2 or self.table.shape[1] < 2:
            raise ConfigError("table must be (V, d) with d >= 2")
        if not np.all(np.isfinite(self.table)):
            raise ConfigError("table entries must be finite")

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.table.copy(), self.normalize)


def init_params(vocab_size: int, dim: int, seed: int, normalize: bool = True) -> EncoderParams:
    """Uniform(-0.05, 0.05) initialization derived from the run seed."""
    rng = seeded_rng(seed, "init")
    table = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(vocab_size, dim))
    return EncoderParams(table, normalize)


def _normalize_rows(pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; zero rows pass through unchanged with a warning."""
    norms = np.linalg.norm(pooled, axis=1)
    if np.any(norms == 0.0):
        warnings.warn("zero pooled vector left unnormalized", RuntimeWarning)
    safe = np.where(norms == 0.0, 1.0, norms)
    return pooled / safe[:, None], norms


def encode(params: EncoderParams, seq: TokenSeq):
    """Mean of the token rows, L2-normalized when params.normalize is set."""
    if len(seq) == 0:
        raise ConfigError("cannot encode an empty sequence")
    if seq.ids.max(initial=-1) >= params.vocab_size:
        raise ConfigError("token id out of range for this encoder")
    pooled = params.table[seq.ids].mean(axis=0, keepdims=True)
    if params.normalize:
        pooled, _ = _normalize_rows(pooled)
    return pooled[0]


def encode_batch(table: np.ndarray, seqs: list[TokenSeq], normalize: bool) -> np.ndarray:
    """Encode many sequences against an arbitrary table in one kernel call."""
    return _SpanBatch(table, seqs, normalize).emb


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product; cosine similarity when both sides are unit-normalized."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


# --------------------------------------------------------------------------
# Batched forward/backward
# --------------------------------------------------------------------------


class _SpanBatch:
    """Flattened ragged batch of token sequences plus the encoding cache."""

    def __init__(self, table: np.ndarray, seqs: list[TokenSeq], normalize: bool):
        if any(len(s) == 0 for s in seqs):
            raise ConfigError("cannot encode an empty sequence")
        self.ids = (
            np.concatenate([s.ids for s in seqs])
            if seqs
            else np.empty(0, dtype=np.int64)
        )
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(lengths)))
        self.normalize = normalize
        pooled = kernels.pool_mean(table, self.ids, self.offsets)
        if normalize:
            self.emb, self.norms = _normalize_rows(pooled)
        else:
            self.emb, self.norms = pooled, None

    def backward(self, grad_table: np.ndarray, g_emb: np.ndarray) -> None:
        """Scatter embedding gradients back into the table."""
        if self.normalize:
            safe = np.where(self.norms == 0.0, 1.0, self.norms)
            inner = np.einsum("bd,bd->b", g_emb, self.emb)
            g_pooled = (g_emb - inner[:, None] * self.emb) / safe[:, None]
            g_pooled = np.where((self.norms == 0.0)[:, None], g_emb, g_pooled)
        else:
            g_pooled = g_emb
        kernels.scatter_mean_grad(grad_table, self.ids, self.offsets, g_pooled)


@dataclass
class BatchResult:
    loss: float
    grad: np.ndarray | None
    pos_scores: np.ndarray  # (m, n) raw similarities, also the weight scores
    weights: np.ndarray  # (m, n) detached weights actually applied
    nce: np.ndarray  # (m, n) per-pair InfoNCE values
    doc_embeddings: np.ndarray  # (m*n, d) document-side embeddings, group-major
    touched_rows: np.ndarray | None = None  # sorted rows where grad may be nonzero


def _pair_coefficients(
    pos_scores: np.ndarray, cfg: LossConfig, fixed_weights: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair loss coefficients c and the reported weights w.

    uniform:         c = 1/(m n),  w = 1/n per group
    relevance_doc:   c = w / m,    w normalized within each group
    relevance_batch: c = w,        w normalized across the whole batch
    """
    m, n = pos_scores.shape
    if cfg.mode == "uniform":
        w = np.full((m, n), 1.0 / n)
        return np.full((m, n), 1.0 / (m * n)), w
    if fixed_weights is not None:
        w = np.asarray(fixed_weights, dtype=np.float64).reshape(m, n)
    elif cfg.mode == "relevance_doc":
        clamped = np.maximum(pos_scores, cfg.weight_floor)
        w = clamped / clamped.sum(axis=1, keepdims=True)
    else:  # relevance_batch
        clamped = np.maximum(pos_scores, cfg.weight_floor)
        w = clamped / clamped.sum()
    if cfg.mode == "relevance_doc":
        return w / m, w
    return w, w


def batch_loss(
    params: EncoderParams,
    groups: list[PositiveGroup],
    loss_cfg: LossConfig,
    negatives_mode: str,
    queue: NegativeQueue | None = None,
    momentum_table: np.ndarray | None = None,
    fixed_weights: np.ndarray | None = None,
    need_grad: bool = True,
) -> BatchResult:
    """Forward (and optionally backward) pass over a batch of groups.

    moco: positives are encoded with the momentum table, negatives are the
    queue contents, and only the query branch receives gradient. in_batch:
    everything is encoded live and each pair's negatives are the positive
    embeddings of every other group in the batch.

    fixed_weights bypasses the detached weight computation; the finite
    difference checker uses it to probe the same frozen-weight function the
    analytic gradient differentiates.
    """
    m = len(groups)
    if m == 0:
        raise ConfigError("empty batch")
    n = len(groups[0].positives)
    for g in groups:
        if len(g.positives) != n:
            raise ConfigError("all groups must share the same number of positives")
    if negatives_mode not in ("moco", "in_batch"):
        raise ConfigError(f"unknown negatives mode {negatives_mode!r}")
    if negatives_mode == "in_batch" and m < 2:
        raise ConfigError("in_batch negatives need at least two groups")
    if negatives_mode == "moco" and queue is None:
        raise ConfigError("moco mode requires a queue")

    tau = loss_cfg.tau
    table = params.table
    q_batch = _SpanBatch(table, [g.query for g in groups], params.normalize)
    E_q = q_batch.emb  # (m, d)

    pos_seqs = [p for g in groups for p in g.positives]
    if negatives_mode == "moco":
        if momentum_table is None:
            raise ConfigError("moco mode requires a momentum table")
        p_batch = _SpanBatch(momentum_table, pos_seqs, params.normalize)
    else:
        p_batch = _SpanBatch(table, pos_seqs, params.normalize)
    P_flat = p_batch.emb  # (m*n, d)

    S = np.einsum("id,ijd->ij", E_q, P_flat.reshape(m, n, -1))  # (m, n)
    s = S / tau

    if negatives_mode == "moco":
        N = queue.entries  # (D, d), constant w.r.t. the live table
        if N.shape[0] > 0:
            z = (E_q @ N.T) / tau  # (m, D)
            zmax = z.max(axis=1)
            q_soft = np.exp(z - zmax[:, None])
            zsum = q_soft.sum(axis=1)
            q_soft /= zsum[:, None]  # softmax over the queue only
            zlse = zmax + np.log(zsum)
        else:
            q_soft = np.zeros((m, 0))
            zlse = np.full(m, -np.inf)
    else:
        zfull = (E_q @ P_flat.T) / tau  # (m, m*n)
        own = np.zeros((m, m * n), dtype=bool)
        for i in range(m):
            own[i, i * n : (i + 1) * n] = True
        zfull = np.where(own, -np.inf, zfull)
        zmax = zfull.max(axis=1)
        q_soft = np.exp(zfull - zmax[:, None])
        zsum = q_soft.sum(axis=1)
        q_soft /= zsum[:, None]
        zlse = zmax + np.log(zsum)

    # Stable softmax of the positive against its negative pool. With an
    # empty pool the loss is exactly zero and p0 = 1.
    c = np.maximum(s, zlse[:, None])
    c = np.where(np.isfinite(c), c, s)  # zlse = -inf when there are no negatives
    exp_pos = np.exp(s - c)
    exp_negs = np.where(np.isfinite(zlse[:, None]), np.exp(zlse[:, None] - c), 0.0)
    denom = exp_pos + exp_negs
    nce = c + np.log(denom) - s
    p0 = exp_pos / denom

    coeff, weights = _pair_coefficients(S, loss_cfg, fixed_weights)
    loss = float((coeff * nce).sum())

    grad = None
    touched = None
    if need_grad:
        # Lazily-zeroed allocation: only pages of touched rows are written.
        grad = np.zeros(table.shape, dtype=np.float64)
        dS = coeff * (p0 - 1.0) / tau  # (m, n)
        a = (coeff * (1.0 - p0)).sum(axis=1) / tau  # (m,) total negative mass

        g_Eq = np.einsum("ij,ijd->id", dS, P_flat.reshape(m, n, -1))
        if negatives_mode == "moco":
            if q_soft.shape[1] > 0:
                g_Eq += (a[:, None] * q_soft) @ queue.entries
            q_batch.backward(grad, g_Eq)
            touched = np.unique(q_batch.ids)
        else:
            g_Eq += (a[:, None] * q_soft) @ P_flat
            g_Pflat = dS.reshape(m * n)[:, None] * np.repeat(E_q, n, axis=0)
            g_Pflat += q_soft.T @ (a[:, None] * E_q)
            q_batch.backward(grad, g_Eq)
            p_batch.backward(grad, g_Pflat)
            touched = np.unique(np.concatenate([q_batch.ids, p_batch.ids]))

    return BatchResult(
        loss=loss,
        grad=grad,
        pos_scores=S,
        weights=weights,
        nce=nce,
        doc_embeddings=P_flat,
        touched_rows=touched,
    )


def backward(
    params: EncoderParams,
    groups: list[PositiveGroup],
    loss_cfg: LossConfig,
    negatives_mode: str,
    queue: NegativeQueue | None = None,
    momentum_table: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the batch loss w.r.t. every entry of the live table.

    Rows of tokens absent from the batch are exactly zero; in moco mode the
    momentum table is frozen, so rows of tokens that appear only in document
    spans are zero as well.
    """
    return batch_loss(
        params, groups, loss_cfg, negatives_mode, queue, momentum_table
    ).grad


def check_gradients(
    params: EncoderParams,
    groups: list[PositiveGroup],
    loss_cfg: LossConfig,
    negatives_mode: str,
    queue: NegativeQueue | None = None,
    momentum_table: np.ndarray | None = None,
    eps: float = 1e-5,
    min_entries: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The comparison freezes the relevance weights at their unperturbed values,
    matching the frozen-weight function the analytic gradient differentiates.
    Checks every table entry when the table is small, otherwise every touched
    entry plus a random sample of at least min_entries.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ConfigError("eps must lie in [1e-7, 1e-4]")
    base = batch_loss(params, groups, loss_cfg, negatives_mode, queue, momentum_table)
    if not np.all(np.isfinite(base.grad)):
        raise ReconError("non-finite analytic gradient")
    analytic = base.grad
    fixed_w = base.weights

    V, d = params.table.shape
    if V * d <= 4096:
        entries = [(t, j) for t in range(V) for j in range(d)]
    else:
        touched = sorted({int(i) for g in groups for s in [g.query, *g.positives] for i in s.ids})
        entries = [(t, j) for t in touched for j in range(d)]
        rng = seeded_rng(seed, "gradcheck")
        need = max(0, min_entries - len(entries))
        seen = set(entries)
        while need > 0:
            t, j = int(rng.integers(0, V)), int(rng.integers(0, d))
            if (t, j) not in seen:
                seen.add((t, j))
                entries.append((t, j))
                need -= 1

    work = params.copy()
    max_rel = 0.0
    for t, j in entries:
        orig = work.table[t, j]
        work.table[t, j] = orig + eps
        lo_hi = batch_loss(
            work, groups, loss_cfg, negatives_mode, queue, momentum_table,
            fixed_weights=fixed_w, need_grad=False,
        ).loss
        work.table[t, j] = orig - eps
        lo_lo = batch_loss(
            work, groups, loss_cfg, negatives_mode, queue, momentum_table,
            fixed_weights=fixed_w, need_grad=False,
        ).loss
        work.table[t, j] = orig
        numeric = (lo_hi - lo_lo) / (2.0 * eps)
        a = analytic[t, j]
        if not (np.isfinite(numeric) and np.isfinite(a)):
            raise ReconError("non-finite value during finite differencing")
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        max_rel = max(max_rel, rel)
    return max_rel


def pairs_loss(
    params: EncoderParams,
    query_seqs: list[TokenSeq],
    doc_seqs: list[TokenSeq],
    pos_index: np.ndarray,
    neg_indices: np.ndarray,
    tau: float,
    need_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Supervised InfoNCE over labeled (query, gold, explicit negatives).

    doc_seqs holds the unique candidate documents of the batch; pos_index (B,)
    and neg_indices (B, K) point into it. Both branches are live, so the
    gradient flows through queries and documents alike. Returns the mean
    per-query loss and, optionally, the table gradient.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    B = len(query_seqs)
    if B == 0:
        raise ConfigError("empty batch")
    pos_index = np.asarray(pos_index, dtype=np.int64)
    neg_indices = np.asarray(neg_indices, dtype=np.int64).reshape(B, -1)

    q_batch = _SpanBatch(params.table, query_seqs, params.normalize)
    d_batch = _SpanBatch(params.table, doc_seqs, params.normalize)
    E_q, E_d = q_batch.emb, d_batch.emb

    s = np.einsum("bd,bd->b", E_q, E_d[pos_index]) / tau  # (B,)
    z = np.einsum("bd,bkd->bk", E_q, E_d[neg_indices]) / tau  # (B, K)
    c = np.maximum(s, z.max(axis=1, initial=-np.inf))
    exp_pos = np.exp(s - c)
    exp_negs = np.exp(z - c[:, None])
    denom = exp_pos + exp_negs.sum(axis=1)
    loss = float(np.mean(c + np.log(denom) - s))

    grad = None
    if need_grad:
        grad = np.zeros(params.table.shape, dtype=np.float64)
        p0 = exp_pos / denom
        pz = exp_negs / denom[:, None]
        ds = (p0 - 1.0) / (B * tau)  # (B,)
        dz = pz / (B * tau)  # (B, K)
        g_Eq = ds[:, None] * E_d[pos_index] + np.einsum("bk,bkd->bd", dz, E_d[neg_indices])
        g_Ed = np.zeros_like(E_d)
        np.add.at(g_Ed, pos_index, ds[:, None] * E_q)
        np.add.at(g_Ed, neg_indices.ravel(), (dz[:, :, None] * E_q[:, None, :]).reshape(-1, E_q.shape[1]))
        q_batch.backward(grad, g_Eq)
        d_batch.backward(grad, g_Ed)
    return loss, grad


def make_gradcheck_instance(
    vocab_size: int,
    dim: int,
    m: int,
    n: int,
    negatives_mode: str,
    seed: int = 0,
    queue_size: int = 16,
    normalize: bool = True,
):
    """Random small training instance for gradient checking.

    Returns (params, groups, queue, momentum_table). The momentum table is a
    perturbed copy of the live one so moco-mode scores differ between the two
    branches; queue rows are unit vectors, like real document embeddings.
    """
    rng = seeded_rng(seed, "gradcheck-instance")
    params = EncoderParams(
        rng.uniform(-INIT_SCALE, INIT_SCALE, size=(vocab_size, dim)), normalize
    )
    groups = []
    for gi in range(m):
        seqs = []
        for _ in range(n + 1):
            length = int(rng.integers(3, 10))
            seqs.append(TokenSeq(rng.integers(0, vocab_size, size=length), vocab_size))
        groups.append(
            PositiveGroup(
                doc_id=f"doc{gi}",
                query=seqs[0],
                positives=seqs[1:],
                span_offsets=[(0, len(s)) for s in seqs],
            )
        )
    queue = momentum_table = None
    if negatives_mode == "moco":
        queue = NegativeQueue(max(queue_size, 1), dim)
        raw = rng.normal(size=(queue_size, dim))
        queue.enqueue(raw / np.linalg.norm(raw, axis=1, keepdims=True))
        momentum_table = params.table + rng.uniform(-0.01, 0.01, size=params.table.shape)
    return params, groups, queue, momentum_table


# --------------------------------------------------------------------------
# Checkpoint format
# --------------------------------------------------------------------------

_MAGIC = b"RCTR"
_VERSION = 1


@dataclass
class Checkpoint:
    params: EncoderParams
    momentum_table: np.ndarray | None
    step: int
    queue_capacity: int | None
    queue_entries: np.ndarray | None
    opt_state: tuple[int, np.ndarray, np.ndarray] | None  # (t, m1, m2) for adam
    active_rows: np.ndarray | None = None  # rows that have ever been trained


def save_checkpoint(
    path,
    params: EncoderParams,
    momentum_table: np.ndarray | None = None,
    step: int = 0,
    queue: NegativeQueue | None = None,
    opt_state: tuple[int, np.ndarray, np.ndarray] | None = None,
    active_rows: np.ndarray | None = None,
) -> None:
    """Binary little-endian checkpoint.

    Layout: magic "RCTR", version u32, V u64, d u64, normalize u8, the f64
    table row-major, then a momentum presence flag and table, followed by the
    resume extras (step, queue, optimizer moments, trained-row set) each
    behind its own flag.
    """
    V, d = params.table.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQQB", _VERSION, V, d, int(params.normalize)))
        fh.write(params.table.astype("<f8").tobytes())
        if momentum_table is not None:
            if momentum_table.shape != (V, d):
                raise ConfigError("momentum table shape mismatch")
            fh.write(struct.pack("<B", 1))
            fh.write(momentum_table.astype("<f8").tobytes())
        else:
            fh.write(struct.pack("<B", 0))
        fh.write(struct.pack("<Q", step))
        if queue is not None:
            entries = queue.entries
            fh.write(struct.pack("<BQQ", 1, queue.capacity, entries.shape[0]))
            fh.write(entries.astype("<f8").tobytes())
        else:
            fh.write(struct.pack("<B", 0))
        if opt_state is not None:
            t, m1, m2 = opt_state
            fh.write(struct.pack("<BQ", 1, t))
            fh.write(m1.astype("<f8").tobytes())
            fh.write(m2.astype("<f8").tobytes())
        else:
            fh.write(struct.pack("<B", 0))
        if active_rows is not None:
            fh.write(struct.pack("<BQ", 1, active_rows.size))
            fh.write(np.asarray(active_rows, dtype="<i8").tobytes())
        else:
            fh.write(struct.pack("<B", 0))


def _read_exact(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise ReconError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise ReconError(f"{path}: not a checkpoint file (bad magic)")
        version, V, d, norm = struct.unpack("<IQQB", _read_exact(fh, 21))
        if version != _VERSION:
            raise ReconError(f"{path}: unsupported checkpoint version {version}")
        table = np.frombuffer(_read_exact(fh, 8 * V * d), dtype="<f8").reshape(V, d)
        params = EncoderParams(table.copy(), bool(norm))
        (mom_flag,) = struct.unpack("<B", _read_exact(fh, 1))
        momentum = None
        if mom_flag:
            momentum = (
                np.frombuffer(_read_exact(fh, 8 * V * d), dtype="<f8")
                .reshape(V, d)
                .copy()
            )
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (queue_flag,) = struct.unpack("<B", _read_exact(fh, 1))
        capacity = entries = None
        if queue_flag:
            capacity, count = struct.unpack("<QQ", _read_exact(fh, 16))
            entries = (
                np.frombuffer(_read_exact(fh, 8 * count * d), dtype="<f8")
                .reshape(count, d)
                .copy()
            )
        (opt_flag,) = struct.unpack("<B", _read_exact(fh, 1))
        opt_state = None
        if opt_flag:
            (t,) = struct.unpack("<Q", _read_exact(fh, 8))
            m1 = np.frombuffer(_read_exact(fh, 8 * V * d), dtype="<f8").reshape(V, d).copy()
            m2 = np.frombuffer(_read_exact(fh, 8 * V * d), dtype="<f8").reshape(V, d).copy()
            opt_state = (t, m1, m2)
        (active_flag,) = struct.unpack("<B", _read_exact(fh, 1))
        active_rows = None
        if active_flag:
            (count,) = struct.unpack("<Q", _read_exact(fh, 8))
            active_rows = np.frombuffer(_read_exact(fh, 8 * count), dtype="<i8").copy()
    return Checkpoint(params, momentum, step, capacity, entries, opt_state, active_rows)
