"""Numpy fallback for the ragged pooling kernels."""

from __future__ import annotations

import numpy as np


def pool_mean(table, ids, offsets):
    """Mean of table rows per ragged segment.

    ids holds the concatenated token ids of a batch of sequences and
    offsets (length B+1) the segment boundaries. Returns a (B, d) array.
    """
    B = offsets.shape[0] - 1
    out = np.empty((B, table.shape[1]), dtype=np.float64)
    if B == 0:
        return out
    gathered = table[ids]
    np.add.reduceat(gathered, offsets[:-1], axis=0, out=out)
    lengths = np.diff(offsets).astype(np.float64)
    out /= lengths[:, None]
    return out


def scatter_mean_grad(grad, ids, offsets, gout):
    """Adjoint of pool_mean: accumulate gout[b] / len(b) into the used rows."""
    B = offsets.shape[0] - 1
    if B == 0:
        return
    lengths = np.diff(offsets).astype(np.float64)
    per_token = np.repeat(gout / lengths[:, None], np.diff(offsets), axis=0)
    np.add.at(grad, ids, per_token)
