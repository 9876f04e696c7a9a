"""Pairwise Euclidean distances and triplet losses.

Implements the classic hard-margin triplet loss and the batch-hard variant:
for every anchor in a PK batch, the farthest same-identity row and the
nearest different-identity row form the only triplet that contributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BatchError
from .model import ModelParams, embed
from .tensor import Tape, Tensor, backward

# Epsilon under the guarded sqrt; subtracted back out so d(a, a) is exactly 0.
GUARD_EPS = 1e-16


def pairwise_euclidean(embeddings, guarded: bool = False, squared: bool = False) -> Tensor:
    """N x N distance matrix with exact zeros on the diagonal.

    The guarded form computes sqrt(d2 + eps) - sqrt(eps), which keeps the
    gradient finite at coincident embeddings; the exact form is for
    evaluation, where no gradient flows.
    """
    e = T.as_tensor(embeddings)
    n, d = e.shape
    ei = e.reshape((n, 1, d))
    ej = e.reshape((1, n, d))
    d2 = (ei - ej).square().sum(axis=2)
    if squared:
        return d2
    if guarded:
        return (d2 + GUARD_EPS).sqrt() - GUARD_EPS ** 0.5
    return d2.sqrt()


def triplet_loss_hard_margin(d_ap: float, d_an: float, m: float) -> float:
    """[d_ap - d_an + m]+ for a single triplet."""
    if m <= 0:
        raise BatchError(f"loss: margin must be positive, got {m}")
    if d_ap < 0 or d_an < 0:
        raise BatchError("loss: distances must be non-negative")
    return max(d_ap - d_an + m, 0.0)


def validate_batch_labels(labels) -> list[str]:
    labels = [str(l) for l in labels]
    counts: dict[str, int] = {}
    for l in labels:
        counts[l] = counts.get(l, 0) + 1
    if len(counts) < 2:
        raise BatchError("loss: batch-hard loss needs >= 2 distinct identities in the batch")
    singletons = sorted(l for l, c in counts.items() if c < 2)
    if singletons:
        raise BatchError(
            f"loss: identities with a single image in batch: {', '.join(singletons)}"
        )
    return labels


@dataclass
class BatchHardResult:
    total: Tensor  # scalar, participates in the active tape
    per_anchor: np.ndarray
    hardest_pos: np.ndarray
    hardest_neg: np.ndarray


def batch_hard_loss(
    embeddings,
    labels,
    margin: float | None = None,
    reduction: str = "sum",
    squared: bool = False,
    guarded: bool = True,
) -> BatchHardResult:
    """Batch-hard triplet loss over a PK batch.

    margin=None selects the soft variant softplus(hp - hn); a positive
    margin m selects the hinge [hp - hn + m]+. Ties in the hardest
    positive/negative resolve to the lowest row index. guarded keeps the
    distance gradient finite at coincident embeddings (training); pass
    guarded=False for exact distances when no gradient is needed.
    """
    labels = validate_batch_labels(labels)
    e = T.as_tensor(embeddings)
    n = e.shape[0]
    if len(labels) != n:
        raise BatchError(f"loss: {len(labels)} labels for {n} embedding rows")
    if margin is not None and margin <= 0:
        raise BatchError(f"loss: margin must be positive, got {margin}")
    if reduction not in ("sum", "mean"):
        raise BatchError(f"loss: unknown reduction {reduction!r}")

    arr = np.asarray(labels)
    same = (arr[:, None] == arr[None, :]).astype(np.float64)

    dist = pairwise_euclidean(e, guarded=guarded, squared=squared)
    # Positive set includes the anchor itself (distance 0, never the max
    # because every batch identity has >= 2 rows).
    hardest_pos = (dist * Tensor(same)).max(axis=1)
    # Masked entries are pushed above the true maximum so argmin lands on a
    # genuine negative; the offset is a constant w.r.t. the tape.
    offset = float(dist.data.max()) + 1.0
    hardest_neg = (dist + Tensor(same * offset)).min(axis=1)

    gap = hardest_pos - hardest_neg
    per_anchor = T.softplus(gap) if margin is None else T.relu(gap + margin)
    total = per_anchor.sum() if reduction == "sum" else per_anchor.mean()
    return BatchHardResult(
        total=total,
        per_anchor=per_anchor.data.copy(),
        hardest_pos=hardest_pos.data.copy(),
        hardest_neg=hardest_neg.data.copy(),
    )


def accumulate_minibatch_gradient(
    params: ModelParams,
    batch,
    labels,
    margin: float | None = None,
    reduction: str = "sum",
    squared: bool = False,
    update_running: bool = True,
):
    """Forward in train mode, backward through a fresh tape.

    Returns (grads by parameter name, loss value, batch-hard result).
    """
    with Tape() as tape:
        e = embed(params, batch, mode="train", update_running=update_running)
        result = batch_hard_loss(e, labels, margin=margin, reduction=reduction, squared=squared)
        backward(tape, result.total)
    grads = {}
    for name, p in params.trainables():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    params.clear_grads()
    return grads, float(result.total.data), result
