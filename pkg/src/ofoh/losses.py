"""The training objective: identity loss, triplet loss, their sum, the
angle-diversity regularizer on classifier weights, and the total loss.

The triplet term uses the standard hinge max(0, d_pos - d_neg + margin)
over Euclidean descriptor distances. The diversity term row-normalizes a
weight matrix, takes pairwise arccos angles, and penalizes the negated
mean of each row's minimal angle to any other row, so gradient descent
pushes the minimal pairwise angle up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from . import tensor as T
from .tensor import Tensor, _lift

# The margin and the identity-loss weight have no published values; these
# defaults are ours. lambda_div = 0.01 is the best-performing setting.
DEFAULT_LAMBDA_ID = 1.0
DEFAULT_ALPHA_MARGIN = 0.3
DEFAULT_LAMBDA_DIV = 0.01


@dataclass
class LossConfig:
    lambda_id: float = DEFAULT_LAMBDA_ID
    alpha_margin: float = DEFAULT_ALPHA_MARGIN
    lambda_div: float = DEFAULT_LAMBDA_DIV

    def __post_init__(self):
        for name in ("lambda_id", "alpha_margin", "lambda_div"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ContractError(f"{name} must be finite")
        if self.lambda_id <= 0:
            raise ContractError("lambda_id must be positive")
        if self.alpha_margin < 0 or self.lambda_div < 0:
            raise ContractError("alpha_margin and lambda_div must be >= 0")


def id_loss(scores, true_class: int, lambda_id: float = DEFAULT_LAMBDA_ID) -> Tensor:
    """-lambda_id * log p(true_class), probabilities floored at 1e-12."""
    scores = _lift(scores)
    n = scores.size
    if not 0 <= true_class < n:
        raise ContractError(f"class index {true_class} out of range for {n} classes")
    flat = T.reshape(scores, (n,))
    p_true = T.sum_all(T.narrow(flat, 0, true_class, 1))
    return T.log(T.clamp_min(p_true, 1e-12)) * (-float(lambda_id))


def euclidean(a, b) -> Tensor:
    """Euclidean distance between two equal-length descriptors."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ContractError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return T.sqrt(T.sum_all(diff * diff))


def triplet_loss(f, f_p, f_n, alpha: float = DEFAULT_ALPHA_MARGIN) -> Tensor:
    """Hinge on the positive/negative distance gap with margin alpha."""
    d_pos = euclidean(f, f_p)
    d_neg = euclidean(f, f_n)
    return T.relu(d_pos - d_neg + float(alpha))


def discriminative_loss(id_term, tri_term) -> Tensor:
    return _lift(id_term) + _lift(tri_term)


def diversity_loss(w) -> Tensor:
    """Negated mean minimal pairwise angle between the rows of ``w``."""
    w = _lift(w)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ContractError(f"diversity_loss needs a matrix with >= 2 rows, got {w.shape}")
    norms = np.linalg.norm(w.data, axis=1)
    if np.any(norms < 1e-12):
        raise ContractError("diversity_loss: zero row in weight matrix")
    n = w.shape[0]
    unit = T.l2_normalize_rows(w)
    cos = T.matmul(unit, T.transpose(unit))
    angles = T.arccos(cos)
    # push the diagonal above any real angle so the row minimum skips self-pairs
    angles = angles + Tensor(np.eye(n) * (2.0 * np.pi))
    min_angles = T.reduce_min_rows(angles)
    return -T.mean_all(min_angles)


def total_loss(dis, div, lambda_div: float = DEFAULT_LAMBDA_DIV) -> Tensor:
    return _lift(dis) + _lift(div) * float(lambda_div)


def batch_hard_triplets(descriptors: np.ndarray, labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Hardest positive / hardest negative per anchor within a batch.

    Anchors without both a positive (same label, different index) and a
    negative are skipped. Selection is on detached values; gradients flow
    through the chosen triplets only.
    """
    labels = np.asarray(labels)
    n = len(labels)
    d = np.linalg.norm(descriptors[:, None, :] - descriptors[None, :, :], axis=2)
    triples = []
    for a in range(n):
        same = (labels == labels[a])
        same[a] = False
        diff = labels != labels[a]
        if not same.any() or not diff.any():
            continue
        pos = np.where(same, d[a], -np.inf).argmax()
        neg = np.where(diff, d[a], np.inf).argmin()
        triples.append((a, int(pos), int(neg)))
    return triples
