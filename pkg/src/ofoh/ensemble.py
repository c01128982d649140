"""Score-level ensembling: probability voting and stacked generalization.

Voting averages member probability vectors elementwise. Stacking trains a
one-hidden-layer MLP on concatenated member probabilities with
cross-entropy plus the angle-diversity penalty on the output layer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .losses import LossConfig, diversity_loss
from .optim import AdamW
from .seeding import derive_rng
from .tensor import Tensor, softmax_rows


def vote(members: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of member probability vectors."""
    if not members:
        raise ContractError("vote needs at least one member")
    first = np.asarray(members[0], dtype=np.float64)
    out = np.zeros_like(first)
    for m in members:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != first.shape:
            raise ShapeError(f"member shapes differ: {m.shape} vs {first.shape}")
        out += m
    return out / len(members)


class StackingModel:
    """Hidden ReLU layer plus an output classifier over member predictions."""

    def __init__(self, n_classes: int, n_members: int = 2, seed: int = 0):
        self.n_classes = n_classes
        self.n_members = n_members
        in_dim = n_members * n_classes
        hidden = n_members * n_classes
        rng = derive_rng(seed, "stack-init")
        self.w1 = Tensor(rng.normal(0, np.sqrt(2.0 / in_dim), (in_dim, hidden)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, np.sqrt(1.0 / hidden), (hidden, n_classes)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(n_classes), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def state_arrays(self, prefix: str = "stack.") -> dict[str, np.ndarray]:
        return {
            prefix + "w1": self.w1.data, prefix + "b1": self.b1.data,
            prefix + "w2": self.w2.data, prefix + "b2": self.b2.data,
            prefix + "meta": np.array([self.n_classes, self.n_members],
                                      dtype=np.float64),
        }

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray],
                   prefix: str = "stack.") -> "StackingModel":
        meta = [int(v) for v in arrays[prefix + "meta"]]
        model = cls(n_classes=meta[0], n_members=meta[1])
        model.w1.data = arrays[prefix + "w1"].astype(np.float64)
        model.b1.data = arrays[prefix + "b1"].astype(np.float64)
        model.w2.data = arrays[prefix + "w2"].astype(np.float64)
        model.b2.data = arrays[prefix + "b2"].astype(np.float64)
        return model

    def _probs(self, x: Tensor) -> Tensor:
        hidden = T.relu(T.matmul(x, self.w1) + self.b1)
        logits = T.matmul(hidden, self.w2) + self.b2
        return softmax_rows(logits)


def stack_train(member_preds: np.ndarray, labels: np.ndarray,
                cfg: LossConfig, epochs: int, seed: int = 0,
                lr: float = 1e-2,
                apply_diversity: bool = True) -> tuple[StackingModel, list[float]]:
    """Full-batch training; returns the model and the per-epoch loss curve."""
    member_preds = np.asarray(member_preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if member_preds.ndim != 2 or member_preds.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"predictions {member_preds.shape} do not align with "
            f"{labels.shape[0]} labels"
        )
    classes = np.unique(labels)
    if classes.size < 2:
        raise ContractError("stack training needs at least two classes")
    n_classes = int(labels.max()) + 1
    if member_preds.shape[1] % n_classes:
        raise ShapeError(
            f"prediction width {member_preds.shape[1]} is not a multiple of "
            f"{n_classes} classes"
        )
    n_members = member_preds.shape[1] // n_classes

    model = StackingModel(n_classes, n_members, seed=seed)
    opt = AdamW(model.parameters(), base_lr=lr)
    x = Tensor(member_preds)
    onehot = np.zeros((labels.size, n_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    mask = Tensor(onehot)

    use_div = apply_diversity and cfg.lambda_div != 0.0
    history = []
    for _ in range(epochs):
        probs = model._probs(x)
        picked = T.sum_all(T.log(T.clamp_min(probs, 1e-12)) * mask)
        loss = picked * (-1.0 / labels.size)
        if use_div:
            loss = loss + diversity_loss(T.transpose(model.w2)) * cfg.lambda_div
        history.append(loss.item())
        opt.zero_grad()
        loss.backward(model.parameters())
        opt.step()
    return model, history


def gallery_predictions(dists: np.ndarray) -> np.ndarray:
    """Turn a query-by-gallery distance matrix into per-query probability
    vectors over gallery candidates (softmax of z-normalized similarities).

    This is the member "prediction" for a retrieval decision; ensembles
    combine these the same way they combine class probabilities.
    """
    dists = np.asarray(dists, dtype=np.float64)
    if dists.ndim != 2:
        raise ShapeError(f"expected a distance matrix, got {dists.shape}")
    sims = -dists
    mu = sims.mean(axis=1, keepdims=True)
    sd = np.maximum(sims.std(axis=1, keepdims=True), 1e-12)
    z = (sims - mu) / sd
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def member_reliance(model: StackingModel) -> np.ndarray:
    """How much the trained meta-learner relies on each member.

    Measured as the first-layer weight mass assigned to each member's
    input block, normalized to sum 1.
    """
    w1 = model.w1.data
    block = model.n_classes
    masses = np.array([
        np.linalg.norm(w1[m * block:(m + 1) * block, :])
        for m in range(model.n_members)
    ])
    total = masses.sum()
    if total <= 0:
        return np.full(model.n_members, 1.0 / model.n_members)
    return masses / total


def stack_predict(model: StackingModel, member_preds: np.ndarray) -> np.ndarray:
    """Probabilities for one concatenated member-prediction vector."""
    member_preds = np.asarray(member_preds, dtype=np.float64)
    expected = model.n_members * model.n_classes
    if member_preds.shape != (expected,):
        raise ShapeError(
            f"expected a {expected}-vector of member predictions, "
            f"got shape {member_preds.shape}"
        )
    probs = model._probs(Tensor(member_preds.reshape(1, -1)))
    return probs.data.reshape(-1)
