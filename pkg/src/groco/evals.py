"""Embedding evaluation: weighted k-NN, linear probe, and the five-variable
optimization-dynamics experiment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgrad as dg
from . import losses

__all__ = [
    "EvalReport",
    "ToyTrajectory",
    "knn_predict",
    "knn_accuracy",
    "linear_probe",
    "toy_dynamics",
    "write_trajectory_csv",
]

KNN_WEIGHT_TAU = 0.07  # similarity-weighting temperature for k-NN votes


@dataclass
class EvalReport:
    knn_accuracies: dict[int, float] = field(default_factory=dict)
    linear_probe_accuracy: float | None = None
    space: str = "representation"
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        values = list(self.knn_accuracies.values())
        if self.linear_probe_accuracy is not None:
            values.append(self.linear_probe_accuracy)
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise ValueError(f"accuracies must lie in [0, 1], got {values}")


def _unit_rows(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError(f"{what} contains a zero-norm embedding")
    return arr / norms


def knn_predict(train_embeds, train_labels, query, k: int, weight_tau: float = KNN_WEIGHT_TAU) -> int:
    """Weighted k-nearest-neighbor vote under cosine distance.

    Each of the k nearest training points votes exp(similarity / weight_tau)
    for its class; neighbor ties break toward the lower index and class-score
    ties toward the smaller class id.
    """
    train_labels = np.asarray(train_labels)
    train = _unit_rows(train_embeds, "train_embeds")
    if train_labels.shape != (train.shape[0],):
        raise ValueError("train_labels must provide one label per embedding")
    if train.shape[0] < 1:
        raise ValueError("empty train set")
    if not (1 <= k <= train.shape[0]):
        raise ValueError(f"k must be in 1..{train.shape[0]}, got {k}")
    q = _unit_rows(query, "query")[0]
    sims = train @ q
    nearest = np.lexsort((np.arange(sims.size), -sims))[:k]
    classes = np.unique(train_labels)
    scores = np.zeros(classes.size)
    weights = np.exp(sims[nearest] / weight_tau)
    for idx, w in zip(nearest, weights):
        scores[np.searchsorted(classes, train_labels[idx])] += w
    return int(classes[int(np.argmax(scores))])


def knn_accuracy(
    train_embeds,
    train_labels,
    test_embeds,
    test_labels,
    k: int,
    weight_tau: float = KNN_WEIGHT_TAU,
) -> float:
    """Fraction of test points whose weighted k-NN vote matches their label."""
    test_labels = np.asarray(test_labels)
    test = np.asarray(test_embeds, dtype=np.float64)
    if test.ndim != 2 or test_labels.shape != (test.shape[0],):
        raise ValueError("test embeddings/labels mismatch")
    correct = 0
    for i in range(test.shape[0]):
        if knn_predict(train_embeds, train_labels, test[i], k, weight_tau) == int(test_labels[i]):
            correct += 1
    return correct / test.shape[0]


def linear_probe(
    train_embeds,
    train_labels,
    test_embeds,
    test_labels,
    steps: int = 500,
    lr: float = 0.1,
) -> float:
    """Multinomial logistic regression on frozen embeddings.

    Full-batch gradient descent on softmax cross-entropy from a zero init;
    returns test accuracy. The embeddings are never modified.
    """
    x = np.asarray(train_embeds, dtype=np.float64)
    y = np.asarray(train_labels)
    xt = np.asarray(test_embeds, dtype=np.float64)
    yt = np.asarray(test_labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("train embeddings/labels mismatch")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    onehot = np.zeros((x.shape[0], classes.size))
    onehot[np.arange(x.shape[0]), np.searchsorted(classes, y)] = 1.0

    w = np.zeros((x.shape[1], classes.size))
    b = np.zeros(classes.size)
    n = x.shape[0]
    for _ in range(steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= lr * (x.T @ delta)
        b -= lr * delta.sum(axis=0)
    pred = classes[np.argmax(xt @ w + b, axis=1)]
    return float(np.mean(pred == yt))


@dataclass
class ToyTrajectory:
    """Similarity values over optimization steps: row s holds the values after
    s gradient updates (row 0 is the initialization); column 0 is the positive
    similarity, the rest are negatives."""

    loss_kind: str
    similarities: np.ndarray

    @property
    def steps(self) -> int:
        return self.similarities.shape[0] - 1


def toy_dynamics(loss_kind: str, init_similarities, steps: int, lr: float, params) -> ToyTrajectory:
    """Plain gradient descent on a handful of raw similarity variables.

    The first variable is the positive similarity, the rest are negatives;
    losses see distances d = -s. For the group-ordering loss, negatives are
    re-ordered ascending by distance at every step (a hard reindex, exactly as
    in the batch pipeline).
    """
    if loss_kind not in ("groco", "infonce"):
        raise ValueError(f"unknown loss_kind {loss_kind!r}, expected 'groco' or 'infonce'")
    sims = np.asarray(init_similarities, dtype=np.float64).copy()
    if sims.ndim != 1 or sims.size < 2:
        raise ValueError("need one positive and at least one negative similarity")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    neg_count = sims.size - 1
    history = [sims.copy()]
    for _ in range(steps):
        tape = dg.Tape()
        s = tape.variable(sims)
        d = dg.scale(s, -1.0)
        d_pos = dg.index_select(d, np.array([0], dtype=np.intp))
        if loss_kind == "groco":
            neg_order = np.argsort(-sims[1:], kind="stable")  # ascending distance
            d_neg = dg.index_select(d, 1 + neg_order)
            loss = losses.groco_loss(d_pos, d_neg, params)
        else:
            d_neg = dg.index_select(d, 1 + np.arange(neg_count, dtype=np.intp))
            loss = losses.infonce_loss(d_pos, d_neg, params)
        grad = dg.backward(tape, loss).grad(s)
        sims = sims - lr * grad
        history.append(sims.copy())
    return ToyTrajectory(loss_kind, np.array(history))


def write_trajectory_csv(trajectory: ToyTrajectory, path) -> None:
    """CSV with header step,s_pos,s_neg1,... and one row per recorded step,
    values at 12 significant digits."""
    n_neg = trajectory.similarities.shape[1] - 1
    header = "step,s_pos," + ",".join(f"s_neg{i + 1}" for i in range(n_neg))
    lines = [header]
    for step, row in enumerate(trajectory.similarities):
        lines.append(f"{step}," + ",".join(f"{v:.12g}" for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
