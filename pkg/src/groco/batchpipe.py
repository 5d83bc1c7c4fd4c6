"""Per-anchor distance groups from a batch of projected views.

Every view in a batch serves once as the anchor: its positives are the other
views of the same image, its negatives the views of all other images. Both
groups are hard index selections (top-N strongest negatives, ascending
pre-ordering), so gradients route only through the selected entries. With
stop-gradient on (the default), distances are computed against detached
non-anchor projections and the loss gradient reaches only each anchor's own
projection.

Projections may be a plain array (losses come back as floats) or a
`diffgrad.Tensor` (losses are recorded scalars).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgrad as dg
from . import losses
from .diffgrad import NumericError, Tensor
from .losses import GroCoParams, InfoNCEParams, TripletParams

__all__ = [
    "ViewBatch",
    "AnchorGroup",
    "cosine_distance",
    "select_top_negatives",
    "build_anchor_group",
    "batch_loss",
]

LOSS_KINDS = ("groco", "infonce", "triplet")


@dataclass
class ViewBatch:
    """`m` augmented views for each of `B` images, already projected.

    `projections` has one row per view; `image_id[v]` names the source image
    of view v and must occur exactly `views_per_image` times.
    """

    projections: object  # (m*B, D) ndarray or Tensor
    image_id: np.ndarray
    views_per_image: int

    def __post_init__(self):
        self.image_id = np.asarray(self.image_id)
        raw = _raw2d(self.projections)
        m = int(self.views_per_image)
        if m < 2:
            raise ValueError(f"views_per_image must be >= 2, got {m}")
        if self.image_id.ndim != 1 or self.image_id.size != raw.shape[0]:
            raise ValueError("image_id must assign one source image per view")
        _, counts = np.unique(self.image_id, return_counts=True)
        if counts.size < 2:
            raise ValueError("batch must contain at least 2 distinct images")
        if not np.all(counts == m):
            raise ValueError(f"every image must contribute exactly {m} views")

    @property
    def num_views(self) -> int:
        return self.image_id.size

    @property
    def num_images(self) -> int:
        return self.num_views // self.views_per_image


@dataclass
class AnchorGroup:
    """One anchor's distance groups plus the index maps gradients route
    through. `d_pos`/`d_neg` are ascending when built with pre-ordering."""

    anchor_index: int
    d_pos: object
    d_neg: object
    pos_indices: np.ndarray = field(repr=False)
    neg_indices: np.ndarray = field(repr=False)


def _raw2d(x) -> np.ndarray:
    raw = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"projections must be 2-D, got shape {raw.shape}")
    return raw


def cosine_distance(x, y) -> float:
    """Negative cosine similarity of two vectors; -1 for aligned inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {x.shape}, {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0:
        raise NumericError("zero-norm vector: x")
    if ny == 0.0:
        raise NumericError("zero-norm vector: y")
    return float(-np.dot(x, y) / (nx * ny))


def select_top_negatives(d_all, num_negatives: int) -> np.ndarray:
    """Indices of the min(num_negatives, len) smallest distances (the
    strongest negatives), ascending, ties broken by lower original index."""
    d = np.asarray(d_all, dtype=np.float64)
    if d.ndim != 1 or d.size < 1:
        raise ValueError(f"expected a non-empty 1-D distance list, got shape {d.shape}")
    if num_negatives < 1:
        raise ValueError(f"num_negatives must be >= 1, got {num_negatives}")
    order = np.lexsort((np.arange(d.size), d))
    return order[: min(num_negatives, d.size)]


def _normalized_rows(projections):
    raw = _raw2d(projections)
    norms = np.sqrt(np.sum(np.square(raw), axis=1))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise NumericError(f"zero-norm projection for view {int(bad[0])}")
    return dg.div(projections, dg.l2norm(projections, axis=1, keepdims=True))


def _distance_matrix(batch: ViewBatch, use_stop_grad: bool):
    """All pairwise negative cosine similarities; row = anchor, column = other.
    With stop-gradient the column factor is detached."""
    xn = _normalized_rows(batch.projections)
    others = dg.stop_grad(xn) if use_stop_grad else xn
    return dg.scale(dg.matmul(xn, dg.transpose(others)), -1.0)


def _stable_ascending(values: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return indices[np.lexsort((indices, values))]


def _group_from_row(
    batch: ViewBatch,
    distances,
    anchor_index: int,
    num_negatives: int,
    random_negatives: bool,
    preorder: bool,
    rng,
) -> AnchorGroup:
    ids = batch.image_id
    raw = distances.data if isinstance(distances, Tensor) else distances
    row = raw[anchor_index]

    pos_idx = np.flatnonzero(ids == ids[anchor_index])
    pos_idx = pos_idx[pos_idx != anchor_index]
    neg_base = np.flatnonzero(ids != ids[anchor_index])

    if random_negatives:
        if rng is None:
            raise ValueError("random_negatives requires a seeded rng")
        take = min(num_negatives, neg_base.size)
        neg_idx = neg_base[np.sort(rng.choice(neg_base.size, size=take, replace=False))]
    else:
        neg_idx = neg_base[select_top_negatives(row[neg_base], num_negatives)]

    if preorder:
        pos_idx = _stable_ascending(row[pos_idx], pos_idx)
        neg_idx = _stable_ascending(row[neg_idx], neg_idx)
    else:
        pos_idx = np.sort(pos_idx)  # keep batch order
        neg_idx = np.sort(neg_idx)

    n_cols = batch.num_views
    d_pos = dg.index_select(distances, anchor_index * n_cols + pos_idx)
    d_neg = dg.index_select(distances, anchor_index * n_cols + neg_idx)
    return AnchorGroup(anchor_index, d_pos, d_neg, pos_idx, neg_idx)


def build_anchor_group(
    batch: ViewBatch,
    anchor_index: int,
    num_negatives: int,
    *,
    stop_grad: bool = True,
    random_negatives: bool = False,
    preorder: bool = True,
    rng=None,
) -> AnchorGroup:
    """Assemble one anchor's positive and negative distance groups."""
    if not (0 <= anchor_index < batch.num_views):
        raise ValueError(f"anchor_index out of range: {anchor_index}")
    if num_negatives < 1:
        raise ValueError(f"num_negatives must be >= 1, got {num_negatives}")
    d = _distance_matrix(batch, stop_grad)
    return _group_from_row(batch, d, anchor_index, num_negatives, random_negatives, preorder, rng)


def _anchor_loss(group: AnchorGroup, loss_kind: str, params, preorder: bool):
    if loss_kind == "groco":
        if preorder:
            return losses.groco_loss(group.d_pos, group.d_neg, params)
        d = dg.concat([group.d_pos, group.d_neg])
        pos_count = group.pos_indices.size
        return losses.group_loss_from_concat(d, pos_count, params.beta)
    if loss_kind == "infonce":
        return losses.infonce_loss(group.d_pos, group.d_neg, params)
    return losses.triplet_loss(group.d_pos, group.d_neg, params)


def batch_loss(
    batch: ViewBatch,
    loss_kind: str,
    params,
    *,
    num_negatives: int | None = None,
    stop_grad: bool = True,
    preorder: bool = True,
    random_negatives: bool = False,
    infonce_top_n: bool = False,
    rng=None,
):
    """Average per-anchor loss with every view serving as the anchor once.

    The negative group size comes from `params.num_negatives` for the
    group-ordering loss and from `num_negatives` otherwise; the contrastive
    loss uses all available negatives unless `infonce_top_n` is set.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss_kind {loss_kind!r}, expected one of {LOSS_KINDS}")
    m = batch.views_per_image
    all_negatives = m * (batch.num_images - 1)
    if loss_kind == "groco":
        if not isinstance(params, GroCoParams):
            raise ValueError("groco loss requires GroCoParams")
        if params.num_positives != m - 1:
            raise ValueError(
                f"params.num_positives={params.num_positives} but batch provides {m - 1} positives"
            )
        effective_n = params.num_negatives
    elif loss_kind == "infonce":
        if not isinstance(params, InfoNCEParams):
            raise ValueError("infonce loss requires InfoNCEParams")
        effective_n = (num_negatives or 10) if infonce_top_n else all_negatives
    else:
        if not isinstance(params, TripletParams):
            raise ValueError("triplet loss requires TripletParams")
        effective_n = num_negatives or 10

    d = _distance_matrix(batch, stop_grad)
    per_anchor = [
        _anchor_loss(
            _group_from_row(batch, d, a, effective_n, random_negatives, preorder, rng),
            loss_kind,
            params,
            preorder,
        )
        for a in range(batch.num_views)
    ]
    total = dg.scale(dg.sum(dg.concat(per_anchor)), 1.0 / len(per_anchor))
    return total if isinstance(total, Tensor) else float(total)
