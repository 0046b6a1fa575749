"""Batch distance matrices, hard-triplet mining, and all training losses.

The triplet terms follow the batch-hard recipe: within a PK batch every
image is an anchor; its hardest positive and hardest negative are picked
on the *global* distance matrix only, and the hinge is charged separately
on the global and the aligned-local matrices with their own margins.

The two mutual terms couple a pair of jointly trained models through
gradient-stopped copies of each other's outputs: squared differences of
the global distance matrices, and a symmetric KL between classifier
row-distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment, autodiff as ad

# Mirrors the reference training setup: hinge margins of 0.5 on both
# distance matrices, mutual-loss weights of 0.001 (metric) and 0.01 (KL).
DEFAULT_MARGIN = 0.5
DEFAULT_METRIC_MUTUAL_WEIGHT = 0.001
DEFAULT_CLS_MUTUAL_WEIGHT = 0.01

LOSS_CSV_HEADER = "step,metric_global,metric_local,cls,mm,cmm,total"


@dataclass
class BatchDistances:
    """Pairwise global/local distances for one batch plus identity labels."""

    global_node: ad.Node  # (N, N)
    local_node: ad.Node | None  # (N, N) or absent for global-only variants
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class TripletSelection:
    """Per-anchor hardest positive/negative indices into the batch."""

    positives: np.ndarray
    negatives: np.ndarray


def batch_distances(
    globals_node: ad.Node,
    locals_node: ad.Node | None,
    labels,
    local_mode: str = "aligned",
) -> BatchDistances:
    """All-pairs distance matrices for a batch of embeddings.

    ``local_mode`` selects how the local matrix is built: "aligned" runs
    the shortest-path alignment, "corresponding" sums index-matched
    stripe distances (no alignment), "none" skips it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = globals_node.value.shape[0]
    if n < 2:
        raise ValueError(f"batch_distances: need at least 2 samples, got {n}")
    if labels.shape != (n,):
        raise ValueError(f"batch_distances: labels shape {labels.shape} != ({n},)")
    c = globals_node.value.shape[1]
    diff = ad.sub(
        ad.reshape(globals_node, (n, 1, c)), ad.reshape(globals_node, (1, n, c))
    )
    global_mat = ad.l2norm(diff, axis=2)

    if local_mode == "none":
        local_mat = None
    else:
        if locals_node is None:
            raise ValueError(f"batch_distances: local_mode={local_mode!r} needs locals")
        _, h, lc = locals_node.value.shape
        if local_mode == "aligned":
            d4 = alignment.pairwise_part_distances(locals_node)
            local_mat = alignment.local_distance_node(d4)
        elif local_mode == "corresponding":
            ldiff = ad.sub(
                ad.reshape(locals_node, (n, 1, h, lc)),
                ad.reshape(locals_node, (1, n, h, lc)),
            )
            per_part = ad.tanh_half(ad.l2norm(ldiff, axis=-1))
            local_mat = alignment.corresponding_distance_node(per_part)
        else:
            raise ValueError(f"batch_distances: unknown local_mode {local_mode!r}")
    return BatchDistances(global_mat, local_mat, labels)


def mine_hard_triplets(dists: BatchDistances) -> TripletSelection:
    """Hardest positive/negative per anchor, from the global matrix only.

    Ties break to the lowest index.  Every identity must contribute at
    least two samples and the batch at least two identities.
    """
    g = dists.global_node.value
    labels = dists.labels
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    lonely = ~pos_mask.any(axis=1)
    if lonely.any():
        bad = labels[np.argmax(lonely)]
        raise ValueError(
            f"mine_hard_triplets: identity {bad} has a single sample in the batch"
        )
    if not neg_mask.any(axis=1).all():
        raise ValueError("mine_hard_triplets: batch needs at least two identities")
    positives = np.argmax(np.where(pos_mask, g, -np.inf), axis=1)
    negatives = np.argmin(np.where(neg_mask, g, np.inf), axis=1)
    return TripletSelection(positives, negatives)


def _hinge(mat_node: ad.Node, sel: TripletSelection, margin: float) -> ad.Node:
    n = mat_node.value.shape[0]
    anchors = np.arange(n)
    ap = ad.gather(mat_node, anchors * n + sel.positives)
    an = ad.gather(mat_node, anchors * n + sel.negatives)
    return ad.mean(ad.relu(ad.sub(ap, an) + margin))


def trihard_loss(
    sel: TripletSelection,
    dists: BatchDistances,
    margin_global: float = DEFAULT_MARGIN,
    margin_local: float = DEFAULT_MARGIN,
) -> tuple[ad.Node, ad.Node | None]:
    """Mean hinge [m + d(a,p) - d(a,n)]+ on the global and local matrices."""
    if margin_global < 0 or margin_local < 0:
        raise ValueError("trihard_loss: margins must be non-negative")
    global_term = _hinge(dists.global_node, sel, margin_global)
    local_term = (
        _hinge(dists.local_node, sel, margin_local)
        if dists.local_node is not None
        else None
    )
    return global_term, local_term


def metric_mutual_loss(m1: ad.Node, m2: ad.Node) -> ad.Node:
    """Mean of [sg(M1)-M2]^2 + [M1-sg(M2)]^2 over all matrix entries.

    The stop-gradient wrapping makes grad wrt M1 exactly (2/N^2)(M1 - M2)
    and kills the mixed second derivative between the two matrices.
    """
    if m1.value.shape != m2.value.shape:
        raise ValueError(
            f"metric_mutual_loss: shape mismatch {m1.value.shape} vs {m2.value.shape}"
        )
    first = ad.square(ad.sub(ad.stop_gradient(m1), m2))
    second = ad.square(ad.sub(m1, ad.stop_gradient(m2)))
    return ad.mean(ad.add(first, second))


def classification_mutual_loss(p1: ad.Node, p2: ad.Node) -> ad.Node:
    """Symmetric KL(p1 || sg(p2)) + KL(p2 || sg(p1)), averaged over rows."""
    if p1.value.shape != p2.value.shape:
        raise ValueError(
            f"classification_mutual_loss: shape mismatch "
            f"{p1.value.shape} vs {p2.value.shape}"
        )
    for name, node in (("p1", p1), ("p2", p2)):
        rows = node.value
        if np.any(rows < 0):
            raise ValueError(f"classification_mutual_loss: {name} has negative entries")
        sums = rows.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError(
                f"classification_mutual_loss: {name} rows must sum to 1 "
                f"(worst deviation {np.abs(sums - 1.0).max():.2e})"
            )
    return ad.add(
        ad.kl_rows(p1, ad.stop_gradient(p2)), ad.kl_rows(p2, ad.stop_gradient(p1))
    )


@dataclass(frozen=True)
class LossWeights:
    metric_global: float = 1.0
    metric_local: float = 1.0
    classification: float = 1.0
    metric_mutual: float = DEFAULT_METRIC_MUTUAL_WEIGHT
    classification_mutual: float = DEFAULT_CLS_MUTUAL_WEIGHT

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"LossWeights: {name} must be non-negative")


@dataclass
class LossBundle:
    """Weighted loss terms; absent components stay None, never silent zeros."""

    metric_global: ad.Node | None
    metric_local: ad.Node | None
    classification: ad.Node | None
    metric_mutual: ad.Node | None
    classification_mutual: ad.Node | None
    weights: LossWeights
    total: ad.Node

    def component_values(self) -> dict:
        out = {}
        for name in (
            "metric_global",
            "metric_local",
            "classification",
            "metric_mutual",
            "classification_mutual",
        ):
            node = getattr(self, name)
            out[name] = None if node is None else float(node.value)
        out["total"] = float(self.total.value)
        return out

    def csv_row(self, step: int) -> str:
        vals = self.component_values()
        cells = [str(step)]
        for key in (
            "metric_global",
            "metric_local",
            "classification",
            "metric_mutual",
            "classification_mutual",
            "total",
        ):
            v = vals[key]
            cells.append("" if v is None else f"{v:.8f}")
        return ",".join(cells)


def total_loss(
    metric_global: ad.Node | None = None,
    metric_local: ad.Node | None = None,
    classification: ad.Node | None = None,
    metric_mutual: ad.Node | None = None,
    classification_mutual: ad.Node | None = None,
    weights: LossWeights = LossWeights(),
) -> LossBundle:
    """Weighted sum of the supplied loss terms."""
    terms = [
        (metric_global, weights.metric_global),
        (metric_local, weights.metric_local),
        (classification, weights.classification),
        (metric_mutual, weights.metric_mutual),
        (classification_mutual, weights.classification_mutual),
    ]
    total = None
    for node, weight in terms:
        if node is None:
            continue
        weighted = node * weight
        total = weighted if total is None else ad.add(total, weighted)
    if total is None:
        raise ValueError("total_loss: no loss terms supplied")
    return LossBundle(
        metric_global,
        metric_local,
        classification,
        metric_mutual,
        classification_mutual,
        weights,
        total,
    )
