"""Gallery ranking, CMC/mAP evaluation, and k-reciprocal re-ranking.

Inference ranks by the global feature's L2 distance alone; the aligned
local distance can optionally be mixed in.  Evaluation follows the usual
retrieval protocol: entries sharing the query's identity *and* camera are
excluded, average precision is non-interpolated, and ties everywhere
break toward the lower gallery index (stable sorts).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import alignment
from .autodiff import NORM_EPS

EMBEDDING_MAGIC = b"ARID"
EMBEDDING_VERSION = 1


@dataclass
class EmbeddingStore:
    """Global features plus labels for a query or gallery set."""

    features: np.ndarray  # (N, D)
    identities: np.ndarray  # (N,)
    cameras: np.ndarray  # (N,)
    local_features: np.ndarray | None = None  # (N, H, c) when extracted

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = self.features.shape[0]
        if self.identities.shape != (n,) or self.cameras.shape != (n,):
            raise ValueError("EmbeddingStore: labels must match the feature count")

    def __len__(self) -> int:
        return self.features.shape[0]


def save_embeddings(path, store: EmbeddingStore) -> None:
    """ARID layout: magic, version, count, dim, f32 rows, (id u32, cam u16)."""
    feats = store.features.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<H", EMBEDDING_VERSION))
        fh.write(struct.pack("<I", feats.shape[0]))
        fh.write(struct.pack("<I", feats.shape[1]))
        fh.write(feats.tobytes())
        for ident, cam in zip(store.identities, store.cameras):
            fh.write(struct.pack("<IH", int(ident), int(cam)))


def load_embeddings(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        if fh.read(4) != EMBEDDING_MAGIC:
            raise ValueError(f"{path}: not an ARID embedding file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != EMBEDDING_VERSION:
            raise ValueError(f"{path}: unsupported embedding version {version}")
        count, dim = struct.unpack("<II", fh.read(8))
        feats = np.frombuffer(fh.read(4 * count * dim), dtype="<f4")
        feats = feats.reshape(count, dim).astype(np.float64)
        identities = np.empty(count, dtype=np.int64)
        cameras = np.empty(count, dtype=np.int64)
        for i in range(count):
            ident, cam = struct.unpack("<IH", fh.read(6))
            identities[i] = ident
            cameras[i] = cam
    return EmbeddingStore(feats, identities, cameras)


def pairwise_distances(a, b) -> np.ndarray:
    """Epsilon-stabilized L2 distances between two row sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"pairwise_distances: dimension mismatch {a.shape[1]} vs {b.shape[1]}"
        )
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1) + NORM_EPS)


def pairwise_local_distances(a_locals, b_locals) -> np.ndarray:
    """Aligned local distances between two (N, H, c) stripe-feature sets."""
    a = np.asarray(a_locals, dtype=np.float64)
    b = np.asarray(b_locals, dtype=np.float64)
    diff = a[:, None, :, None, :] - b[None, :, None, :, :]
    raw = np.sqrt(np.sum(diff * diff, axis=-1) + NORM_EPS)
    totals, _ = alignment.batch_shortest_path(alignment.squash_distance(raw))
    return totals


@dataclass
class RankList:
    """Admissible gallery indices for one query, closest first."""

    indices: np.ndarray
    distances: np.ndarray


def _admissible_mask(store: EmbeddingStore, query_identity, query_camera, exclude) -> np.ndarray:
    if not exclude or query_identity is None or query_camera is None:
        return np.ones(len(store), dtype=bool)
    return ~((store.identities == query_identity) & (store.cameras == query_camera))


def rank_gallery(
    query_feature,
    store: EmbeddingStore,
    query_identity=None,
    query_camera=None,
    exclude_same_camera: bool = True,
) -> RankList:
    """Ascending-distance gallery order, junk entries removed.

    With the protocol enabled, gallery rows sharing both the query's
    identity and camera are dropped before ranking.
    """
    query_feature = np.asarray(query_feature, dtype=np.float64)
    if query_feature.shape != (store.features.shape[1],):
        raise ValueError(
            f"rank_gallery: query dim {query_feature.shape} does not match "
            f"store dim {store.features.shape[1]}"
        )
    mask = _admissible_mask(store, query_identity, query_camera, exclude_same_camera)
    if not mask.any():
        raise ValueError("rank_gallery: no admissible gallery entries for this query")
    candidates = np.where(mask)[0]
    dists = pairwise_distances(query_feature[None], store.features[candidates])[0]
    order = np.argsort(dists, kind="stable")
    return RankList(candidates[order], dists[order])


def combined_rank(
    query_feature,
    query_locals,
    store: EmbeddingStore,
    local_weight: float = 1.0,
    query_identity=None,
    query_camera=None,
    exclude_same_camera: bool = True,
) -> RankList:
    """Rank by global_distance + local_weight * aligned local distance."""
    if store.local_features is None:
        raise ValueError("combined_rank: store has no local features")
    mask = _admissible_mask(store, query_identity, query_camera, exclude_same_camera)
    if not mask.any():
        raise ValueError("combined_rank: no admissible gallery entries for this query")
    candidates = np.where(mask)[0]
    g = pairwise_distances(
        np.asarray(query_feature)[None], store.features[candidates]
    )[0]
    l = pairwise_local_distances(
        np.asarray(query_locals)[None], store.local_features[candidates]
    )[0]
    dists = g + local_weight * l
    order = np.argsort(dists, kind="stable")
    return RankList(candidates[order], dists[order])


def rank_all(queries: EmbeddingStore, gallery: EmbeddingStore, exclude_same_camera=True):
    return [
        rank_gallery(
            queries.features[i],
            gallery,
            queries.identities[i],
            queries.cameras[i],
            exclude_same_camera,
        )
        for i in range(len(queries))
    ]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    map: float
    cmc: dict
    per_query_ap: list
    num_queries: int
    excluded_queries: int
    protocol: dict = field(default_factory=dict)

    def to_json(self) -> str:
        cmc = {f"r{k}": v for k, v in sorted(self.cmc.items())}
        return json.dumps(
            {
                "map": self.map,
                "cmc": cmc,
                "num_queries": self.num_queries,
                "excluded_queries": self.excluded_queries,
                "protocol": self.protocol,
            },
            indent=1,
        )


def average_precision(relevant: np.ndarray) -> float:
    """Non-interpolated AP of a ranked 0/1 relevance vector."""
    positions = np.where(relevant)[0]
    if positions.size == 0:
        raise ValueError("average_precision: no relevant entries")
    precisions = (np.arange(positions.size) + 1.0) / (positions + 1.0)
    return float(precisions.mean())


def cmc_map(
    rank_lists,
    gallery_identities,
    query_identities,
    ranks=(1, 5, 10),
    protocol: dict | None = None,
) -> EvalReport:
    """CMC at the requested ranks plus mAP over the given rank lists.

    Queries without any admissible ground truth are excluded from the
    averages and counted in the report.
    """
    gallery_identities = np.asarray(gallery_identities)
    aps = []
    hits = {r: 0 for r in ranks}
    excluded = 0
    for ranklist, qid in zip(rank_lists, query_identities):
        relevant = gallery_identities[ranklist.indices] == qid
        if not relevant.any():
            excluded += 1
            continue
        aps.append(average_precision(relevant))
        first_hit = int(np.argmax(relevant))
        for r in ranks:
            hits[r] += first_hit < r
    if not aps:
        raise ValueError("cmc_map: every query lacks an admissible match")
    counted = len(aps)
    return EvalReport(
        map=float(np.mean(aps)),
        cmc={r: hits[r] / counted for r in ranks},
        per_query_ap=aps,
        num_queries=counted,
        excluded_queries=excluded,
        protocol=protocol or {},
    )


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def __post_init__(self):
        if not (self.k1 >= self.k2 >= 1):
            raise ValueError(f"RerankParams: need k1 >= k2 >= 1, got {self.k1}, {self.k2}")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"RerankParams: lambda must be in [0, 1], got {self.lam}")


def k_reciprocal_neighbors(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices whose top-k lists mutually contain each other and ``i``."""
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.where(backward == i)[0]]


def k_reciprocal_rerank(q_g_dist, q_q_dist, g_g_dist, params: RerankParams = RerankParams()):
    """Blend the original distance with a Jaccard distance over
    k-reciprocal neighbor sets (Gaussian-weighted, with k2 local query
    expansion).  lambda = 1 returns a per-query monotone rescaling of the
    original distances, so orderings are preserved exactly.
    """
    q_g = np.asarray(q_g_dist, dtype=np.float64)
    q_q = np.asarray(q_q_dist, dtype=np.float64)
    g_g = np.asarray(g_g_dist, dtype=np.float64)
    num_q, num_g = q_g.shape
    if params.k1 >= num_g:
        raise ValueError(
            f"k_reciprocal_rerank: k1={params.k1} must be below the "
            f"gallery size {num_g}"
        )
    original = np.concatenate(
        [
            np.concatenate([q_q, q_g], axis=1),
            np.concatenate([q_g.T, g_g], axis=1),
        ],
        axis=0,
    )
    original = original**2
    original = (original / np.max(original, axis=0)).T
    total = num_q + num_g
    initial_rank = np.argsort(original, axis=1, kind="stable")

    v = np.zeros_like(original)
    for i in range(total):
        expansion = list(k_reciprocal_neighbors(initial_rank, i, params.k1))
        for candidate in list(expansion):
            cand_set = k_reciprocal_neighbors(
                initial_rank, candidate, int(round(params.k1 / 2))
            )
            if len(np.intersect1d(cand_set, expansion)) > 2 / 3 * len(cand_set):
                expansion.extend(cand_set)
        expansion = np.unique(expansion)
        weights = np.exp(-original[i, expansion])
        v[i, expansion] = weights / weights.sum()
    if params.k2 > 1:
        v = np.stack([v[initial_rank[i, : params.k2]].mean(axis=0) for i in range(total)])

    inverted = [np.where(v[:, j] != 0)[0] for j in range(total)]
    jaccard = np.zeros((num_q, total))
    for i in range(num_q):
        overlap = np.zeros(total)
        nonzero = np.where(v[i] != 0)[0]
        for j in nonzero:
            rows = inverted[j]
            overlap[rows] += np.minimum(v[i, j], v[rows, j])
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)

    final = params.lam * original[:num_q] + (1.0 - params.lam) * jaccard
    return final[:, num_q:]
