"""PK-batch sampling and the single/dual-model training loops.

Batches hold P identities with K images each, which batch-hard triplet
mining requires.  The three variants differ only in the local loss term:
"baseline" has none, "gl-baseline" charges index-aligned stripe distances
(no alignment), "aligned" charges the shortest-path local distance.

Mutual training runs two models on an identical batch stream; each step
both models exchange gradient-detached global distance matrices and
classifier distributions, add the mutual terms, and update together.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .data import Dataset, augment
from .model import Model, ModelConfig
from .retrieval import EmbeddingStore, cmc_map, rank_all

VARIANTS = ("baseline", "gl-baseline", "aligned")
_LOCAL_MODE = {"baseline": "none", "gl-baseline": "corresponding", "aligned": "aligned"}


@dataclass(frozen=True)
class LrSchedule:
    """Initial rate plus (epoch, rate) milestones, epochs strictly increasing."""

    initial: float
    milestones: tuple = ()

    def __post_init__(self):
        epochs = [m[0] for m in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])) or any(e < 0 for e in epochs):
            raise ValueError(f"LrSchedule: milestones must strictly increase, got {epochs}")


# Reference schedules: single-model 1e-3 dropping at 80/160 epochs, mutual
# 3e-4 dropping to 1e-4/1e-5 at 60/120.  Desk runs scale the milestones.
SINGLE_MODEL_SCHEDULE = LrSchedule(1e-3, ((80, 1e-4), (160, 1e-5)))
MUTUAL_SCHEDULE = LrSchedule(3e-4, ((60, 1e-4), (120, 1e-5)))
DESK_SCHEDULE = LrSchedule(1e-3, ((16, 1e-4), (32, 1e-5)))


def lr_schedule(epoch: int, schedule: LrSchedule) -> float:
    if epoch < 0:
        raise ValueError(f"lr_schedule: epoch must be non-negative, got {epoch}")
    rate = schedule.initial
    for milestone, value in schedule.milestones:
        if epoch >= milestone:
            rate = value
    return rate


@dataclass(frozen=True)
class PKBatchSpec:
    num_identities: int = 8  # P
    images_per_identity: int = 4  # K
    batches_per_epoch: int = 50

    def __post_init__(self):
        if self.num_identities < 2 or self.images_per_identity < 2:
            raise ValueError("PKBatchSpec: need P >= 2 and K >= 2")
        if self.batches_per_epoch < 1:
            raise ValueError("PKBatchSpec: need at least one batch per epoch")

    @property
    def batch_size(self) -> int:
        return self.num_identities * self.images_per_identity


def train_groups(dataset: Dataset):
    """Identity -> train image indices, excluding single-image identities.

    Returns (groups, excluded identity ids).
    """
    groups = {}
    for idx in dataset.indices("train"):
        groups.setdefault(int(dataset.identities[idx]), []).append(int(idx))
    excluded = sorted(ident for ident, idxs in groups.items() if len(idxs) < 2)
    eligible = {
        ident: np.asarray(idxs) for ident, idxs in groups.items() if len(idxs) >= 2
    }
    return eligible, excluded


def sample_pk_batch(groups: dict, spec: PKBatchSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw P identities without replacement, K images each.

    Identities holding fewer than K images are completed by sampling with
    replacement.  Returns (image indices, identity labels).
    """
    if len(groups) < spec.num_identities:
        raise ValueError(
            f"sample_pk_batch: need {spec.num_identities} eligible identities, "
            f"have {len(groups)}"
        )
    idents = np.asarray(sorted(groups))
    chosen = rng.choice(idents, size=spec.num_identities, replace=False)
    indices = []
    labels = []
    for ident in chosen:
        pool = groups[int(ident)]
        take = rng.choice(pool, size=spec.images_per_identity, replace=len(pool) < spec.images_per_identity)
        indices.extend(int(i) for i in take)
        labels.extend([int(ident)] * spec.images_per_identity)
    return np.asarray(indices), np.asarray(labels)


@dataclass
class TrainConfig:
    variant: str = "aligned"
    epochs: int = 12
    seed: int = 0
    batch_seed: int | None = None  # defaults to seed; shared in mutual runs
    partner_seed: int = 1
    margin_global: float = ls.DEFAULT_MARGIN
    margin_local: float = ls.DEFAULT_MARGIN
    cls_weight: float = 1.0
    local_weight: float = 1.0
    metric_mutual_weight: float = ls.DEFAULT_METRIC_MUTUAL_WEIGHT
    cls_mutual_weight: float = ls.DEFAULT_CLS_MUTUAL_WEIGHT
    schedule: LrSchedule = DESK_SCHEDULE
    batch: PKBatchSpec = PKBatchSpec()
    model: ModelConfig | None = None  # derived from the dataset when None
    use_augment: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"TrainConfig: unknown variant {self.variant!r}")
        if self.epochs < 1:
            raise ValueError("TrainConfig: need at least one epoch")


@dataclass
class TrainResult:
    params: dict
    config: TrainConfig
    model_config: ModelConfig
    step_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    diverged: bool = False

    @property
    def model(self) -> Model:
        return Model(self.model_config, self.params)

    def write_logs(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w") as fh:
            fh.write(ls.LOSS_CSV_HEADER + "\n")
            for row in self.step_rows:
                fh.write(row + "\n")
        with open(out_dir / "epochs.csv", "w") as fh:
            fh.write("epoch,rate,mean_total\n")
            for epoch, rate, mean_total in self.epoch_rows:
                fh.write(f"{epoch},{rate},{mean_total:.8f}\n")


def _model_config(dataset: Dataset, config: TrainConfig) -> ModelConfig:
    if config.model is not None:
        return config.model
    return ModelConfig(num_identities=max(2, dataset.num_train_identities))


def _load_batch(dataset: Dataset, indices, rng, use_augment: bool) -> np.ndarray:
    images = []
    for idx in indices:
        img = dataset.load_image(int(idx))
        images.append(augment(img, rng) if use_augment else img)
    return np.stack(images)


@dataclass
class _ForwardParts:
    tape: ad.Tape
    out: object
    bd: ls.BatchDistances
    g_term: ad.Node
    l_term: ad.Node | None
    cls_term: ad.Node
    probs: ad.Node


def _forward_terms(model: Model, images, labels, config: TrainConfig) -> _ForwardParts:
    tape = ad.Tape()
    out = model.forward(tape, images)
    local_mode = _LOCAL_MODE[config.variant]
    locals_node = None if local_mode == "none" else out.local_features
    bd = ls.batch_distances(out.global_features, locals_node, labels, local_mode)
    sel = ls.mine_hard_triplets(bd)
    g_term, l_term = ls.trihard_loss(
        sel, bd, config.margin_global, config.margin_local
    )
    cls_term = ad.softmax_xent(out.logits, labels)
    probs = ad.softmax(out.logits)
    return _ForwardParts(tape, out, bd, g_term, l_term, cls_term, probs)


def _assemble(
    parts: _ForwardParts,
    config: TrainConfig,
    partner_global=None,
    partner_probs=None,
) -> ls.LossBundle:
    """Build the weighted bundle; partner arrays enter as detached leaves."""
    mm = cmm = None
    if partner_global is not None and config.metric_mutual_weight > 0:
        partner = parts.tape.leaf(partner_global, name="partner", requires_grad=False)
        mm = ls.metric_mutual_loss(parts.bd.global_node, partner)
    if partner_probs is not None and config.cls_mutual_weight > 0:
        partner = parts.tape.leaf(partner_probs, name="partner", requires_grad=False)
        cmm = ls.classification_mutual_loss(parts.probs, partner)
    weights = ls.LossWeights(
        metric_global=1.0,
        metric_local=config.local_weight,
        classification=config.cls_weight,
        metric_mutual=config.metric_mutual_weight,
        classification_mutual=config.cls_mutual_weight,
    )
    return ls.total_loss(
        metric_global=parts.g_term,
        metric_local=parts.l_term,
        classification=parts.cls_term,
        metric_mutual=mm,
        classification_mutual=cmm,
        weights=weights,
    )


def _forward_losses(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    partner_global=None,
    partner_probs=None,
):
    parts = _forward_terms(model, images, labels, config)
    bundle = _assemble(parts, config, partner_global, partner_probs)
    return bundle, parts.bd, parts.probs, parts.out


def _apply_grads(model: Model, bundle, out, state: ad.AdamState) -> None:
    grads = ad.backprop(bundle.total)
    grad_arrays = {
        name: ad.grad_wrt(grads, node) for name, node in out.param_nodes.items()
    }
    ad.adam_step(model.params, grad_arrays, state)


def train_single(dataset: Dataset, config: TrainConfig, out_dir=None) -> TrainResult:
    """Train one model; aborts on divergence with the last good checkpoint."""
    model_cfg = _model_config(dataset, config)
    model = Model.from_seed(model_cfg, config.seed)
    state = ad.AdamState()
    groups, _ = train_groups(dataset)
    stream = np.random.default_rng(
        config.seed if config.batch_seed is None else config.batch_seed
    )
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    result = TrainResult({}, config, model_cfg)
    last_good = copy.deepcopy(model.params)
    step = 0
    for epoch in range(config.epochs):
        state.rate = lr_schedule(epoch, config.schedule)
        totals = []
        for _ in range(config.batch.batches_per_epoch):
            indices, labels = sample_pk_batch(groups, config.batch, stream)
            images = _load_batch(dataset, indices, stream, config.use_augment)
            try:
                bundle, _, _, out = _forward_losses(model, images, labels, config)
                _apply_grads(model, bundle, out, state)
            except FloatingPointError:
                model.params = last_good
                result.params = last_good
                result.diverged = True
                if out_dir is not None:
                    result.write_logs(out_dir)
                    ad.save_checkpoint(Path(out_dir) / "model.arwt", last_good)
                return result
            result.step_rows.append(bundle.csv_row(step))
            totals.append(float(bundle.total.value))
            step += 1
        result.epoch_rows.append((epoch, state.rate, float(np.mean(totals))))
        last_good = copy.deepcopy(model.params)
        if out_dir is not None:
            ad.save_checkpoint(Path(out_dir) / f"epoch{epoch:03d}.arwt", model.params)
    result.params = model.params
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.write_logs(out_dir)
        ad.save_checkpoint(out_dir / "model.arwt", model.params)
    return result


def train_mutual(dataset: Dataset, config: TrainConfig, out_dir=None):
    """Jointly train two models coupled through detached mutual terms.

    Both models consume the identical batch stream; each adds mutual
    losses against the partner's gradient-stopped outputs, then both take
    their optimizer step.  Returns one TrainResult per model.
    """
    model_cfg = _model_config(dataset, config)
    model1 = Model.from_seed(model_cfg, config.seed)
    model2 = Model.from_seed(model_cfg, config.partner_seed)
    states = (ad.AdamState(), ad.AdamState())
    groups, _ = train_groups(dataset)
    stream = np.random.default_rng(
        config.seed if config.batch_seed is None else config.batch_seed
    )
    results = (
        TrainResult({}, config, model_cfg),
        TrainResult({}, config, model_cfg),
    )
    last_good = (copy.deepcopy(model1.params), copy.deepcopy(model2.params))
    step = 0
    for epoch in range(config.epochs):
        rate = lr_schedule(epoch, config.schedule)
        states[0].rate = states[1].rate = rate
        totals = ([], [])
        for _ in range(config.batch.batches_per_epoch):
            indices, labels = sample_pk_batch(groups, config.batch, stream)
            images = _load_batch(dataset, indices, stream, config.use_augment)
            try:
                # forward both models first: the mutual terms need the
                # partner's detached outputs from this same step
                parts1 = _forward_terms(model1, images, labels, config)
                parts2 = _forward_terms(model2, images, labels, config)
                bundle1 = _assemble(
                    parts1, config, parts2.bd.global_node.value, parts2.probs.value
                )
                bundle2 = _assemble(
                    parts2, config, parts1.bd.global_node.value, parts1.probs.value
                )
                _apply_grads(model1, bundle1, parts1.out, states[0])
                _apply_grads(model2, bundle2, parts2.out, states[1])
            except FloatingPointError:
                for result, good in zip(results, last_good):
                    result.params = good
                    result.diverged = True
                return results
            results[0].step_rows.append(bundle1.csv_row(step))
            results[1].step_rows.append(bundle2.csv_row(step))
            totals[0].append(float(bundle1.total.value))
            totals[1].append(float(bundle2.total.value))
            step += 1
        for k in range(2):
            results[k].epoch_rows.append((epoch, rate, float(np.mean(totals[k]))))
        last_good = (copy.deepcopy(model1.params), copy.deepcopy(model2.params))
    results[0].params = model1.params
    results[1].params = model2.params
    if out_dir is not None:
        out_dir = Path(out_dir)
        for k, (result, model) in enumerate(zip(results, (model1, model2)), start=1):
            sub = out_dir / f"model{k}"
            result.write_logs(sub)
            ad.save_checkpoint(sub / "model.arwt", model.params)
    return results


# ---------------------------------------------------------------------------
# embedding extraction and evaluation helpers


def extract_embeddings(
    model: Model, dataset: Dataset, split: str, with_locals: bool = False,
    batch_size: int = 32,
) -> EmbeddingStore:
    indices = dataset.indices(split)
    if indices.size == 0:
        raise ValueError(f"extract_embeddings: split {split!r} is empty")
    feats, locs = [], []
    for start in range(0, indices.size, batch_size):
        chunk = indices[start : start + batch_size]
        images = np.stack([dataset.load_image(int(i)) for i in chunk])
        g, l = model.embed(images)
        feats.append(g)
        locs.append(l)
    return EmbeddingStore(
        np.concatenate(feats),
        dataset.identities[indices],
        dataset.cameras[indices],
        np.concatenate(locs) if with_locals else None,
    )


def evaluate_model(model: Model, dataset: Dataset, exclude_same_camera: bool = True):
    """Rank-1/mAP of global-feature retrieval on the query/gallery splits."""
    queries = extract_embeddings(model, dataset, "query")
    gallery = extract_embeddings(model, dataset, "gallery")
    rls = rank_all(queries, gallery, exclude_same_camera)
    return cmc_map(
        rls,
        gallery.identities,
        queries.identities,
        protocol={"same_camera_excluded": exclude_same_camera},
    )


def global_matrix_gap(model_a: Model, model_b: Model, dataset: Dataset, split="query") -> float:
    """Mean |M_a - M_b| entry gap between the two models' distance matrices."""
    store_a = extract_embeddings(model_a, dataset, split)
    store_b = extract_embeddings(model_b, dataset, split)
    from .retrieval import pairwise_distances

    m_a = pairwise_distances(store_a.features, store_a.features)
    m_b = pairwise_distances(store_b.features, store_b.features)
    return float(np.mean(np.abs(m_a - m_b)))
