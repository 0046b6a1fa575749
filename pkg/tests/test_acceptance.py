"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The training-based criteria share session-scoped fixtures (one default
dataset, one three-variant ablation, one mutual-pair comparison) so the
whole gate stays well inside the CPU budget.
"""

import time
from itertools import combinations

import numpy as np
import pytest

from reidalign import alignment as al
from reidalign import autodiff as ad
from reidalign import humaneval as he
from reidalign import losses as ls
from reidalign import retrieval as rt
from reidalign import training as tr
from reidalign.data import (
    SyntheticConfig,
    apply_vertical_shift,
    generate_synthetic,
    identity_signatures,
    load_manifest,
    render_canonical,
)
from reidalign.model import Model, ModelConfig


def _verdict(name: str, ok: bool, detail: str = "") -> None:
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# shared training fixtures


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    manifest = generate_synthetic(SyntheticConfig(), root)
    return load_manifest(manifest)


@pytest.fixture(scope="session")
def ablation(default_dataset):
    """Three seeded variant runs on the default dataset, timed."""
    wall0, cpu0 = time.time(), time.process_time()
    results = {}
    for variant in tr.VARIANTS:
        config = tr.TrainConfig(
            variant=variant,
            epochs=10,
            seed=0,
            batch=tr.PKBatchSpec(8, 4, 40),
            schedule=tr.LrSchedule(1e-3, ((7, 3e-4),)),
        )
        trained = tr.train_single(default_dataset, config)
        report = tr.evaluate_model(trained.model, default_dataset)
        results[variant] = report
    return results, time.time() - wall0, time.process_time() - cpu0


@pytest.fixture(scope="session")
def mutual_pairs(default_dataset):
    """Aligned pairs with the metric-mutual weight on vs off.

    The classification mutual term is identical in both arms so the
    comparison isolates the metric coupling.  The coupling weight is the
    desk-scale 0.01 (the reference 0.001 is tuned for ~100x more steps).
    """

    def run(metric_mutual_weight):
        config = tr.TrainConfig(
            variant="aligned",
            epochs=8,
            seed=4,
            partner_seed=5,
            metric_mutual_weight=metric_mutual_weight,
            cls_mutual_weight=0.01,
            batch=tr.PKBatchSpec(8, 4, 40),
            schedule=tr.LrSchedule(3e-4, ((6, 1e-4),)),
        )
        res1, res2 = tr.train_mutual(default_dataset, config)
        r1 = tr.evaluate_model(res1.model, default_dataset).cmc[1]
        r2 = tr.evaluate_model(res2.model, default_dataset).cmc[1]
        gap = tr.global_matrix_gap(res1.model, res2.model, default_dataset)
        return (r1 + r2) / 2.0, gap

    return {"on": run(0.01), "off": run(0.0)}


# ---------------------------------------------------------------------------
# criteria


def test_dp_matches_exhaustive_enumeration():
    def enumerate_total(d):
        h = d.shape[0]
        best = np.inf
        for downs in combinations(range(2 * h - 2), h - 1):
            i = j = 0
            total = d[0, 0]
            for move in range(2 * h - 2):
                if move in downs:
                    i += 1
                else:
                    j += 1
                total += d[i, j]
            best = min(best, total)
        return best

    rng = np.random.default_rng(12345)
    start = time.time()
    worst = 0.0
    for _ in range(1000):
        h = int(rng.integers(1, 7))
        d = rng.uniform(size=(h, h))
        got = al.shortest_path(d).total
        worst = max(worst, abs(got - enumerate_total(d)))
    elapsed = time.time() - start
    _verdict(
        "dp-oracle",
        worst < 1e-12 and elapsed < 10.0,
        f"max |dp - enumeration| {worst:.2e} over 1000 matrices in {elapsed:.1f}s",
    )


def test_part_distance_bounds_and_monotonicity():
    rng = np.random.default_rng(77)
    all_in_range = True
    for _ in range(10_000):
        f = rng.normal(scale=rng.uniform(0.01, 30), size=3)
        g = rng.normal(scale=rng.uniform(0.01, 30), size=3)
        d = float(al.squash_distance(np.sqrt(np.sum((f - g) ** 2) + ad.NORM_EPS)))
        if not (0.0 <= d < 1.0):
            all_in_range = False
            break
    f = rng.normal(size=(7, 8))
    self_d = al.part_distance_matrix(f, f)
    self_ok = bool(np.all(np.diag(self_d) <= 1e-6))
    direction = rng.normal(size=(7, 8))
    scales = np.linspace(0.1, 8.0, 12)
    diag_values = [
        float(np.trace(al.part_distance_matrix(f, f + s * direction))) for s in scales
    ]
    monotone = bool(np.all(np.diff(diag_values) > 0))
    _verdict(
        "squash-bounds",
        all_in_range and self_ok and monotone,
        f"range ok={all_in_range} self<=1e-6={self_ok} monotone={monotone}",
    )


def test_gradient_suite():
    rng = np.random.default_rng(2718)
    failures = []

    def check(name, builder, x0, tol=1e-4, pin=False):
        report = ad.grad_check(builder, x0, tol=tol, pin_stops=pin)
        if not report.passed:
            failures.append(f"{name}={report.max_rel_err:.2e}")

    # every enumerated primitive
    y34 = rng.normal(size=(3, 4))
    w42 = rng.normal(size=(4, 2))
    conv_w = rng.normal(size=(3, 2, 3, 3))
    labels = np.array([0, 2, 1])
    p_rows = np.array([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]])
    q_rows = np.array([[0.1, 0.6, 0.3], [0.2, 0.5, 0.3]])
    idx = np.array([0, 5, 5, 11])
    check("add", lambda t, x: ad.sum_(ad.square(ad.add(x, t.leaf(y34)))), rng.normal(size=(3, 4)))
    check("sub", lambda t, x: ad.sum_(ad.square(ad.sub(x, t.leaf(y34)))), rng.normal(size=(3, 4)))
    check("mul", lambda t, x: ad.sum_(ad.mul(x, t.leaf(y34))), rng.normal(size=(3, 4)))
    check("matmul", lambda t, x: ad.sum_(ad.square(ad.matmul(x, t.leaf(w42)))), rng.normal(size=(3, 4)))
    check(
        "conv2d",
        lambda t, x: ad.sum_(ad.square(ad.conv2d(x, t.leaf(conv_w), stride=2, pad=1))),
        rng.normal(size=(2, 2, 6, 6)),
    )
    check("relu", lambda t, x: ad.sum_(ad.square(ad.relu(x))), rng.normal(size=(4, 3)) + 0.05)
    check("square", lambda t, x: ad.sum_(ad.square(x)), rng.normal(size=(7,)))
    check("sum", lambda t, x: ad.square(ad.sum_(x)), rng.normal(size=(5,)))
    check("mean", lambda t, x: ad.sum_(ad.square(ad.mean(x, axes=(0, 2)))), rng.normal(size=(2, 3, 4)))
    check("l2norm", lambda t, x: ad.sum_(ad.l2norm(x, axis=1)), rng.normal(size=(3, 4)))
    check("tanh_half", lambda t, x: ad.sum_(ad.tanh_half(x)), rng.uniform(0.1, 3.0, size=(3, 3)))
    check("softmax", lambda t, x: ad.sum_(ad.square(ad.softmax(x))), rng.normal(size=(3, 4)))
    check("softmax_xent", lambda t, x: ad.softmax_xent(x, labels), rng.normal(size=(3, 4)))
    check("kl_rows_p", lambda t, x: ad.kl_rows(x, t.leaf(q_rows)), p_rows)
    check("kl_rows_q", lambda t, x: ad.kl_rows(t.leaf(p_rows), x), q_rows)
    check(
        "reshape_transpose",
        lambda t, x: ad.sum_(ad.square(ad.transpose(ad.reshape(x, (2, 6)), (1, 0)))),
        rng.normal(size=(3, 4)),
    )
    check("gather", lambda t, x: ad.sum_(ad.square(ad.gather(x, idx))), rng.normal(size=(3, 4)))
    check(
        "stop_gradient",
        lambda t, x: ad.sum_(ad.mul(ad.stop_gradient(x), x)),
        rng.normal(size=(4,)),
        pin=True,
    )

    # squashed norm (the normalized part distance) composed end to end
    g_feat = rng.normal(size=(5, 3))
    check(
        "squash-of-norm",
        lambda t, x: ad.sum_(al.part_distance_node(x, t.leaf(g_feat))),
        rng.normal(size=(5, 3)),
    )
    # DP local distance at a tie-free random point, tighter tolerance
    check("dp-local-distance", lambda t, x: al.local_distance_node(x),
          rng.uniform(0.05, 0.95, size=(6, 6)), tol=1e-6)

    # TriHard batch loss from the embedding features
    locals_val = rng.normal(size=(4, 3, 2))
    batch_labels = np.array([0, 0, 1, 1])

    def trihard_builder(tape, g):
        bd = ls.batch_distances(g, tape.leaf(locals_val), batch_labels, "aligned")
        sel = ls.mine_hard_triplets(bd)
        g_term, l_term = ls.trihard_loss(sel, bd, 0.5, 0.5)
        return ls.total_loss(metric_global=g_term, metric_local=l_term).total

    check("trihard-batch", trihard_builder, rng.normal(size=(4, 3)))

    # full mutual loss (metric + classification mutual, partner frozen)
    m2 = rng.normal(size=(4, 4))
    probs2 = np.full((4, 3), 1 / 3)

    def mutual_builder(tape, logits):
        m1 = ad.l2norm(
            ad.sub(ad.reshape(logits, (4, 1, 3)), ad.reshape(logits, (1, 4, 3))), axis=2
        )
        mm = ls.metric_mutual_loss(m1, tape.leaf(m2))
        cmm = ls.classification_mutual_loss(ad.softmax(logits), tape.leaf(probs2))
        return ad.add(mm, cmm)

    check("full-mutual", mutual_builder, rng.normal(size=(4, 3)), pin=True)

    # full batch loss end to end from image pixels on a 4-image toy batch
    cfg = ModelConfig(input_size=8, channel_plan=(4, 6), feature_height=2,
                      feature_width=2, local_channels=3, num_identities=2)
    model = Model.from_seed(cfg, seed=1)
    pixel_labels = np.array([0, 0, 1, 1])
    partner_m = rng.uniform(0.5, 2.0, size=(4, 4))
    partner_p = np.full((4, 2), 0.5)

    def end_to_end(tape, images):
        nodes = {k: tape.leaf(v, name=k) for k, v in model.params.items()}
        from reidalign.model import backbone_forward, classifier_head, global_branch, local_branch

        cur = images
        for k, stride in enumerate(cfg.stage_strides):
            cout = cfg.channel_plan[k]
            cur = ad.relu(
                ad.add(
                    ad.conv2d(cur, nodes[f"conv{k}.weight"], stride=stride, pad=1),
                    ad.reshape(nodes[f"conv{k}.bias"], (1, cout, 1, 1)),
                )
            )
        gfeat = global_branch(cur)
        lfeat = local_branch(cur, nodes)
        logits = classifier_head(gfeat, nodes)
        bd = ls.batch_distances(gfeat, lfeat, pixel_labels, "aligned")
        sel = ls.mine_hard_triplets(bd)
        g_term, l_term = ls.trihard_loss(sel, bd, 0.5, 0.5)
        cls = ad.softmax_xent(logits, pixel_labels)
        mm = ls.metric_mutual_loss(bd.global_node, tape.leaf(partner_m))
        cmm = ls.classification_mutual_loss(ad.softmax(logits), tape.leaf(partner_p))
        return ls.total_loss(g_term, l_term, cls, mm, cmm).total

    check("end-to-end-from-pixels", end_to_end,
          rng.uniform(0.2, 0.8, size=(4, 3, 8, 8)), pin=True)

    _verdict("gradient-suite", not failures, "; ".join(failures) or "all checks < 1e-4")


def test_metric_mutual_semantics():
    rng = np.random.default_rng(99)
    n = 5
    m1v = rng.normal(size=(n, n))
    m2v = rng.normal(size=(n, n))
    tape = ad.Tape()
    m1 = tape.leaf(m1v)
    m2 = tape.leaf(m2v)
    grads = ad.backprop(ls.metric_mutual_loss(m1, m2))
    want = 2.0 / n**2 * (m1v - m2v)
    grad_err = float(np.max(np.abs(ad.grad_wrt(grads, m1) - want)))

    mixed = ad.mixed_second_derivative(
        lambda t, a, b: ls.metric_mutual_loss(a, b),
        rng.normal(size=(2, 2)),
        rng.normal(size=(2, 2)),
    )
    mixed_err = float(np.max(np.abs(mixed)))
    _verdict(
        "mutual-loss-semantics",
        grad_err < 1e-10 and mixed_err < 1e-8,
        f"grad err {grad_err:.2e}, mixed second derivative {mixed_err:.2e}",
    )


def test_table1_directional_ablation(ablation):
    results, wall, cpu = ablation
    r1 = {v: results[v].cmc[1] for v in results}
    ok = (
        r1["aligned"] >= r1["baseline"] + 0.03
        and r1["aligned"] >= r1["gl-baseline"]
        and cpu < 900.0
    )
    _verdict(
        "table1-ablation",
        ok,
        f"rank-1 aligned={r1['aligned']:.3f} baseline={r1['baseline']:.3f} "
        f"gl={r1['gl-baseline']:.3f}; wall {wall:.0f}s cpu {cpu:.0f}s",
    )


def test_alignment_recovery():
    cfg = SyntheticConfig()
    sigs, _ = identity_signatures(cfg)
    stripes = 7
    stripe_rows = cfg.image_size // stripes
    rng = np.random.default_rng(31415)
    hits = total = 0
    for s in (1, 2):
        for identity in range(cfg.num_identities):
            canonical = render_canonical(sigs[identity], cfg.image_size)
            img_a = np.clip(canonical + rng.normal(0, cfg.noise, canonical.shape), 0, 1)
            shifted = apply_vertical_shift(canonical, s * stripe_rows)
            img_b = np.clip(shifted + rng.normal(0, cfg.noise, canonical.shape), 0, 1)
            f = al.stripe_features(img_a, stripes)
            g = al.stripe_features(img_b, stripes)
            path = al.shortest_path(al.part_distance_matrix(f, g)).path
            median_offset = float(np.median(path.offsets()))
            hits += abs(median_offset - s) <= 1
            total += 1
    fraction = hits / total
    _verdict(
        "alignment-recovery",
        fraction >= 0.8,
        f"{hits}/{total} pairs recovered the injected shift (need >= 80%)",
    )


def test_mutual_learning_effect(mutual_pairs):
    mean_on, gap_on = mutual_pairs["on"]
    mean_off, gap_off = mutual_pairs["off"]
    ok = (mean_on >= mean_off - 0.005) and (gap_on < gap_off)
    _verdict(
        "mutual-effect",
        ok,
        f"rank-1 on={mean_on:.3f} off={mean_off:.3f}; gap on={gap_on:.4f} off={gap_off:.4f}",
    )


def test_retrieval_oracle():
    def brute_ap(rel):
        hits = 0
        total = 0.0
        for k, r in enumerate(rel, start=1):
            if r:
                hits += 1
                total += hits / k
        return total / hits

    worst = 0.0
    single_ok = True
    for trial in range(100):
        rng = np.random.default_rng(trial)
        gallery_ids = rng.integers(0, 15, size=50)
        query_ids = rng.integers(0, 15, size=20)
        rls = [
            rt.RankList(rng.permutation(50), np.sort(rng.uniform(size=50)))
            for _ in range(20)
        ]
        try:
            report = rt.cmc_map(rls, gallery_ids, query_ids)
        except ValueError:
            continue
        aps = []
        hits1 = 0
        counted = 0
        for rl, qid in zip(rls, query_ids):
            rel = gallery_ids[rl.indices] == qid
            if rel.any():
                aps.append(brute_ap(rel))
                hits1 += bool(rel[0])
                counted += 1
        worst = max(worst, abs(report.map - np.mean(aps)))
        worst = max(worst, abs(report.cmc[1] - hits1 / counted))

        # single-ground-truth gallery: mAP dominates rank-1
        unique_gallery = np.arange(50)
        rls_single = [
            rt.RankList(rng.permutation(50), np.sort(rng.uniform(size=50)))
            for _ in range(20)
        ]
        rep_single = rt.cmc_map(rls_single, unique_gallery, rng.integers(0, 50, size=20))
        if rep_single.map < rep_single.cmc[1] - 1e-12:
            single_ok = False
    _verdict(
        "retrieval-oracle",
        worst < 1e-12 and single_ok,
        f"max |metric - brute force| {worst:.2e}; single-gt mAP>=r1 {single_ok}",
    )


def test_rerank_degeneracy():
    ok = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(6, 5))
        g = rng.normal(size=(18, 5))
        q_g = rt.pairwise_distances(q, g)
        final = rt.k_reciprocal_rerank(
            q_g,
            rt.pairwise_distances(q, q),
            rt.pairwise_distances(g, g),
            rt.RerankParams(k1=6, k2=2, lam=1.0),
        )
        for i in range(6):
            if not np.array_equal(
                np.argsort(final[i], kind="stable"), np.argsort(q_g[i], kind="stable")
            ):
                ok = False
    _verdict("rerank-degeneracy", ok, "lambda=1 preserved every per-query ordering")


def test_humaneval_protocol_properties():
    rng = np.random.default_rng(654)
    ok_single = ok_multi = True
    for _ in range(1000):
        order = [int(x) for x in rng.permutation(70)]
        gt = int(rng.integers(0, 70))
        cs = he.build_candidate_set_single_gt(0, order, gt, int(rng.integers(1 << 30)))
        if sum(cs.gt_flags) != 1 or cs.candidates[:9] != order[:9]:
            ok_single = False
        if gt in order[:10]:
            if cs.candidates != order[:10]:
                ok_single = False
        elif cs.candidates[9] != gt:
            ok_single = False

        gts = {int(x) for x in rng.choice(70, size=int(rng.integers(1, 7)), replace=False)}
        cm = he.build_candidate_set_multi_gt(0, order, gts, int(rng.integers(1 << 30)))
        if not gts.issubset(cm.candidates) or sum(cm.gt_flags) != len(gts):
            ok_multi = False
        # only the lowest-ranked non-ground-truth entries may be displaced
        displaced = [c for c in order[:50] if c not in cm.candidates]
        if displaced:
            non_gt_positions = [i for i, c in enumerate(order[:50]) if c not in gts]
            worst_allowed = set(
                order[i] for i in non_gt_positions[-len(displaced):]
            )
            if set(displaced) != worst_allowed:
                ok_multi = False
    _verdict(
        "humaneval-protocol",
        ok_single and ok_multi,
        f"single={ok_single} multi={ok_multi} over 1000 rank lists",
    )
