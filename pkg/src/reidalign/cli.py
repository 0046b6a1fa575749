"""Command-line entry point for the whole pipeline.

Subcommands: gen-data, train, train-mutual, embed, eval, align-viz,
humaneval-build, humaneval-serve, humaneval-score, ablation.  Every run
writes a settings manifest (resolved flags plus whether each value is the
reference-paper setting or a desk-scale substitute) into its --out
directory.  Report paths emit matplotlib figures next to the CSV/JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import figures
from . import humaneval as he
from . import retrieval as rt
from . import training as tr
from .alignment import part_distance_matrix, path_dump, render_alignment, shortest_path, stripe_features
from .model import Model, ModelConfig, config_from_text, config_to_text

# Values lifted straight from the reference training setup; anything else
# in a settings manifest is a desk-scale substitute.
PAPER_VALUES = {
    "margin_global": 0.5,
    "margin_local": 0.5,
    "metric_mutual_weight": 0.001,
    "cls_mutual_weight": 0.01,
    "k": 4,
    "lr": 1e-3,
    "mutual_lr": 3e-4,
}


def write_settings(out_dir: Path, command: str, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {}
    for key, value in settings.items():
        if key in PAPER_VALUES and value == PAPER_VALUES[key]:
            provenance[key] = "paper"
        else:
            provenance[key] = "desk-scale"
    blob = {"command": command, "settings": settings, "provenance": provenance}
    (out_dir / "settings.json").write_text(json.dumps(blob, indent=1, default=str))


def _parse_milestones(text: str) -> tuple:
    if not text:
        return ()
    pairs = []
    for part in text.split(","):
        epoch, _, rate = part.partition(":")
        pairs.append((int(epoch), float(rate)))
    return tuple(pairs)


def _load_model(checkpoint_dir: Path) -> Model:
    checkpoint_dir = Path(checkpoint_dir)
    cfg_path = checkpoint_dir / "model.cfg"
    ckpt_path = checkpoint_dir / "model.arwt"
    if not cfg_path.exists() or not ckpt_path.exists():
        raise FileNotFoundError(
            f"{checkpoint_dir}: expected model.cfg and model.arwt"
        )
    config = config_from_text(cfg_path.read_text())
    return Model(config, ad.load_checkpoint(ckpt_path))


def _save_model(out_dir: Path, result: tr.TrainResult) -> None:
    (Path(out_dir) / "model.cfg").write_text(config_to_text(result.model_config))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    extra = {} if args.palette is None else {"palette_mode": args.palette}
    cfg = dt.SyntheticConfig(
        num_identities=args.num_identities,
        images_per_identity=args.images_per_identity,
        image_size=args.image_size,
        signature_length=args.signature_length,
        shift_rows=args.shift,
        occlusion_fraction=args.occlusion,
        stretch_range=(args.stretch_low, args.stretch_high),
        confuser_fraction=args.confusers,
        noise=args.noise,
        seed=args.seed,
        train_identities=args.train_identities,
        queries_per_identity=args.queries_per_identity,
        cameras=args.cameras,
        **extra,
    )
    out = Path(args.out)
    manifest = dt.generate_synthetic(cfg, out)
    write_settings(out, "gen-data", vars(args))
    print(f"wrote {manifest}")
    return 0


def _train_config(args, variant=None) -> tr.TrainConfig:
    milestones = _parse_milestones(args.milestones)
    return tr.TrainConfig(
        variant=variant or args.variant,
        epochs=args.epochs,
        seed=args.seed,
        partner_seed=getattr(args, "partner_seed", args.seed + 1),
        margin_global=args.margin_global,
        margin_local=args.margin_local,
        local_weight=args.local_weight,
        metric_mutual_weight=getattr(args, "metric_mutual_weight", 0.0),
        cls_mutual_weight=getattr(args, "cls_mutual_weight", 0.0),
        schedule=tr.LrSchedule(args.lr, milestones),
        batch=tr.PKBatchSpec(args.p, args.k, args.batches_per_epoch),
        use_augment=not args.no_augment,
    )


def cmd_train(args) -> int:
    dataset = dt.load_manifest(args.data)
    config = _train_config(args)
    out = Path(args.out)
    result = tr.train_single(dataset, config, out_dir=out)
    _save_model(out, result)
    write_settings(out, "train", {**vars(args), "diverged": result.diverged})
    figures.save_loss_curves(out / "metrics.csv", out / "loss_curves.png")
    report = tr.evaluate_model(result.model, dataset)
    (out / "eval.json").write_text(report.to_json())
    print(f"{config.variant}: rank-1 {report.cmc[1]:.3f}  mAP {report.map:.3f}")
    if result.diverged:
        print("warning: training diverged; kept the last good checkpoint", file=sys.stderr)
    return 0


def cmd_train_mutual(args) -> int:
    dataset = dt.load_manifest(args.data)
    config = _train_config(args)
    out = Path(args.out)
    res1, res2 = tr.train_mutual(dataset, config, out_dir=out)
    for k, res in enumerate((res1, res2), start=1):
        _save_model(out / f"model{k}", res)
        figures.save_loss_curves(
            out / f"model{k}" / "metrics.csv", out / f"model{k}" / "loss_curves.png"
        )
        report = tr.evaluate_model(res.model, dataset)
        (out / f"model{k}" / "eval.json").write_text(report.to_json())
        print(f"model{k}: rank-1 {report.cmc[1]:.3f}  mAP {report.map:.3f}")
    gap = tr.global_matrix_gap(res1.model, res2.model, dataset)
    write_settings(out, "train-mutual", {**vars(args), "distance_matrix_gap": gap})
    print(f"inter-model distance gap: {gap:.5f}")
    return 0


def cmd_embed(args) -> int:
    dataset = dt.load_manifest(args.data)
    model = _load_model(Path(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in args.splits.split(","):
        store = tr.extract_embeddings(model, dataset, split, with_locals=args.with_local)
        rt.save_embeddings(out / f"{split}.arid", store)
        if args.with_local:
            dt.write_art(out / f"{split}_locals.art", store.local_features)
        print(f"{split}: {len(store)} embeddings of dim {store.features.shape[1]}")
    write_settings(out, "embed", vars(args))
    return 0


def cmd_eval(args) -> int:
    queries = rt.load_embeddings(args.query)
    gallery = rt.load_embeddings(args.gallery)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    protocol = {
        "same_camera_excluded": not args.no_camera_exclusion,
        "reranked": bool(args.rerank),
        "combined_local": args.local_weight > 0,
    }
    exclude = not args.no_camera_exclusion

    if args.local_weight > 0:
        if not args.query_locals or not args.gallery_locals:
            raise ValueError("eval: --local-weight needs --query-locals and --gallery-locals")
        gallery.local_features = dt.read_art(args.gallery_locals)
        q_locals = dt.read_art(args.query_locals)
        rank_lists = [
            rt.combined_rank(
                queries.features[i],
                q_locals[i],
                gallery,
                args.local_weight,
                queries.identities[i],
                queries.cameras[i],
                exclude,
            )
            for i in range(len(queries))
        ]
    elif args.rerank:
        k1 = min(args.k1, len(gallery) - 1)
        k2 = min(args.k2, k1)
        params = rt.RerankParams(k1=k1, k2=k2, lam=args.lam)
        final = rt.k_reciprocal_rerank(
            rt.pairwise_distances(queries.features, gallery.features),
            rt.pairwise_distances(queries.features, queries.features),
            rt.pairwise_distances(gallery.features, gallery.features),
            params,
        )
        rank_lists = []
        for i in range(len(queries)):
            mask = ~(
                (gallery.identities == queries.identities[i])
                & (gallery.cameras == queries.cameras[i])
            ) if exclude else np.ones(len(gallery), dtype=bool)
            cand = np.where(mask)[0]
            order = np.argsort(final[i, cand], kind="stable")
            rank_lists.append(rt.RankList(cand[order], final[i, cand][order]))
        protocol.update({"k1": k1, "k2": k2, "lambda": args.lam})
    else:
        rank_lists = rt.rank_all(queries, gallery, exclude)

    report = rt.cmc_map(rank_lists, gallery.identities, queries.identities, protocol=protocol)
    (out / "report.json").write_text(report.to_json())
    with open(out / "cmc.csv", "w") as fh:
        fh.write("rank,fraction\n")
        for r, v in sorted(report.cmc.items()):
            fh.write(f"{r},{v:.6f}\n")
    figures.save_cmc_curve(report.cmc, out / "cmc.png")
    write_settings(out, "eval", vars(args))
    print(report.to_json())
    return 0


def cmd_align_viz(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img_a = dt.load_image(args.image_a)
    img_b = dt.load_image(args.image_b)
    if args.checkpoint:
        model = _load_model(Path(args.checkpoint))
        _, locals_a = model.embed(img_a[None])
        _, locals_b = model.embed(img_b[None])
        f, g = locals_a[0], locals_b[0]
    else:
        f = stripe_features(img_a, args.stripes)
        g = stripe_features(img_b, args.stripes)
    d = part_distance_matrix(f, g)
    result = shortest_path(d)
    (out / "alignment.svg").write_text(
        render_alignment(f, g, result.path, title=f"local distance {result.total:.3f}")
    )
    (out / "path.txt").write_text(path_dump(d, result.path) + "\n")
    figures.save_alignment_figure(d, result.path.steps, out / "alignment.png")
    write_settings(out, "align-viz", vars(args))
    print(f"local distance {result.total:.4f}; offsets {list(result.path.offsets())}")
    return 0


def cmd_humaneval_build(args) -> int:
    dataset = dt.load_manifest(args.data)
    model = _load_model(Path(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    queries = tr.extract_embeddings(model, dataset, "query")
    gallery = tr.extract_embeddings(model, dataset, "gallery")
    query_rows = dataset.indices("query")
    gallery_rows = dataset.indices("gallery")
    rank_lists = rt.rank_all(queries, gallery, exclude_same_camera=not args.no_camera_exclusion)

    set_size = args.set_size or (10 if args.mode == "single" else 50)
    set_size = min(set_size, min(len(rl.indices) for rl in rank_lists))
    ranked_refs, gt_sets = [], []
    for rl, qid in zip(rank_lists, queries.identities):
        refs = [int(gallery_rows[j]) for j in rl.indices]
        gts = [
            int(gallery_rows[j])
            for j in rl.indices
            if gallery.identities[j] == qid
        ]
        ranked_refs.append(refs)
        gt_sets.append(gts[:1] if args.mode == "single" else gts)
    annotators = [a.strip() for a in args.annotators.split(",") if a.strip()]
    sessions = he.build_sessions(
        ranked_refs,
        gt_sets,
        [int(r) for r in query_rows],
        annotators,
        args.mode,
        seed=args.seed,
        set_size=set_size,
    )
    (out / "sessions.json").write_text(he.sessions_to_json(sessions, args.mode))
    (out / "events.jsonl").touch()
    write_settings(out, "humaneval-build", {**vars(args), "resolved_set_size": set_size})
    print(f"built {len(sessions)} sessions x {len(rank_lists)} items (set size {set_size})")
    return 0


def cmd_humaneval_serve(args) -> int:
    store = he.SessionStore.load(args.sessions, args.events)
    dataset = dt.load_manifest(args.data)

    def loader(ref: int):
        if not (0 <= ref < len(dataset)):
            raise KeyError(ref)
        return dataset.load_image(ref)

    static = Path(args.static) if args.static else None
    print(f"serving on http://{args.host}:{args.port}/ (ctrl-c to stop)")
    he.serve(store, loader, static_dir=static, host=args.host, port=args.port)
    return 0


def cmd_humaneval_score(args) -> int:
    store = he.SessionStore.load(args.sessions, args.events)
    report = store.report()
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "human_report.json").write_text(text)
        write_settings(out, "humaneval-score", vars(args))
    print(text)
    return 0


def cmd_ablation(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        dataset = dt.load_manifest(args.data)
    else:
        dataset = dt.load_manifest(
            dt.generate_synthetic(dt.SyntheticConfig(seed=args.seed), out / "data")
        )
    rows = []
    for variant in tr.VARIANTS:
        config = tr.TrainConfig(
            variant=variant,
            epochs=args.epochs,
            seed=args.seed,
            batch=tr.PKBatchSpec(args.p, args.k, args.batches_per_epoch),
            schedule=tr.LrSchedule(args.lr, _parse_milestones(args.milestones)),
        )
        result = tr.train_single(dataset, config, out_dir=out / variant)
        _save_model(out / variant, result)
        report = tr.evaluate_model(result.model, dataset)
        rows.append(
            {
                "variant": variant,
                "rank1": report.cmc[1],
                "r5": report.cmc[5],
                "map": report.map,
                "diverged": result.diverged,
            }
        )
        print(f"{variant:12s} rank-1 {report.cmc[1]:.3f}  mAP {report.map:.3f}")
    with open(out / "ablation.csv", "w") as fh:
        fh.write("variant,rank1,r5,map\n")
        for row in rows:
            fh.write(f"{row['variant']},{row['rank1']:.6f},{row['r5']:.6f},{row['map']:.6f}\n")
    figures.save_ablation_chart(rows, out / "ablation.png")
    write_settings(out, "ablation", vars(args))
    lines = ["| variant | rank-1 | top-5 | mAP |", "|---|---|---|---|"]
    for row in rows:
        lines.append(
            f"| {row['variant']} | {row['rank1']:.3f} | {row['r5']:.3f} | {row['map']:.3f} |"
        )
    table = "\n".join(lines)
    (out / "ablation.md").write_text(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p, mutual=False):
    p.add_argument("--data", required=True, help="manifest csv")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=int, default=8, help="identities per batch")
    p.add_argument("--k", type=int, default=4, help="images per identity")
    p.add_argument("--batches-per-epoch", type=int, default=50)
    p.add_argument("--margin-global", type=float, default=0.5)
    p.add_argument("--margin-local", type=float, default=0.5)
    p.add_argument("--local-weight", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-3 if not mutual else 3e-4)
    p.add_argument("--milestones", default="16:1e-4,32:1e-5",
                   help="comma list of epoch:rate drops")
    p.add_argument("--no-augment", action="store_true")
    if mutual:
        p.add_argument("--partner-seed", type=int, default=1)
        p.add_argument("--metric-mutual-weight", type=float, default=0.001)
        p.add_argument("--cls-mutual-weight", type=float, default=0.01)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reidalign",
        description="stripe-aligned embedding learning and retrieval, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic striped dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--num-identities", type=int, default=48)
    p.add_argument("--images-per-identity", type=int, default=10)
    p.add_argument("--train-identities", type=int, default=32)
    p.add_argument("--queries-per-identity", type=int, default=3)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--image-size", type=int, default=56)
    p.add_argument("--signature-length", type=int, default=14)
    p.add_argument("--shift", type=int, default=10)
    p.add_argument("--occlusion", type=float, default=0.25)
    p.add_argument("--stretch-low", type=float, default=0.85)
    p.add_argument("--stretch-high", type=float, default=1.15)
    p.add_argument("--confusers", type=float, default=0.25)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--palette", choices=("independent", "shared"), default=None,
                   help="band colors per identity (default: generator default)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--variant", choices=tr.VARIANTS, default="aligned")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-mutual", help="train two models with mutual losses")
    p.add_argument("--variant", choices=tr.VARIANTS, default="aligned")
    _add_train_flags(p, mutual=True)
    p.set_defaults(func=cmd_train_mutual)

    p = sub.add_parser("embed", help="extract embeddings for manifest splits")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="directory with model.cfg/model.arwt")
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="query,gallery")
    p.add_argument("--with-local", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="CMC/mAP evaluation of saved embeddings")
    p.add_argument("--query", required=True, help="query .arid file")
    p.add_argument("--gallery", required=True, help="gallery .arid file")
    p.add_argument("--out", required=True)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--local-weight", type=float, default=0.0)
    p.add_argument("--query-locals", help="query locals .art file")
    p.add_argument("--gallery-locals", help="gallery locals .art file")
    p.add_argument("--no-camera-exclusion", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("align-viz", help="alignment SVG/heatmap for two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--out", required=True)
    p.add_argument("--stripes", type=int, default=7)
    p.add_argument("--checkpoint", help="use model local features instead of raw stripes")
    p.set_defaults(func=cmd_align_viz)

    p = sub.add_parser("humaneval-build", help="build annotator sessions from a model")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--annotators", default="ann1")
    p.add_argument("--mode", choices=("single", "multi"), default="multi")
    p.add_argument("--set-size", type=int, default=0, help="0 = protocol default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-camera-exclusion", action="store_true")
    p.set_defaults(func=cmd_humaneval_build)

    p = sub.add_parser("humaneval-serve", help="serve the annotation API and UI")
    p.add_argument("--sessions", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--static", help="directory with the built web client")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_humaneval_serve)

    p = sub.add_parser("humaneval-score", help="score recorded answers")
    p.add_argument("--sessions", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_humaneval_score)

    p = sub.add_parser("ablation", help="train all three variants and compare")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="reuse an existing manifest instead of generating")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--batches-per-epoch", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--milestones", default="7:3e-4")
    p.set_defaults(func=cmd_ablation)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
