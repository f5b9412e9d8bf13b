"""Command-line driver: offline aggregation/indexing/evaluation plus the server.

Subcommands: aggregate | index | query | eval | synth | serve. All respect
--seed, falling back to the CLUSTERLENS_SEED environment variable, then 0.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import aggregation, evaluation, synth
from .index import build_index, load_index, normalize_query, save_index, search
from .store import (
    as_embedding_map,
    as_feature_grid,
    load_manifest,
    load_masks,
    load_weights,
    read_pack,
    save_manifest,
    write_pack,
)
from .tensor import EmbeddingMap


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("CLUSTERLENS_SEED")
    return int(env) if env else 0


def _require(path: Path) -> Path:
    if not path.exists():
        print(f"error: {path} does not exist", file=sys.stderr)
        raise SystemExit(2)
    return path


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p)


def cmd_synth(args) -> int:
    h, w = (int(p) for p in args.grid.split("x"))
    spec = synth.SynthSpec(
        image_count=args.images,
        grid_dims=(h, w),
        channels=args.channels,
        concept_count=args.concepts,
        concept_separation=args.separation,
        object_patch_range=(args.patch_min, args.patch_max),
        noise_scale=args.noise_scale,
        patch_px=args.patch_px,
        seed=_resolve_seed(args.seed),
    )
    result = synth.generate(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    summary = write_pack(result.maps, out / "dense.epk")
    save_manifest(result.manifest, out / "manifest.json")
    query_maps = [
        EmbeddingMap(1, 1, q.values[None], image_id=q.label)
        for _, q in sorted(result.queries.items())
    ]
    write_pack(query_maps, out / "queries.epk")
    print(f"wrote {summary['records']} dense records ({summary['bytes']} bytes)")
    print(f"wrote manifest with {len(result.manifest.annotations)} annotations")
    print(f"wrote {len(query_maps)} query vectors")
    return 0


def cmd_aggregate(args) -> int:
    input_path = _require(Path(args.input))
    seed = _resolve_seed(args.seed)
    config = aggregation.AggregationConfig(
        method=args.method if args.method in aggregation.METHODS else "kmeans",
        cluster_count=args.k,
        adaptive_candidates=_int_list(args.adaptive_candidates),
        anchors_divisions=_int_list(args.divisions),
        seed=seed,
    )
    weights = None
    if args.method == "attention":
        weights = load_weights(_require(Path(args.weights)))
    masks_dir = Path(args.masks) if args.masks else None
    if args.method == "region_proposal" and masks_dir is None:
        print("error: --masks is required for region_proposal", file=sys.stderr)
        return 2
    mix_vectors = None
    if args.mix_global:
        mix_vectors = {}
        for rec in read_pack(_require(Path(args.mix_global))):
            if rec.vec_count != 1:
                print(
                    f"error: global pack record {rec.image_id!r} has {rec.vec_count} vectors",
                    file=sys.stderr,
                )
                return 2
            mix_vectors[rec.image_id] = rec.vectors[0]

    def reps_stream():
        for rec in read_pack(input_path):
            if args.method == "attention":
                reps = aggregation.attention_aggregate(as_feature_grid(rec), weights, config)
            else:
                emap = as_embedding_map(rec)
                if args.method == "kmeans":
                    reps = aggregation.kmeans_cluster(emap, config)
                elif args.method in ("ag_t", "ag_f"):
                    reps = aggregation.agglomerative_cluster(
                        emap, config, connectivity=args.method == "ag_t"
                    )
                elif args.method == "adaptive_kmeans":
                    reps = aggregation.adaptive_kmeans(emap, config)
                elif args.method == "anchors":
                    reps = aggregation.anchors_aggregate(emap, config.anchors_divisions)
                elif args.method == "region_proposal":
                    mask_path = _require(masks_dir / f"{rec.image_id}.json")
                    reps = aggregation.region_mask_aggregate(emap, load_masks(mask_path))
                elif args.method == "global":
                    reps = aggregation.mean_aggregate(emap)
                else:
                    raise ValueError(f"unsupported method {args.method!r}")
            if mix_vectors is not None:
                if rec.image_id not in mix_vectors:
                    raise ValueError(f"no global vector for image {rec.image_id!r}")
                reps = aggregation.mix_global(reps, mix_vectors[rec.image_id])
            yield reps

    summary = write_pack(reps_stream(), args.output)
    print(f"wrote {summary['records']} representative records ({summary['bytes']} bytes)")
    return 0


def cmd_index(args) -> int:
    paths = [_require(Path(p)) for p in args.inputs]
    idx = build_index(paths)
    save_index(idx, args.output)
    print(f"indexed {idx.vector_count} vectors over {idx.image_count} images")
    return 0


def cmd_query(args) -> int:
    vector_path = _require(Path(args.vector_file))
    raw = np.fromfile(vector_path, dtype="<f4")
    if args.server:
        import httpx

        resp = httpx.post(
            args.server.rstrip("/") + "/v1/query",
            json={"vector": [float(x) for x in raw], "top_k": args.top_k},
            timeout=30.0,
        )
        if resp.status_code != 200:
            print(f"error: server returned {resp.status_code}: {resp.text}", file=sys.stderr)
            return 1
        for item in resp.json()["results"]:
            print(f"{item['image_id']}\t{item['score']:.6f}")
        return 0
    idx = load_index(_require(Path(args.index)))
    query = normalize_query(raw, label=args.label)
    ranked = search(idx, query, args.top_k)
    for image_id, score in ranked.entries:
        print(f"{image_id}\t{score:.6f}")
    return 0


def cmd_eval(args) -> int:
    idx = load_index(_require(Path(args.index)))
    manifest = load_manifest(_require(Path(args.manifest)))
    if args.rare_threshold is not None:
        rare = evaluation.derive_rare_set(manifest, args.rare_threshold)
        manifest = type(manifest)(
            images=manifest.images,
            categories=tuple(
                type(c)(c.id, c.name, rare=c.id in rare) for c in manifest.categories
            ),
            annotations=manifest.annotations,
        )
    by_name = {c.name: c.id for c in manifest.categories}
    queries = {}
    for rec in read_pack(_require(Path(args.queries))):
        if rec.image_id in by_name:
            queries[by_name[rec.image_id]] = normalize_query(rec.vectors[0], label=rec.image_id)
    spec = evaluation.EvalSpec(
        dataset=manifest,
        cutoff=args.cutoff,
        size_band=args.size_band if args.size_band > 0 else None,
        category_filter="rare_only" if args.rare_only else "all",
    )
    report = evaluation.evaluate(idx, queries, spec)
    evaluation.save_report(report, args.output)
    if args.csv:
        evaluation.save_report_csv(report, args.csv)
    for key, value in sorted(report.to_dict()["aggregates"].items()):
        print(f"{key}: {'n/a' if value is None else f'{value:.4f}'}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    idx = load_index(_require(Path(args.index)))
    app = create_app(idx, max_top_k=args.max_top_k, encoder_url=args.encoder_url)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterlens",
        description="Object-centric open-vocabulary image retrieval over embedding packs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-concept benchmark dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--images", type=int, default=1000)
    p.add_argument("--grid", default="14x14")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--separation", type=float, default=60.0)
    p.add_argument("--noise-scale", type=float, default=0.25)
    p.add_argument("--patch-min", type=int, default=1)
    p.add_argument("--patch-max", type=int, default=4)
    p.add_argument("--patch-px", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("aggregate", help="compress dense packs into representative packs")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument(
        "--method",
        required=True,
        choices=[
            "kmeans", "ag_t", "ag_f", "region_proposal", "anchors",
            "attention", "adaptive_kmeans", "global",
        ],
    )
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--divisions", default="2,3,5,7")
    p.add_argument("--adaptive-candidates", default="5,10,15,20")
    p.add_argument("--masks", default=None, help="directory of <image_id>.json mask files")
    p.add_argument("--weights", default=None, help="WGT1 weight manifest (attention method)")
    p.add_argument("--mix-global", default=None, help="pack of per-image global vectors to append")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("index", help="build and persist a flat index from packs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank images against a raw f32 query vector file")
    p.add_argument("--index", default=None)
    p.add_argument("--vector-file", required=True)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--label", default=None)
    p.add_argument("--server", default=None, help="query a running service instead of a local index")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="evaluate retrieval quality against a manifest")
    p.add_argument("--index", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--queries", required=True, help="pack of per-category query vectors")
    p.add_argument("--cutoff", type=int, default=50)
    p.add_argument("--size-band", type=float, default=evaluation.SMALL_MEDIUM_MAX_AREA,
                   help="max instance area in px^2 for the size split; 0 disables")
    p.add_argument("--rare-only", action="store_true")
    p.add_argument("--rare-threshold", type=float, default=None,
                   help="re-derive rare flags from annotation frequency")
    p.add_argument("--output", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the HTTP query API over an index")
    p.add_argument("--index", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--max-top-k", type=int, default=1000)
    p.add_argument("--encoder-url", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "query" and not args.server and not args.index:
        print("error: --index is required without --server", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # _require; keep main() returning codes
        return int(e.code or 0)


if __name__ == "__main__":
    raise SystemExit(main())
