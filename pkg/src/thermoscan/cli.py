"""Command-line entry points for the full pipeline.

Subcommands: synth, split, stats, train, embed, predict, eval, compress,
serve. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import encoder as enc
from .checkpoint import load_checkpoint
from .errors import ThermoscanError
from .evaluation import ScoredSample, evaluate_scored_samples
from .index import (
    DEFAULT_DELTA,
    DEFAULT_K,
    VERDICT_ANOMALOUS,
    aggregate_all_modules,
    build_index,
    compress_index,
    predict_batch,
)
from .manifest import load_images
from .preprocess import PlantStats, stats_by_plant
from .splits import DatasetSplit, select_images, split_dataset
from .store import read_store, write_store
from .synth import parse_synth_config, synth_generate, write_dataset
from .trainer import TrainConfig, train


def _load_split(path: str) -> DatasetSplit:
    return DatasetSplit.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _load_stats(path: str) -> dict[int, PlantStats]:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    return {
        int(pid): PlantStats(plant_id=int(pid), mean=v["mean"], std=v["std"])
        for pid, v in rec.items()
    }


def _write_json(path: str, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    config = parse_synth_config(args.config)
    images = synth_generate(config)
    write_dataset(images, args.out)
    n_anom = sum(1 for im in images if im.is_anomalous)
    print(f"wrote {len(images)} images ({n_anom} anomalous) to {args.out}")
    return 0


def cmd_split(args) -> int:
    images = load_images(args.data)
    split = split_dataset(images, ratio=args.ratio, seed=args.seed)
    _write_json(args.out, split.to_dict())
    print(f"train {len(split.train)} / test {len(split.test)} images -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    images = load_images(args.data)
    if args.split:
        images = select_images(images, _load_split(args.split).train)
    stats = stats_by_plant(images)
    _write_json(
        args.out, {str(pid): {"mean": s.mean, "std": s.std} for pid, s in stats.items()}
    )
    print(f"stats for plants {sorted(stats)} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    images = load_images(args.data)
    if args.split:
        images = select_images(images, _load_split(args.split).train)
    else:
        images = select_images(images, split_dataset(images, seed=args.seed).train)
    val_images = load_images(args.val_data) if args.val_data else None
    config = TrainConfig(
        total_steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        tau=args.tau,
        seed=args.seed,
        objective=args.objective,
        sampling=args.sampling,
        leaveout_classes=frozenset(args.leaveout.split(",")) if args.leaveout else frozenset(),
        checkpoint_every=args.checkpoint_every,
    )
    result = train(config, images, args.out_dir, validation_images=val_images)
    final = result.final_checkpoint
    print(f"trained {config.total_steps} steps; final checkpoint {final.path}")
    return 0


def cmd_embed(args) -> int:
    params, _momentum, _step, _seed = load_checkpoint(args.checkpoint)
    images = load_images(args.data)
    if args.split:
        split = _load_split(args.split)
        ids = split.train if args.subset == "train" else split.test
        images = select_images(images, ids)
    stats = _load_stats(args.stats)
    embeddings = enc.embed(params, images, stats)
    write_store(args.out, embeddings)
    print(f"embedded {len(embeddings)} images -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    index = build_index(read_store(args.store))
    targets = read_store(args.target_store)
    predictions = predict_batch(index, targets, k=args.k, delta=args.delta)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(
                json.dumps(
                    {
                        "image_id": p.image_id,
                        "module_id": p.module_id,
                        "score": p.score,
                        "verdict": p.verdict,
                        "k": p.k,
                        "delta": p.delta,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    n_anom = sum(1 for p in predictions if p.verdict == VERDICT_ANOMALOUS)
    print(f"predicted {len(predictions)} images ({n_anom} anomalous) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    predictions = []
    with open(args.predictions, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                predictions.append(json.loads(line))
    labelled = {e.image_id: e for e in read_store(args.target_store)}
    image_samples = []
    from .index import Prediction

    pred_objs = []
    for p in predictions:
        ref = labelled.get(p["image_id"])
        if ref is None or ref.binary_label is None:
            raise ThermoscanError(f"no label for image {p['image_id']}")
        image_samples.append(
            ScoredSample(
                score=p["score"],
                label=ref.binary_label,
                fault_class=ref.fault_class,
                module_id=p["module_id"],
            )
        )
        pred_objs.append(
            Prediction(
                image_id=p["image_id"],
                module_id=p["module_id"],
                score=p["score"],
                verdict=p["verdict"],
                k=p["k"],
                delta=p["delta"],
            )
        )
    delta = pred_objs[0].delta if pred_objs else DEFAULT_DELTA

    module_truth: dict[int, bool] = {}
    for s in image_samples:
        module_truth[s.module_id] = module_truth.get(s.module_id, False) or s.is_anomalous
    verdicts = aggregate_all_modules(pred_objs)
    module_samples = [
        ScoredSample(
            score=v.score,
            label="anomalous" if module_truth[v.module_id] else "normal",
            module_id=v.module_id,
        )
        for v in verdicts
    ]
    tp = fp = tn = fn = 0
    for v in verdicts:
        anomalous = module_truth[v.module_id]
        flagged = v.verdict == VERDICT_ANOMALOUS
        tp += anomalous and flagged
        fn += anomalous and not flagged
        fp += (not anomalous) and flagged
        tn += (not anomalous) and not flagged

    report = evaluate_scored_samples(
        image_samples,
        delta=delta,
        module_samples=module_samples,
        module_verdict_counts=(tp, fp, tn, fn),
    )
    _write_json(args.out, report.to_dict())
    print(report.render_text())
    return 0


def cmd_compress(args) -> int:
    embeddings = read_store(args.store)
    index = compress_index(build_index(embeddings), args.clusters, seed=args.seed)
    compressed = [
        enc.Embedding(
            z=index.vectors[i],
            image_id=int(index.image_ids[i]),
            plant_id=int(index.plant_ids[i]),
            module_id=int(index.module_ids[i]),
            binary_label="anomalous" if index.labels[i] else "normal",
        )
        for i in range(index.count)
    ]
    write_store(args.out, compressed)
    print(f"compressed {len(embeddings)} -> {index.count} centroids -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    import os

    import uvicorn

    from .service import create_app

    data_root = args.data_root or os.environ.get("THERMOSCAN_DATA_ROOT")
    if not data_root:
        raise ThermoscanError("serve needs --data-root or THERMOSCAN_DATA_ROOT")
    host = args.host or os.environ.get("THERMOSCAN_BIND", "127.0.0.1")
    app = create_app(Path(data_root))
    uvicorn.run(app, host=host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermoscan",
        description="Contrastive embedding and k-NN anomaly triage for IR PV imagery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic plant dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="module-disjoint train/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", help="per-plant normalization statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="restrict to the train side of this split file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the embedding model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split file; its train side is used")
    p.add_argument("--val-data", help="labelled validation plant dataset")
    p.add_argument("--objective", choices=["contrastive", "cross_entropy"],
                   default="contrastive")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=6e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampling", choices=["shuffle", "stratified"], default="shuffle")
    p.add_argument("--leaveout", help="comma-separated fault classes to drop")
    p.add_argument("--checkpoint-every", type=int, default=200)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--split")
    p.add_argument("--subset", choices=["train", "test"], default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("predict", help="k-NN predictions for target embeddings")
    p.add_argument("--store", required=True, help="labelled source embedding store")
    p.add_argument("--target-store", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics report for labelled predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--target-store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compress", help="k-means centroid compression of a store")
    p.add_argument("--store", required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("serve", help="run the labelling-triage HTTP service")
    p.add_argument("--host", default=None, help="bind address (or THERMOSCAN_BIND)")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--data-root", default=None,
                   help="service data root (or THERMOSCAN_DATA_ROOT)")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except ThermoscanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
