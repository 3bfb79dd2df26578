"""Command-line entry points: serve, eval, ablate, bench, segment, synth."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .evaluation import EvalConfig, benchmark_pipeline, run_ablation, run_protocol, write_report


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the annotation workbench service")
    p.add_argument("--samples", required=True, help="sample store directory")
    p.add_argument("--index", default=None, help="index file to load/persist")
    p.add_argument("--manifest", default=None, help="manifest path (default: <samples>/manifest.json)")
    p.add_argument("--engine", default="transfer", help="pretrained | toy:<seed> | transfer")
    p.add_argument("--backbone", default="test:0", help="dinov2-vits14-reg | test:<seed>")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--static", default=None, help="directory of built workbench assets to serve")
    p.add_argument("--embed-resolution", type=int, default=518)
    p.add_argument("--seg-resolution", type=int, default=1024)


def _add_eval(sub):
    p = sub.add_parser("eval", help="run the segmentation protocol from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--format", default="json", choices=["json", "csv", "markdown-table"])


def _add_ablate(sub):
    p = sub.add_parser("ablate", help="strategy x k ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", default="random,embedding")
    p.add_argument("--k", default="8,16")
    p.add_argument("--out", default=None, help="directory for per-cell reports")


def _add_bench(sub):
    p = sub.add_parser("bench", help="stage timing benchmark over k values")
    p.add_argument("--config", required=True)
    p.add_argument("--k", default="1,4,16")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", default=None)


def _add_segment(sub):
    p = sub.add_parser("segment", help="segment one image and write label map + sidecar")
    p.add_argument("--image", required=True, help="PNG or .npy image file")
    p.add_argument("--manifest", required=True, help="database manifest")
    p.add_argument("--engine", default="transfer")
    p.add_argument("--backbone", default="test:0")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--classes", default=None, help="comma-separated class names")
    p.add_argument("--strategy", default="embedding")
    p.add_argument("--out", required=True, help="output path base (.png & .json)")
    p.add_argument("--embed-resolution", type=int, default=518)
    p.add_argument("--seg-resolution", type=int, default=1024)


def _add_synth(sub):
    p = sub.add_parser("synth", help="write a synthetic shapes dataset (demo/testing)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ramseg")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_serve(sub)
    _add_eval(sub)
    _add_ablate(sub)
    _add_bench(sub)
    _add_segment(sub)
    _add_synth(sub)
    args = parser.parse_args(argv)

    if args.command == "serve":
        from .service import ServiceConfig, serve

        config = ServiceConfig(
            samples_dir=Path(args.samples),
            index_path=Path(args.index) if args.index else None,
            manifest_path=Path(args.manifest) if args.manifest else None,
            engine=args.engine,
            backbone=args.backbone,
            default_k=args.k,
            embed_resolution=args.embed_resolution,
            seg_resolution=args.seg_resolution,
            static_dir=Path(args.static) if args.static else None,
        )
        serve(config, host=args.host, port=args.port)
        return 0

    if args.command == "eval":
        report = run_protocol(EvalConfig.from_json(args.config))
        if args.out:
            write_report(report, Path(args.out), format=args.format)
        print(json.dumps({str(k): v for k, v in report.per_class_mean.items()}, indent=2))
        return 0

    if args.command == "ablate":
        base = EvalConfig.from_json(args.config)
        grid = run_ablation(base, args.strategies.split(","), _parse_int_list(args.k))
        summary = {}
        for (strategy, k), report in grid.items():
            key = f"{strategy}@k={k}"
            summary[key] = {str(lbl): v for lbl, v in report.per_class_mean.items()}
            if args.out:
                out_dir = Path(args.out)
                out_dir.mkdir(parents=True, exist_ok=True)
                write_report(report, out_dir / f"{strategy}_k{k}.json")
        print(json.dumps(summary, indent=2))
        return 0

    if args.command == "bench":
        base = EvalConfig.from_json(args.config)
        results = {}
        for k in _parse_int_list(args.k):
            cfg = EvalConfig(**{**asdict(base), "k": k})
            results[k] = benchmark_pipeline(cfg, repetitions=args.reps, warmup=args.warmup)
        payload = {str(k): v for k, v in results.items()}
        if args.out:
            Path(args.out).write_text(json.dumps(payload, indent=2))
        print(json.dumps(payload, indent=2))
        return 0

    if args.command == "segment":
        import numpy as np

        from .data import (
            ImageSlice,
            PreprocessSpec,
            SampleStore,
            load_image_array,
            load_manifest,
            preprocess_for_embedding,
        )
        from .embedding import embed, get_backbone
        from .engine import get_engine, save_segmentation, segment_image
        from .index import build_index

        manifest = load_manifest(args.manifest)
        store = SampleStore.from_manifest(manifest)
        spec = PreprocessSpec(
            embed_resolution=args.embed_resolution, seg_resolution=args.seg_resolution
        )
        backbone = get_backbone(args.backbone)
        embeddings = [
            embed(backbone, preprocess_for_embedding(rec.image, spec)).with_id(rec.id)
            for rec in store.records()
        ]
        index = build_index(embeddings)
        pixels = load_image_array(Path(args.image))
        image = ImageSlice(np.asarray(pixels, dtype=np.float32), subject_id="cli-query")
        classes = args.classes.split(",") if args.classes else None
        result = segment_image(
            get_engine(args.engine),
            index,
            store,
            image,
            k=args.k,
            classes=classes,
            strategy=args.strategy,
            backbone=backbone,
            preprocess=spec,
        )
        png_path, sidecar_path = save_segmentation(result, Path(args.out))
        print(f"wrote {png_path} and {sidecar_path}")
        return 0

    if args.command == "synth":
        from .synthetic import write_synthetic_dataset

        manifest_path = write_synthetic_dataset(
            Path(args.out), n=args.n, seed=args.seed, size=args.size
        )
        print(f"wrote {manifest_path}")
        return 0

    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
