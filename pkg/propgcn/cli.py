"""Command-line entry point: ``propgcn <subcommand> ...``.

Subcommands: synth, build-graph, train, infer, eval, bench, ablate.
Every subcommand accepts --seed, --threads, --config, --log-level and --quiet.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from rich.markup import escape
from rich.panel import Panel

from propgcn import __version__
from propgcn.bench import (
    ABLATION_PROFILE,
    ABLATION_SPEC,
    DEFAULT_VARIANTS,
    VARIANTS,
    detect,
    fit_model,
    num_classes_of,
    predict,
    run_ablation,
    run_bench,
)
from propgcn.checkpoint import checkpoint_extra, restore_checkpoint, save_checkpoint
from propgcn.config import build_settings, explicit_settings, read_config_file
from propgcn.data import (
    build_proposals,
    load_dataset,
    read_external_scores,
    read_ground_truth,
    resolve_data_path,
)
from propgcn.errors import ConfigError, PropGcnError
from propgcn.evaluation import fuse_streams, mean_average_precision
from propgcn.gcn import MODES
from propgcn.graph import build_graph
from propgcn.logs import console, err_console, setup_logging
from propgcn.reports import (
    ablation_frame,
    bench_frame,
    comparison_table,
    map_table,
    read_detections,
    write_detections,
    write_map_report,
)
from propgcn.synthetic import SyntheticSpec, generate_synthetic, generate_videos

log = logging.getLogger("propgcn")


def _file_settings(args) -> Dict[str, Any]:
    return read_config_file(args.config) if args.config else {}


def _common_overrides(args) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "threads": args.threads,
        "dataset": getattr(args, "dataset", None),
        "stream": getattr(args, "stream", None),
    }


def _graph_overrides(args) -> Dict[str, Any]:
    return {
        "theta_ctx": args.theta_ctx,
        "theta_sur": args.theta_sur,
        "max_neighbors": args.max_neighbors,
        "use_contextual": False if args.no_contextual else None,
        "use_surrounding": False if args.no_surrounding else None,
        "cap_in_eval": False if args.no_eval_cap else None,
    }


def _load_records(path):
    manifest = resolve_data_path(path)
    records = load_dataset(manifest)
    log.info(f"loaded {len(records)} videos from {manifest}")
    return records


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_yaml(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    console.print(f"[green]Synthetic dataset written:[/green] {manifest}")
    return 0


def cmd_build_graph(args) -> int:
    settings = build_settings(_file_settings(args), _common_overrides(args), _graph_overrides(args))
    records = [r for r in _load_records(args.data) if r.video_id == args.video]
    if not records:
        raise ConfigError(f"video {args.video!r} is not in {args.data}")
    record = records[0]
    stream = settings.stream if settings.stream in record.features else record.streams[0]
    graph = build_graph(build_proposals(record, stream), settings.graph, capped=not args.uncapped)

    lines = graph.edge_lines()
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
        log.info(f"{len(lines)} edges written to {args.out}")
    else:
        for line in lines:
            print(line)
    return 0


def cmd_train(args) -> int:
    overrides = {
        **_common_overrides(args),
        **_graph_overrides(args),
        "epochs": args.epochs,
        "num_samples": args.num_samples,
        "lr_initial": args.lr,
        "batch_size": args.batch_size,
        "momentum": args.momentum,
        "clip_norm": 40.0 if args.clip else None,
        "sample_neighbors": False if args.no_sampling else None,
        "mode": args.mode,
        "mode1": args.mode1,
        "mode2": args.mode2,
        "self_add": False if args.no_self_add else None,
        "num_layers": args.layers,
    }
    file_values = _file_settings(args)
    settings = build_settings(file_values, overrides)
    records = _load_records(args.data)
    num_classes = args.num_classes or num_classes_of(records)

    state = None
    if args.resume:
        state = restore_checkpoint(args.resume)
        log.info(f"resuming from {args.resume} at epoch {state.epoch}")

    extra = {"settings": settings.flat(), "explicit": explicit_settings(file_values, overrides)}
    out_path = Path(args.out)

    def on_epoch(current):
        if args.checkpoint_every and current.epoch % args.checkpoint_every == 0:
            save_checkpoint(current, out_path, extra)

    if not args.quiet:
        console.print(
            Panel.fit(
                f"stream [bold]{settings.stream}[/bold]  dataset profile [bold]{settings.dataset}[/bold]\n"
                f"modes {settings.stack.mode1}/{settings.stack.mode2}  "
                f"N_s={settings.train.num_samples}  epochs={settings.train.epochs}  "
                f"lr={settings.train.lr_initial}",
                title="propgcn train",
            ),
            highlight=False,
        )

    log_file = open(args.log_file, "a") if args.log_file else None
    try:
        state = fit_model(
            records,
            settings,
            num_classes,
            log_file=log_file,
            quiet=args.quiet,
            state=state,
            on_epoch=on_epoch,
        )
    finally:
        if log_file is not None:
            log_file.close()

    save_checkpoint(state, out_path, extra)
    log.info(f"checkpoint written to {out_path}")
    return 0


def cmd_infer(args) -> int:
    checkpoints = [args.checkpoint] + ([args.checkpoint2] if args.checkpoint2 else [])
    # replay only what training set explicitly; profiles resolve afresh
    base = checkpoint_extra(args.checkpoint).get("explicit", {})
    overrides = {
        **_common_overrides(args),
        **_graph_overrides(args),
        "nms_threshold": args.nms_threshold,
        "top_k": args.top_k,
        "use_regression": False if args.no_regression else None,
        "fusion_weights": args.fusion_weights,
    }
    settings = build_settings(base, _file_settings(args), overrides)
    records = _load_records(args.data)

    per_stream = []
    for path in checkpoints:
        model = restore_checkpoint(path).model
        per_stream.append(predict(records, model, settings))
        log.info(f"{path}: inferred {len(per_stream[-1])} videos ({model.meta.get('stream', '?')})")

    predictions = per_stream[0]
    if len(per_stream) == 2:
        predictions = [
            fuse_streams(a, b, settings.eval.fusion_weights) for a, b in zip(*per_stream)
        ]

    external = None
    if args.external_scores:
        external = read_external_scores(args.external_scores, predictions[0].num_classes if predictions else 1)
    detections = detect(predictions, settings, external)
    write_detections(args.out, detections)
    log.info(f"{len(detections)} detections written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    settings = build_settings(_file_settings(args), _common_overrides(args))
    thresholds = args.thresholds or list(settings.eval.map_thresholds)
    detections = read_detections(args.detections)
    ground_truth = read_ground_truth(args.ground_truth)
    result = mean_average_precision(
        detections, ground_truth, thresholds, settings.eval.average_thresholds
    )
    console.print(map_table(result, title=f"mAP ({len(detections)} detections)"))
    if args.out:
        write_map_report(result, args.out)
    return 0


def cmd_bench(args) -> int:
    base = {**_file_settings(args), "threads": args.threads}
    timings = run_bench(
        num_proposals=args.proposals,
        num_samples_list=args.num_samples,
        modes=args.modes,
        iterations=args.iterations,
        seed=args.seed or 0,
        base={k: v for k, v in base.items() if v is not None},
        quiet=args.quiet,
    )
    frame = bench_frame(timings)
    console.print(comparison_table(frame, f"seconds per iteration, {args.proposals} proposals"))
    if args.out:
        frame.to_csv(args.out, index=False, float_format="%.6f")
    return 0


def cmd_ablate(args) -> int:
    if args.data:
        records = _load_records(args.data)
    else:
        spec = SyntheticSpec.from_yaml(args.spec) if args.spec else ABLATION_SPEC
        records = generate_videos(spec)
    base = {
        **(ABLATION_PROFILE if not (args.data or args.spec) else {}),
        **_file_settings(args),
        **{k: v for k, v in _common_overrides(args).items() if v is not None and k != "seed"},
    }
    if args.epochs is not None:
        base["epochs"] = args.epochs
    results = run_ablation(
        records,
        variants=args.variants,
        seeds=args.seeds,
        base=base,
        threshold=args.threshold,
        quiet=args.quiet,
    )
    frame = ablation_frame(results, args.threshold)
    console.print(comparison_table(frame, "ablation"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "ablation.csv", index=False, float_format="%.6f")
        (out / "ablation.txt").write_text(frame.to_string(index=False) + "\n")
    return 0


def _add_graph_flags(parser):
    group = parser.add_argument_group("graph")
    group.add_argument("--theta-ctx", type=float, help="contextual edge tIoU threshold (0.7)")
    group.add_argument("--theta-sur", type=float, help="surrounding edge distance threshold (1.0)")
    group.add_argument("--max-neighbors", type=int, help="per-node neighbor cap (10)")
    group.add_argument("--no-contextual", action="store_true", help="drop contextual edges")
    group.add_argument("--no-surrounding", action="store_true", help="drop surrounding edges")
    group.add_argument(
        "--no-eval-cap", action="store_true", help="keep every candidate edge at inference"
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="worker threads for per-video preparation")
    common.add_argument("--config", help="flat YAML settings file")
    common.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--quiet", action="store_true", help="hide progress bars and banners")

    profiles = argparse.ArgumentParser(add_help=False)
    profiles.add_argument("--dataset", choices=["thumos", "activitynet"], help="dataset profile")
    profiles.add_argument("--stream", choices=["rgb", "flow"], help="stream profile")

    parser = argparse.ArgumentParser(
        prog="propgcn",
        description="Proposal graph convolution for temporal action localization",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", help="YAML synthetic spec")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", parents=[common, profiles], help="dump a video's edge list")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--video", required=True, help="video id")
    p.add_argument("--out", help="write edges here instead of stdout")
    p.add_argument("--uncapped", action="store_true", help="skip the neighbor cap")
    _add_graph_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", parents=[common, profiles], help="train a model for one stream")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--num-samples", type=int, help="neighbors sampled per node per layer (4)")
    p.add_argument("--no-sampling", action="store_true", help="aggregate full neighborhoods")
    p.add_argument("--lr", type=float, help="initial learning rate (stream profile)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--clip", action="store_true", help="clip gradients at global norm 40")
    p.add_argument("--mode", choices=MODES, help="both branches")
    p.add_argument("--mode1", choices=MODES, help="classification branch")
    p.add_argument("--mode2", choices=MODES, help="boundary branch")
    p.add_argument("--layers", type=int, help="layers per branch (2)")
    p.add_argument("--no-self-add", action="store_true", help="drop the self term in aggregation")
    p.add_argument("--num-classes", type=int, help="defaults to the largest annotated label")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, help="also save every N epochs")
    p.add_argument("--log-file", help="append epoch lines here too")
    _add_graph_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common, profiles], help="write detections from checkpoints")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--checkpoint", required=True, help="first stream model (RGB)")
    p.add_argument("--checkpoint2", help="second stream model (Flow), fused with the first")
    p.add_argument("--fusion-weights", type=float, nargs=2, metavar=("W1", "W2"))
    p.add_argument("--out", required=True, help="detection TSV")
    p.add_argument("--nms-threshold", type=float, help="per-class NMS tIoU threshold (0.3)")
    p.add_argument("--top-k", type=int)
    p.add_argument("--no-regression", action="store_true", help="emit undecoded proposal bounds")
    p.add_argument("--external-scores", help="video-level class scores (video_id class score)")
    _add_graph_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common, profiles], help="mAP of a detection file")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True, help="video_id t_start t_end class table")
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--out", help="directory for the text and CSV reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time training iterations")
    p.add_argument("--proposals", type=int, default=1000)
    p.add_argument("--num-samples", type=int, nargs="+", default=[1, 2, 3, 4, 5, 10])
    p.add_argument("--modes", nargs="+", choices=MODES, default=["gcn", "mlp"])
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--out", help="CSV of the timings")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[common, profiles], help="compare model variants")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--data", help="dataset manifest")
    source.add_argument("--spec", help="synthetic spec to generate in memory")
    p.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=list(DEFAULT_VARIANTS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="directory for ablation.csv and ablation.txt")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except PropGcnError as e:
        err_console.print(f"[red]error:[/red] {escape(str(e))}", highlight=False, soft_wrap=True)
        return 1
    except KeyboardInterrupt:
        err_console.print("[yellow]interrupted[/yellow]")
        return 130


if __name__ == "__main__":
    sys.exit(main())
