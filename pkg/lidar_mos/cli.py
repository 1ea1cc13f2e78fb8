"""
LiDAR MOS CLI

Command-line entry points wiring the pipeline end to end:
- synth-gen: write synthetic sequences in the KITTI layout
- baseline-diff / segment: per-point motion predictions
- train: fit the network and write a checkpoint
- eval-mos / eval-odom / loopclose / clean-map: reports and artifacts
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from .context import RunConfig, keys_for, load_config
from .errors import EXIT_CODES, MosError, MosIOError, NoPositives
from .evaluation import (
    EVAL_CLASSES,
    MosReport,
    TrajectoryPair,
    ate,
    confusion,
    drift,
    f1_max,
    format_iou,
    iou,
    loop_pair_truth,
    pr_curve,
    pr_points,
)
from .geometry import relative_from_world
from .kitti_io import (
    MotionLabel,
    SequenceData,
    SequenceLayout,
    frame_times,
    load_sequence,
    read_poses,
    read_predictions,
    write_poses,
    write_predictions,
)
from .loopclosure import LoopClosureDetector, export_pose_graph
from .mapops import aggregate_map, export_map, filter_moving, residual_moving_count, voxel_downsample
from .net import MosModel, load_checkpoint, predict_motion, save_checkpoint
from .observability import TrainingRun
from .odometry import run_odometry
from .report import (
    LOOP_REPORT_COLUMNS,
    MOS_REPORT_COLUMNS,
    ODOM_REPORT_COLUMNS,
    POSE_GRAPH_COLUMNS,
    TRAINING_LOG_COLUMNS,
    EpochTracker,
    ReportFormatter,
    write_csv,
    write_plot_data,
)
from .residual import padded_residual_stack, spatial_diff_baseline
from .synth import benchmark_specs, generate_sequence, scenario, write_sequence
from .train import build_samples, fit, inverse_frequency_weights


# Load environment variables
load_dotenv(override=True)

console = Console(
    legacy_windows=(sys.platform == 'win32'),
    no_color=os.getenv('NO_COLOR') is not None,
)
err_console = Console(stderr=True, no_color=os.getenv('NO_COLOR') is not None)

formatter = ReportFormatter()
logger = logging.getLogger("lidar_mos")


def setup_logging(verbose: bool) -> None:
    debug = verbose or os.getenv("LIDAR_MOS_DEBUG", "").strip().lower() in ("1", "true", "yes", "on")
    logger.handlers.clear()
    logger.addHandler(RichHandler(console=err_console, show_path=False, rich_tracebacks=False))
    logger.setLevel(logging.DEBUG if debug else logging.INFO)
    logger.propagate = False


# === Shared helpers ===


def _layout(path: str) -> SequenceLayout:
    root = Path(path)
    if not root.is_dir():
        raise MosIOError(f"sequence directory not found: {root}")
    return SequenceLayout(root)


def _load(path: str, cfg: RunConfig, with_labels: bool = True) -> tuple[SequenceLayout, SequenceData]:
    layout = _layout(path)
    return layout, load_sequence(layout, cfg.sequence_config(layout), with_labels=with_labels)


def _require_motion(layout: SequenceLayout, data: SequenceData) -> list[np.ndarray]:
    if data.motion is None:
        raise MosIOError(f"{layout.root}: no labels directory")
    return data.motion


def _read_prediction_dir(pred_dir: Path, count: int) -> list[np.ndarray]:
    return [read_predictions(pred_dir / f"{k:06d}.label") for k in range(count)]


def _motion_source(args, layout: SequenceLayout, data: SequenceData) -> list[np.ndarray]:
    """Predictions from --pred when given, ground-truth motion otherwise"""
    if getattr(args, "pred", None):
        return _read_prediction_dir(Path(args.pred), len(data.scans))
    return _require_motion(layout, data)


def _ordered_map(fn: Callable, items, threads: int) -> list:
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _print(report) -> None:
    for elem in report.elements:
        console.print(elem)


# === Commands ===


def cmd_synth_gen(args, cfg: RunConfig) -> int:
    """Generate one scenario, or the 10 + 3 benchmark split with --benchmark"""
    v = cfg.values
    dest = Path(args.dest) if args.dest else cfg.out_dir / "synth"
    sensor = cfg.sensor_model()
    if args.benchmark:
        train, held_out = benchmark_specs(seed=cfg.seed, frames=v["synth.frames"])
        jobs = [(dest / "train" / f"{i:02d}", s) for i, s in enumerate(train)]
        jobs += [(dest / "held_out" / f"{i:02d}", s) for i, s in enumerate(held_out)]
        jobs = [(root, replace(s, sensor=sensor, frame_rate=v["synth.frame_rate"])) for root, s in jobs]
    else:
        jobs = [(dest, scenario(v["synth.scenario"], seed=cfg.seed, frames=v["synth.frames"],
                                sensor=sensor, frame_rate=v["synth.frame_rate"]))]
    for root, spec in jobs:
        seq = generate_sequence(spec, threads=cfg.threads)
        write_sequence(seq, SequenceLayout(root))
        console.print(formatter.status(f"{spec.name} (seed {spec.seed}): {len(seq)} frames -> {root}"))
    return 0


def cmd_baseline_diff(args, cfg: RunConfig) -> int:
    layout, data = _load(args.sequence, cfg, with_labels=False)
    rel = relative_from_world(data.poses)
    k = max(1, cfg["model.residual_frames"])
    params = cfg.spatial_params()
    out_dir = Path(args.out_dir) if args.out_dir else cfg.out_dir / layout.root.name / "baseline"

    def label_frame(t: int) -> np.ndarray:
        return spatial_diff_baseline(padded_residual_stack(data.scans, rel, t, k), params)

    labels = _ordered_map(label_frame, range(len(data.scans)), cfg.threads)
    for t, motion in enumerate(labels):
        write_predictions(out_dir / f"{t:06d}.label", motion)
    moving = sum(int(np.sum(m == MotionLabel.MOVING)) for m in labels)
    console.print(formatter.status(f"baseline: {len(labels)} frames, {moving} moving points -> {out_dir}"))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    spec = cfg.grid_spec()
    model_cfg = cfg.model_config()
    samples = []
    for path in args.sequences:
        layout, data = _load(path, cfg)
        motion = _require_motion(layout, data)
        samples += build_samples(data.scans, relative_from_world(data.poses), motion, spec,
                                 model_cfg.residual_frames, name=layout.root.name)
    weights = inverse_frequency_weights(samples, model_cfg.num_classes, cfg.weight_clamp())
    loss_cfg = cfg.loss_config(fallback_weights=weights)
    logger.info("%d samples, class weights %s", len(samples), loss_cfg.class_weights)

    model = MosModel(model_cfg, spec)
    tracker = EpochTracker()
    out_dir = cfg.out_dir
    checkpoint = Path(args.checkpoint) if args.checkpoint else out_dir / "model.ckpt"
    with TrainingRun(cfg.resolved()) as tracking:
        def on_epoch(metrics):
            tracker.record(metrics)
            tracking.log_epoch(metrics)

        history = fit(samples, model, cfg.train_config(), loss_cfg, on_epoch=on_epoch)
        save_checkpoint(checkpoint, model)
        tracking.log_checkpoint(checkpoint)

    write_csv(out_dir / "training_log.csv", TRAINING_LOG_COLUMNS, [m.as_row() for m in history], cfg.resolved())
    _print(formatter.training_table(history))
    best = tracker.best()
    console.print(formatter.status(f"best epoch {best.epoch}: moving IoU {format_iou(best.moving_iou)}; checkpoint -> {checkpoint}"))
    if len(tracker) > 1 and not tracker.strictly_decreasing():
        logger.info("training loss did not decrease every epoch: %s", ", ".join(f"{x:.4f}" for x in tracker.losses()))
    return 0


def cmd_segment(args, cfg: RunConfig) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    layout, data = _load(args.sequence, cfg, with_labels=False)
    rel = relative_from_world(data.poses)
    k = model.config.residual_frames
    out_dir = Path(args.out_dir) if args.out_dir else layout.prediction_dir

    def label_frame(t: int) -> np.ndarray:
        return predict_motion(padded_residual_stack(data.scans, rel, t, k), model)

    labels = _ordered_map(label_frame, range(len(data.scans)), cfg.threads)
    for t, motion in enumerate(labels):
        write_predictions(out_dir / f"{t:06d}.label", motion)
    console.print(formatter.status(f"segmented {len(labels)} frames -> {out_dir}"))
    return 0


def cmd_eval_mos(args, cfg: RunConfig) -> int:
    preds = args.pred or []
    if len(preds) > len(args.sequences):
        raise MosIOError(f"{len(preds)} prediction directories for {len(args.sequences)} sequences")
    report = MosReport()
    for i, path in enumerate(args.sequences):
        layout, data = _load(path, cfg)
        truth = _require_motion(layout, data)
        pred_dir = Path(preds[i]) if i < len(preds) else layout.prediction_dir
        for p, t in zip(_read_prediction_dir(pred_dir, len(truth)), truth):
            report.add(layout.root.name, confusion(p, t))

    rows = []
    for name, counts in list(report.sequences.items()) + [("all", report.total)]:
        for cls in EVAL_CLASSES:
            tp, fp, fn = counts.row(int(cls))
            rows.append({"sequence": name, "class": cls.name.lower(), "tp": tp, "fp": fp, "fn": fn,
                         "iou": iou(counts, cls)})
    path = write_csv(cfg.out_dir / "mos_report.csv", MOS_REPORT_COLUMNS, rows, cfg.resolved())
    _print(formatter.mos_table(rows, format_iou(report.moving_iou())))
    console.print(formatter.status(f"report -> {path}"))
    return 0


def cmd_eval_odom(args, cfg: RunConfig) -> int:
    """
    ATE and drift of scan-matching odometry on raw scans versus scans with
    moving points removed, plus any trajectory files given with --estimate
    """
    layout, data = _load(args.sequence, cfg)
    odom_cfg = cfg.odometry_config()
    motion = _motion_source(args, layout, data)
    keep = [m != MotionLabel.MOVING for m in motion]

    runs = {
        "unfiltered": run_odometry(data.scans, odom_cfg, initial=data.poses[0]),
        "filtered": run_odometry(data.scans, odom_cfg, keep_masks=keep, initial=data.poses[0]),
    }
    for est in args.estimate or []:
        runs[Path(est).stem] = read_poses(Path(est))

    rows = []
    for name, poses in runs.items():
        pair = TrajectoryPair(data.poses, poses)
        d = drift(pair)
        rows.append({"run": name, "ate": ate(pair), "de": d.de, "dr_percent": d.dr_percent,
                     "dr_definition": d.definition})
        if name in ("unfiltered", "filtered"):
            write_poses(cfg.out_dir / f"odometry_{name}.txt", poses)
    path = write_csv(cfg.out_dir / "odom_report.csv", ODOM_REPORT_COLUMNS, rows, cfg.resolved())
    _print(formatter.table("Odometry", list(ODOM_REPORT_COLUMNS[:4]), rows))
    console.print(formatter.status(f"report -> {path}"))
    return 0


def cmd_loopclose(args, cfg: RunConfig) -> int:
    layout, data = _load(args.sequence, cfg)
    loop_cfg = cfg.loop_config()
    motion = _motion_source(args, layout, data) if loop_cfg.mask_moving and (args.pred or data.motion) else None
    times = frame_times(data, cfg["synth.frame_rate"])

    detector = LoopClosureDetector(config=loop_cfg)
    for k, scan in enumerate(data.scans):
        detector.process(scan, float(times[k]), None if motion is None else motion[k])

    rows = [m.as_row() for m in detector.matches]
    out_dir = cfg.out_dir
    write_csv(out_dir / "loop_report.csv", LOOP_REPORT_COLUMNS, rows, cfg.resolved())
    graph = [{"i": i, "j": j, "relative_yaw": yaw} for i, j, yaw in export_pose_graph(detector.matches, loop_cfg.sectors)]
    write_csv(out_dir / "pose_graph.csv", POSE_GRAPH_COLUMNS, graph, cfg.resolved())

    if detector.matches:
        truth = loop_pair_truth(data.poses, [(m.query_frame, m.match_frame) for m in detector.matches])
        scores = np.array([m.similarity for m in detector.matches])
        try:
            curve = pr_curve(scores, truth)
            write_plot_data(out_dir / "pr_curve.dat", ("recall", "precision"), pr_points(curve), cfg.resolved())
            console.print(formatter.status(f"F1 max: {f1_max(curve):.4f}"))
        except NoPositives:
            logger.warning("no true revisits among candidates; precision-recall skipped")
    _print(formatter.table("Loop closures", list(LOOP_REPORT_COLUMNS), [m.as_row() for m in detector.accepted()]))
    console.print(formatter.status(f"{len(detector.accepted())} loops accepted -> {out_dir}"))
    return 0


def cmd_clean_map(args, cfg: RunConfig) -> int:
    layout, data = _load(args.sequence, cfg)
    labels = _motion_source(args, layout, data)
    global_map = aggregate_map(data.scans, data.poses, labels)
    cleaned = voxel_downsample(filter_moving(global_map), cfg["map.voxel_downsample"])
    bin_path, _ = export_map(cleaned, cfg.out_dir / f"{layout.root.name}_map")

    rows = [{"map": "aggregated", "points": len(global_map)}, {"map": "cleaned", "points": len(cleaned)}]
    if data.motion is not None:
        rows.append({"map": "moving left", "points": residual_moving_count(cleaned, data.motion)})
    _print(formatter.table("Map", ["map", "points"], rows))
    console.print(formatter.status(f"map -> {bin_path}"))
    return 0


COMMANDS: dict[str, tuple[Callable, str]] = {
    "synth-gen": (cmd_synth_gen, "generate synthetic sequences"),
    "baseline-diff": (cmd_baseline_diff, "spatial-difference moving-point baseline"),
    "train": (cmd_train, "train the segmentation network"),
    "segment": (cmd_segment, "predict motion labels with a checkpoint"),
    "eval-mos": (cmd_eval_mos, "moving IoU of predictions against labels"),
    "eval-odom": (cmd_eval_odom, "odometry ATE and drift with and without moving points"),
    "loopclose": (cmd_loopclose, "scan-context loop closure"),
    "clean-map": (cmd_clean_map, "aggregate a map and remove moving points"),
}


def _epilog(command: str) -> str:
    lines = ["Config keys read (set with --set key=value):"]
    for key in keys_for(command):
        lines.append(f"  {key.name} = {key.default!r}  {key.help}")
    lines.append("")
    lines.append("Exit codes:")
    lines.append("  0  success")
    for kind, code in sorted(EXIT_CODES.items(), key=lambda kv: (kv[1], kv[0])):
        lines.append(f"  {code:<2} {kind}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="JSON config file (also LIDAR_MOS_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key; repeatable")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--threads", type=int, help="Worker threads")
    common.add_argument("--out", type=str, help="Output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="lidar_mos",
        description="LiDAR moving object segmentation pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a synthetic street scene and segment it
  %(prog)s synth-gen data/street
  %(prog)s train data/street --out runs/street
  %(prog)s segment data/street --checkpoint runs/street/model.ckpt

  # Evaluate predictions
  %(prog)s eval-mos data/street
""",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str) -> argparse.ArgumentParser:
        fn, help_text = COMMANDS[name]
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=_epilog(name), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(handler=fn)
        return p

    p = add("synth-gen")
    p.add_argument("dest", nargs="?", help="Sequence directory (default <out>/synth)")
    p.add_argument("--benchmark", action="store_true", help="Write the 10 training + 3 held-out sequences")

    p = add("baseline-diff")
    p.add_argument("sequence", help="Sequence directory")
    p.add_argument("--out-dir", help="Prediction directory")

    p = add("train")
    p.add_argument("sequences", nargs="+", help="Labelled sequence directories")
    p.add_argument("--checkpoint", help="Checkpoint path (default <out>/model.ckpt)")

    p = add("segment")
    p.add_argument("sequence", help="Sequence directory")
    p.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    p.add_argument("--out-dir", help="Prediction directory (default <sequence>/predictions, read by eval-mos)")

    p = add("eval-mos")
    p.add_argument("sequences", nargs="+", help="Labelled sequence directories")
    p.add_argument("--pred", action="append",
                   help="Prediction directory per sequence, in order (default <sequence>/predictions)")

    p = add("eval-odom")
    p.add_argument("sequence", help="Sequence directory with ground-truth poses")
    p.add_argument("--pred", help="Motion predictions used to filter scans (default: labels)")
    p.add_argument("--estimate", action="append", help="Extra estimated trajectory file; repeatable")

    p = add("loopclose")
    p.add_argument("sequence", help="Sequence directory")
    p.add_argument("--pred", help="Motion predictions for masking (default: labels if present)")

    p = add("clean-map")
    p.add_argument("sequence", help="Sequence directory")
    p.add_argument("--pred", help="Motion predictions (default: labels)")
    return parser


def run(argv: list[str] | None = None) -> int:
    """Parse, execute and map errors to exit codes"""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = load_config(args.config, args.set, seed=args.seed, threads=args.threads, out=args.out)
        logger.debug("config sources: %s", ", ".join(cfg.sources))
        if logger.isEnabledFor(logging.DEBUG):
            err_console.print(formatter.config_panel(cfg.resolved(), [k.name for k in keys_for(args.command)]))
        return args.handler(args, cfg)
    except MosError as e:
        print(e.one_line(), file=sys.stderr)
        return e.exit_code


def main():
    """CLI main entry point"""
    sys.exit(run())


if __name__ == "__main__":
    main()
