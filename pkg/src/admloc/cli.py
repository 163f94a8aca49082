"""Command-line entry point: train, infer, eval, synth, gradcheck.

Exit codes: 0 success, 2 config/validation error, 3 data error,
4 numerical failure (NaN loss or gradcheck above threshold).
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _limit_threads(n: int | None) -> None:
    # BLAS is pinned to one thread so results are identical at any
    # --threads setting; --threads caps orchestration workers only.
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=1)
    except Exception:
        pass


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``section.key = value`` config lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _build(cls, prefix: str, file_cfg: dict[str, str], overrides: dict):
    """Instantiate a config dataclass from file entries plus CLI overrides."""
    kwargs = {}
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    for key, value in file_cfg.items():
        section, _, name = key.partition(".")
        if section != prefix:
            continue
        if name not in fields:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[name] = _coerce(value, getattr(cls, name, None))
    for name, value in overrides.items():
        if value is not None:
            kwargs[name] = value
    return cls(**kwargs)


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    try:
        return int(value)
    except ValueError:
        try:
            return float(value)
        except ValueError:
            return value


def _echo_config(label: str, cfg) -> None:
    for f in dataclasses.fields(cfg):
        print(f"{label}.{f.name} = {getattr(cfg, f.name)}")


def _load_data_dir(data_dir: Path, format: str, fps: float):
    from .skeleton import load_pose_file
    clips = []
    pose_files = sorted(data_dir.glob("*.pose.csv"))
    if not pose_files:
        raise FileNotFoundError(f"no *.pose.csv files in {data_dir}")
    for pose_path in pose_files:
        annot = pose_path.with_name(
            pose_path.name.replace(".pose.csv", ".annot.csv"))
        clips.append(load_pose_file(
            pose_path, format=format,
            annotation_path=annot if annot.exists() else None, fps=fps,
            clip_id=pose_path.name[:-len(".pose.csv")]))
    return clips


def cmd_train(args) -> int:
    from .model import ModelConfig
    from .skeleton import PoseDataError, normalize_poses
    from .train import TrainConfig, TrainError, train

    file_cfg = load_config_file(args.config) if args.config else {}
    try:
        model_cfg = _build(ModelConfig, "model", file_cfg, {
            "num_blocks": args.blocks, "embed_dim": args.embed_dim,
            "cheb_k": args.cheb_k, "window_size": args.window,
            "seed": args.seed})
        train_cfg = _build(TrainConfig, "train", file_cfg, {
            "epochs": args.epochs, "learning_rate": args.lr,
            "batch_size": args.batch_size, "sigma": args.sigma,
            "seed": args.seed})
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _echo_config("model", model_cfg)
    _echo_config("train", train_cfg)
    try:
        clips = [normalize_poses(c)
                 for c in _load_data_dir(Path(args.data), args.format, args.fps)]
    except (OSError, PoseDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        _, report = train(clips, model_cfg, train_cfg,
                          checkpoint_path=args.out, log=print)
    except TrainError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.telemetry:
        report.write_csv(args.telemetry)
    for cid in report.skipped_clips:
        print(f"warning: skipped short clip {cid}", file=sys.stderr)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .adm import (AdmError, compute_adm, detect_transitions, embed_sequence,
                      second_difference, export_adm_curve)
    from .model import CheckpointError, load_params
    from .skeleton import PoseDataError, build_mpii_skeleton, load_pose_file, normalize_poses

    if args.smoothing != 1 and args.smoothing % 2 == 0:
        print("config error: --smoothing must be odd", file=sys.stderr)
        return EXIT_CONFIG
    print(f"infer.checkpoint = {args.checkpoint}")
    print(f"infer.smoothing = {args.smoothing}")
    print(f"infer.min_strength = {args.min_strength}")
    try:
        params = load_params(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        seq = normalize_poses(load_pose_file(args.clip, fps=args.fps))
        graph = build_mpii_skeleton()
        emb, windows = embed_sequence(params, seq, graph)
        adm = compute_adm(emb, windows, seq.fps)
        curvature = second_difference(adm)
        transitions = detect_transitions(adm, smoothing=args.smoothing,
                                         min_strength=args.min_strength)
    except (PoseDataError, AdmError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    export_adm_curve(adm, curvature, transitions, args.out)
    print(f"{'frame':>10} {'kind':>12} {'strength':>12}")
    for p in transitions:
        print(f"{p.frame:>10.2f} {p.kind:>12} {p.strength:>12.6f}")
    print(f"curve written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import csv

    from .evaluate import EvalConfig, EvalError, run_eval
    from .model import CheckpointError, load_params
    from .skeleton import PoseDataError, build_mpii_skeleton, normalize_poses

    file_cfg = load_config_file(args.config) if args.config else {}
    try:
        eval_cfg = _build(EvalConfig, "eval", file_cfg, {
            "match_tolerance": args.tolerance,
            "per_label": args.per_label or None})
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _echo_config("eval", eval_cfg)
    try:
        params = load_params(args.checkpoint)
        clips = [normalize_poses(c)
                 for c in _load_data_dir(Path(args.data), args.format, args.fps)]
    except (OSError, CheckpointError, PoseDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    partitions = None
    if args.split_file:
        partitions = {}
        with open(args.split_file, newline="") as fh:
            for row in csv.reader(fh):
                if row and row[0] != "clip_id":
                    partitions.setdefault(row[1], []).append(row[0])
    annotated = [c for c in clips if c.demarcations is not None]
    if not annotated:
        print("data error: no annotated clips", file=sys.stderr)
        return EXIT_DATA
    try:
        report = run_eval(annotated, params, build_mpii_skeleton(), eval_cfg,
                          partitions=partitions, smoothing=args.smoothing,
                          min_strength=args.min_strength)
    except (EvalError, PoseDataError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    for cid in report.skipped_clips:
        print(f"warning: unannotated clip skipped: {cid}", file=sys.stderr)
    print(report.format_table())
    if args.out:
        report.write_csv(args.out)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SynthError, generate_corpus, write_corpus

    print(f"synth.clips = {args.clips}")
    print(f"synth.seed = {args.seed}")
    print(f"synth.jitter = {args.jitter}")
    try:
        clips = generate_corpus(args.clips, seed=args.seed,
                                jitter_sigma=args.jitter)
        write_corpus(clips, args.out)
    except (SynthError, OSError) as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"{len(clips)} clips written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import full_model_gradcheck
    from .model import ModelConfig, ModelError

    try:
        config = ModelConfig(num_blocks=args.blocks, embed_dim=args.embed_dim,
                             cheb_k=args.cheb_k, window_size=args.window,
                             num_joints=args.joints, seed=args.seed)
    except ModelError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _echo_config("gradcheck", config)
    max_rel = full_model_gradcheck(config, batch_size=args.batch,
                                   seed=args.seed)
    print(f"max relative gradient error: {max_rel:.3e} "
          f"(threshold {args.threshold:.1e})")
    if max_rel >= args.threshold:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    print("gradcheck passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="admloc",
        description="Unsupervised skeleton-based action transition localization")
    parser.add_argument("--version", action="version",
                        version=f"admloc {__version__} (checkpoint format v1)")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (results identical at any value)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="denoising pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--telemetry")
    p.add_argument("--config")
    p.add_argument("--format", default="generic-keypoints",
                   choices=["generic-keypoints", "dsv-annotation"])
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--blocks", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--cheb-k", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="ADM curve + transitions for one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--smoothing", type=int, default=5)
    p.add_argument("--min-strength", type=float, default=0.0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score transitions against annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--format", default="generic-keypoints",
                   choices=["generic-keypoints", "dsv-annotation"])
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--per-label", action="store_true")
    p.add_argument("--split-file", help="CSV of clip_id,partition rows")
    p.add_argument("--smoothing", type=int, default=5)
    p.add_argument("--min-strength", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic pose corpus")
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.005)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=4)
    p.add_argument("--cheb-k", type=int, default=2)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--joints", type=int, default=4)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
