"""Command-line entry point.

Subcommands: synth (generate a dataset), prep (clean a dataset), train,
eval (rollout + report), sample (one pose), plot (re-render report plots).
Exit codes: 0 success, 2 configuration or data-format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import harness, prep, synth
from .cloud_encoder import fps
from .config import ExperimentConfig, load_config
from .core import PointCloudSequence
from .errors import ConfigError, DatasetFormatError, NumericalError
from .model import build_schedule


def _cmd_synth(args) -> int:
    if args.joints == 24:
        body = synth.humanoid_body(args.radius)
    else:
        from .core import chain_skeleton
        body = synth.chain_body(chain_skeleton(args.joints), limb_radius=args.radius)
    sequences = []
    for s in range(args.sequences):
        script = synth.MotionScript.random(args.joints, args.seed + s)
        sequences.append(synth.generate_sequence(
            body, script, args.frames, args.points, fps=args.fps,
            seed=args.seed + s, cull_backfaces=args.cull))
    manifest = synth.write_dataset(args.out, sequences, window=args.window,
                                   fps=args.fps)
    print(f"wrote {len(manifest.records)} sequences to {args.out}")
    return 0


def _resample(points: np.ndarray, count: int) -> np.ndarray:
    """Exact-count resampling: FPS subset when oversized, cyclic repetition
    when undersized (duplicates are harmless to the max-pooled encoders)."""
    n = points.shape[0]
    if n == count:
        return points
    if n > count:
        return points[fps(points, count, 0)]
    reps = np.resize(np.arange(n), count)
    return points[reps]


def _cmd_prep(args) -> int:
    manifest, sequences = synth.read_dataset(args.input)
    params = prep.GpcParams(lam=args.lam, n_c=args.nc, k=args.k, cell=args.cell)
    cleaned = []
    for cloud, poses in sequences:
        frames = []
        for frame in cloud.frames:
            pts = frame.astype(np.float64)
            labels = prep.dbscan(pts, eps=args.tau, min_pts=args.nc)
            pts = pts[labels >= 0]
            if pts.shape[0] > args.sor_k:
                pts = prep.sor(pts, args.sor_k, args.sor_std)
            if args.gpc and pts.shape[0] >= params.n_c:
                pts = prep.gpc(pts, params)
            frames.append(_resample(pts, manifest.points_per_frame).astype(np.float32))
        cleaned.append((PointCloudSequence(np.stack(frames)), poses))
    synth.write_dataset(args.out, cleaned, window=manifest.window, fps=manifest.fps)
    print(f"cleaned {len(cleaned)} sequences into {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    _, sequences = synth.read_dataset(args.data)
    result = harness.train(cfg, sequences, args.out)
    print(f"trained {result.steps} steps; checkpoint at {result.checkpoint_dir}")
    return 0


def _scenario_kwargs(cfg: ExperimentConfig, args) -> dict:
    scenario = args.scenario or cfg.scenario
    history_mode = args.history
    init = args.init
    if scenario == "no-init-pose":
        history_mode = "pred"
        init = "noise"
    return {
        "scenario": scenario,
        "t_infer": args.t_infer or cfg.effective_t_infer,
        "n_infer": args.n_infer if args.n_infer is not None else cfg.n_infer,
        "noise_std": args.noise_std if args.noise_std is not None else cfg.noise_std,
        "history_mode": history_mode,
        "init": init,
        "seed": args.seed if args.seed is not None else cfg.seed,
    }


def _cmd_eval(args) -> int:
    model = harness.load_checkpoint(args.ckpt)
    _, sequences = synth.read_dataset(args.data)
    kwargs = _scenario_kwargs(model.cfg, args)
    report = harness.rollout(model, sequences, **kwargs)
    written = harness.emit_report(report, args.out)
    print(f"evaluated {len(report.frames)} frames; "
          f"mean mpjpe {report.mean_mpjpe_mm:.2f} mm; "
          f"report at {written['metrics']}")
    return 0


def _cmd_sample(args) -> int:
    model = harness.load_checkpoint(args.ckpt)
    _, sequences = synth.read_dataset(args.data)
    cloud, poses = sequences[args.seq]
    t_infer = model.cfg.effective_t_infer
    frame = args.frame if args.frame is not None else t_infer - 1
    if not t_infer - 1 <= frame < len(poses):
        raise ConfigError(f"frame must lie in [{t_infer - 1}, {len(poses)})")
    gt = np.stack([f.root_relative().as_vector() for f in poses.frames])
    clouds = cloud.frames[frame - t_infer + 1: frame + 1][None].astype(np.float32)
    hist = gt[frame - t_infer + 1: frame][None].astype(np.float32)
    rng = torch.Generator().manual_seed(args.seed)
    coords, rots = model.sample(clouds, hist, build_schedule(model.cfg), rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump({"seq": args.seq, "frame": frame,
                   "coords": coords[0].tolist(), "rots": rots[0].tolist()},
                  fh, indent=2, sort_keys=True)
    print(f"sampled pose for seq {args.seq} frame {frame} -> {out}")
    return 0


def _cmd_plot(args) -> int:
    metrics_path = Path(args.report) / "metrics.json"
    if not metrics_path.exists():
        raise ConfigError(f"no metrics.json under {args.report}")
    with open(metrics_path) as fh:
        data = json.load(fh)
    report = harness.RolloutReport(
        scenario=data["scenario"], config_hash=data["config_hash"])
    report.frames = [harness.FrameMetric(**f) for f in data["frames"]]
    written = harness.emit_report(report, args.out)
    print(f"re-rendered report into {args.out} ({len(written)} files)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p2p", description="generative pose estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=4)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--joints", type=int, default=24)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--radius", type=float, default=0.06)
    p.add_argument("--cull", action="store_true",
                   help="single-view visibility culling")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("prep", help="denoise a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gpc", action="store_true")
    p.add_argument("--tau", type=float, default=0.05,
                   help="density clustering radius in meters")
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.add_argument("--nc", type=int, default=10)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--cell", type=float, default=0.05)
    p.add_argument("--sor-k", dest="sor_k", type=int, default=8)
    p.add_argument("--sor-std", dest="sor_std", type=float, default=2.0)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="rollout evaluation with a scenario")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenario",
                   choices=["clean", "sparse", "noisy", "no-init-pose"])
    p.add_argument("--t-infer", dest="t_infer", type=int)
    p.add_argument("--n-infer", dest="n_infer", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--history", choices=["gt", "pred"], default="gt")
    p.add_argument("--init", choices=["gt", "noise"], default="gt")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sample", help="sample one pose")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seq", type=int, default=0)
    p.add_argument("--frame", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("plot", help="re-render plots from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
