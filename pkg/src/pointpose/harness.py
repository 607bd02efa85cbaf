"""Training driver, autoregressive rollout evaluation, and report emission.

Training slides stride-1 windows over each sequence, optimizes with AdamW,
halves the learning rate at the configured epoch, and checkpoints a flat
float32 parameter blob plus JSON metadata keyed by the config hash. Rollout
replays a sequence feeding either ground-truth or predicted pose history,
sampling the current pose per frame and scoring it against ground truth.
Reports serialize deterministically: the metric JSON contains no wall-clock
or path information, so equal seeds yield byte-identical files.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cloud_encoder import fps
from .config import ExperimentConfig
from .core import PointCloudSequence, PoseFrame, PoseSequence, angular_error, mpjpe
from .errors import ConfigError, NumericalError, ShapeError
from .model import (
    GenerativePoseModel,
    TrainingBatch,
    build_schedule,
    train_step,
)

Sequences = list[tuple[PointCloudSequence, PoseSequence]]


def _relativized_pose_array(poses: PoseSequence) -> np.ndarray:
    return np.stack([f.root_relative().as_vector() for f in poses.frames])


def _set_threads(cfg: ExperimentConfig) -> None:
    if cfg.threads and cfg.threads > 0:
        torch.set_num_threads(cfg.threads)


def iter_windows(sequences: Sequences, window: int) -> list[tuple[int, int]]:
    """(sequence index, end frame) for every stride-1 window of length
    ``window``; the end frame is the prediction target."""
    items = []
    for si, (_, poses) in enumerate(sequences):
        for t in range(window - 1, len(poses)):
            items.append((si, t))
    return items


def _assemble_batch(clouds: list[np.ndarray], poses: list[np.ndarray],
                    items: list[tuple[int, int]], window: int) -> TrainingBatch:
    cl, hist, gc, gr = [], [], [], []
    for si, t in items:
        cl.append(clouds[si][t - window + 1: t + 1])
        hist.append(poses[si][t - window + 1: t])
        gc.append(poses[si][t][:, :3])
        gr.append(poses[si][t][:, 3:])
    return TrainingBatch(np.stack(cl), np.stack(hist), np.stack(gc), np.stack(gr))


def save_checkpoint(directory: str | Path, model: GenerativePoseModel) -> Path:
    """Flat float32 parameter blob plus JSON metadata with the config hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    index = []
    offset = 0
    chunks = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.reshape(-1))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.tofile(directory / "checkpoint.params")
    meta = {
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "params": index,
        "total_floats": int(offset),
    }
    with open(directory / "checkpoint.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory: str | Path) -> GenerativePoseModel:
    directory = Path(directory)
    meta_path = directory / "checkpoint.json"
    if not meta_path.exists():
        raise ConfigError(f"no checkpoint.json under {directory}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    cfg_dict = dict(meta["config"])
    if cfg_dict.get("skeleton_edges"):
        cfg_dict["skeleton_edges"] = [tuple(e) for e in cfg_dict["skeleton_edges"]]
    cfg = ExperimentConfig(**cfg_dict)
    model = GenerativePoseModel(cfg)
    blob = np.fromfile(directory / "checkpoint.params", dtype="<f4")
    if blob.size != meta["total_floats"]:
        raise ConfigError("checkpoint blob size disagrees with metadata")
    state = {}
    for entry in meta["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = blob[entry["offset"]: entry["offset"] + size]
        state[entry["name"]] = torch.as_tensor(
            chunk.reshape(entry["shape"]).astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model


@dataclass
class TrainResult:
    checkpoint_dir: Path
    losses: list[float]
    steps: int


def train(cfg: ExperimentConfig, sequences: Sequences,
          out_dir: str | Path) -> TrainResult:
    """Optimize a fresh model on stride-1 windows of the given sequences.

    The checkpoint is rewritten at every epoch end, so a NumericalError
    abort leaves the last healthy epoch on disk; the per-step loss log
    survives alongside it.
    """
    _set_threads(cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    model = GenerativePoseModel(cfg)
    schedule = build_schedule(cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)
    windows = iter_windows(sequences, cfg.window)
    if not windows:
        raise ConfigError("no training windows: sequences shorter than the window")
    clouds = [cloud.frames.astype(np.float32) for cloud, _ in sequences]
    poses = [_relativized_pose_array(p).astype(np.float32) for _, p in sequences]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.txt"
    losses: list[float] = []
    step = 0
    halve_at = cfg.effective_lr_halve_epoch
    with open(log_path, "w") as log:
        for epoch in range(1, cfg.epochs + 1):
            if epoch == halve_at + 1:
                for group in optimizer.param_groups:
                    group["lr"] = cfg.lr / 2.0
            order = rng.permutation(len(windows))
            for start in range(0, len(windows), cfg.batch_size):
                items = [windows[k] for k in order[start:start + cfg.batch_size]]
                batch = _assemble_batch(clouds, poses, items, cfg.window)
                optimizer.zero_grad()
                loss = train_step(model, batch, schedule, rng)
                optimizer.step()
                losses.append(loss)
                log.write(f"{step} {epoch} {loss:.10f}\n")
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            save_checkpoint(out_dir, model)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    return TrainResult(out_dir, losses, step)


def apply_scenario(cloud: PointCloudSequence, scenario: str,
                   n_infer: int | None = None, noise_std: float = 0.01,
                   seed: int = 0) -> PointCloudSequence:
    """Evaluation-time cloud degradation: identity, FPS subsampling, or
    added isotropic Gaussian noise."""
    if scenario in ("clean", "no-init-pose"):
        return cloud
    if scenario == "sparse":
        if n_infer is None or n_infer < 1 or n_infer > cloud.points_per_frame:
            raise ConfigError("sparse scenario needs 1 <= n_infer <= N")
        frames = np.stack([
            frame[fps(frame, n_infer, 0)] for frame in cloud.frames
        ])
        return PointCloudSequence(frames)
    if scenario == "noisy":
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_std, size=cloud.frames.shape)
        return PointCloudSequence((cloud.frames + noise).astype(cloud.frames.dtype))
    raise ConfigError(f"unknown scenario {scenario!r}")


@dataclass
class FrameMetric:
    seq: int
    frame: int
    mpjpe_mm: float
    angular_deg: float
    history: str

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "frame": self.frame,
            "mpjpe_mm": self.mpjpe_mm,
            "angular_deg": self.angular_deg,
            "history": self.history,
        }


@dataclass
class RolloutReport:
    scenario: dict
    config_hash: str
    frames: list[FrameMetric] = field(default_factory=list)
    wall_clock_s: float = 0.0
    skeleton_edges: list[tuple[int, int]] = field(default_factory=list)
    overlays: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def mean_mpjpe_mm(self) -> float | None:
        if not self.frames:
            return None
        return float(np.mean([f.mpjpe_mm for f in self.frames]))

    @property
    def mean_angular_deg(self) -> float | None:
        if not self.frames:
            return None
        return float(np.mean([f.angular_deg for f in self.frames]))

    def to_metrics_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "frames": [f.to_dict() for f in self.frames],
            "aggregates": {
                "frame_count": len(self.frames),
                "mean_mpjpe_mm": self.mean_mpjpe_mm,
                "mean_angular_deg": self.mean_angular_deg,
            },
        }


def rollout(
    model: GenerativePoseModel,
    sequences: Sequences,
    t_infer: int | None = None,
    history_mode: str = "gt",
    init: str = "gt",
    seed: int = 0,
    scenario: str = "clean",
    n_infer: int | None = None,
    noise_std: float = 0.01,
) -> RolloutReport:
    """Evaluate sequences frame by frame with the trained sampler.

    ``history_mode`` 'gt' feeds ground-truth poses for the previous frames;
    'pred' feeds the model's own past predictions (autoregressive), with the
    warm-up history taken from ground truth (init='gt') or standard normal
    draws (init='noise'). Ground-truth data is never mutated.
    """
    cfg = model.cfg
    _set_threads(cfg)
    t_infer = t_infer if t_infer is not None else cfg.effective_t_infer
    if t_infer < 2:
        raise ConfigError("t_infer must be >= 2 (one history frame minimum)")
    if t_infer > cfg.window:
        raise ConfigError("t_infer must not exceed the trained window")
    if history_mode not in ("gt", "pred") or init not in ("gt", "noise"):
        raise ConfigError("history_mode must be gt|pred and init gt|noise")

    schedule = build_schedule(cfg)
    rng = np.random.default_rng(seed)
    torch_rng = torch.Generator().manual_seed(seed)
    start = time.perf_counter()
    report = RolloutReport(
        scenario={
            "name": scenario,
            "t_infer": t_infer,
            "n_infer": n_infer,
            "noise_std": noise_std if scenario == "noisy" else None,
            "history_mode": history_mode,
            "init": init,
            "mode": cfg.mode,
            "seed": seed,
        },
        config_hash=cfg.hash(),
        skeleton_edges=list(model.skeleton.edges),
    )

    for si, (cloud, poses) in enumerate(sequences):
        if len(poses) < t_infer:
            raise ShapeError(f"sequence {si} shorter than t_infer")
        degraded = apply_scenario(cloud, scenario, n_infer, noise_std, seed + si)
        cloud_arr = degraded.frames.astype(np.float32)
        gt_arr = _relativized_pose_array(poses)
        j = poses.joint_count

        history: list[tuple[np.ndarray, str]] = []
        if history_mode == "pred":
            for f in range(t_infer - 1):
                if init == "gt":
                    history.append((gt_arr[f], "init-gt"))
                else:
                    history.append((rng.standard_normal((j, 9)), "init-noise"))

        first_pred = None
        last_pred = None
        for t in range(t_infer - 1, len(poses)):
            if history_mode == "gt":
                hist = gt_arr[t - t_infer + 1: t]
                provenance = "gt"
            else:
                recent = history[-(t_infer - 1):]
                hist = np.stack([h[0] for h in recent])
                tags = {h[1] for h in recent}
                provenance = "pred" if tags == {"pred"} else "+".join(sorted(tags))
            window_clouds = cloud_arr[t - t_infer + 1: t + 1][None]
            coords, rots = model.sample(window_clouds, hist[None].astype(np.float32),
                                        schedule, torch_rng, fps_seed=0)
            if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(rots))):
                raise NumericalError(f"non-finite prediction at seq {si} frame {t}")
            pred = PoseFrame(coords[0], rots[0])
            gt = PoseFrame(gt_arr[t][:, :3], gt_arr[t][:, 3:])
            report.frames.append(FrameMetric(
                seq=si, frame=t,
                mpjpe_mm=mpjpe(pred, gt),
                angular_deg=angular_error(pred, gt),
                history=provenance,
            ))
            if history_mode == "pred":
                history.append((pred.as_vector(), "pred"))
            if first_pred is None:
                first_pred = (f"seq{si}_frame{t}", pred.coords.copy(), gt.coords.copy())
            last_pred = (f"seq{si}_frame{t}", pred.coords.copy(), gt.coords.copy())
        if first_pred is not None:
            report.overlays.append(first_pred)
        if last_pred is not None and last_pred[0] != first_pred[0]:
            report.overlays.append(last_pred)

    report.wall_clock_s = time.perf_counter() - start
    return report


def emit_report(report: RolloutReport, out_dir: str | Path) -> dict[str, Path]:
    """Write metrics.json, a plain-text table, per-frame metric plots, and
    skeleton overlay images. The metrics JSON is fully deterministic."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory not writable: {out_dir}") from exc

    written: dict[str, Path] = {}

    metrics_path = out_dir / "metrics.json"
    with open(metrics_path, "w") as fh:
        json.dump(report.to_metrics_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written["metrics"] = metrics_path

    table_path = out_dir / "table.txt"
    with open(table_path, "w") as fh:
        fh.write(f"{'seq':>4} {'frame':>6} {'mpjpe_mm':>12} "
                 f"{'angular_deg':>12} {'history':>12}\n")
        for fm in report.frames:
            fh.write(f"{fm.seq:>4} {fm.frame:>6} {fm.mpjpe_mm:>12.4f} "
                     f"{fm.angular_deg:>12.4f} {fm.history:>12}\n")
        if report.frames:
            fh.write(f"# mean mpjpe_mm {report.mean_mpjpe_mm:.4f} "
                     f"mean angular_deg {report.mean_angular_deg:.4f}\n")
        fh.write(f"# wall_clock_s {report.wall_clock_s:.3f}\n")
    written["table"] = table_path

    if report.frames:
        import matplotlib
        matplotlib.use("Agg", force=False)
        import matplotlib.pyplot as plt

        frames = np.arange(len(report.frames))
        for key, values in (
            ("mpjpe", [f.mpjpe_mm for f in report.frames]),
            ("angular", [f.angular_deg for f in report.frames]),
        ):
            fig, ax = plt.subplots(figsize=(6, 3))
            ax.plot(frames, values, lw=1.2)
            ax.set_xlabel("evaluated frame")
            ax.set_ylabel("mpjpe [mm]" if key == "mpjpe" else "angular error [deg]")
            ax.set_title(f"per-frame {key}")
            fig.tight_layout()
            path = out_dir / f"{key}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written[key] = path

        for idx, (name, pred, gt) in enumerate(report.overlays[:2]):
            fig = plt.figure(figsize=(5, 5))
            ax = fig.add_subplot(projection="3d")
            for coords, color, label in ((gt, "tab:green", "gt"),
                                         (pred, "tab:red", "pred")):
                ax.scatter(coords[:, 0], coords[:, 1], coords[:, 2],
                           c=color, s=12, label=label)
                for p, c in report.skeleton_edges:
                    ax.plot([coords[p, 0], coords[c, 0]],
                            [coords[p, 1], coords[c, 1]],
                            [coords[p, 2], coords[c, 2]], c=color, lw=0.8)
            ax.legend()
            ax.set_title(name)
            tag = "first" if idx == 0 else "last"
            path = out_dir / f"overlay_{tag}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written[f"overlay_{tag}"] = path
    return written
