"""Experiment configuration: one flat dataclass, loadable from nested YAML.

Config files may group keys under arbitrary sections (``model:``, ``train:``,
...); sections are flattened before matching field names, so both flat and
nested layouts parse. Filesystem paths never live here, which keeps the
config hash stable across machines and scratch directories.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError

MODES = ("dm", "ot-cfm")
SCENARIOS = ("clean", "sparse", "noisy", "no-init-pose")


@dataclass
class ExperimentConfig:
    # data/model shapes
    joints: int = 24
    window: int = 4            # frames per training window (T)
    points: int = 256          # points per frame (N)
    patch_count: int = 32      # patch centers per frame (G)
    patch_size: int = 32       # points per patch (M)
    k1: int = 128              # local patch feature width
    k2: int = 128              # global cloud feature width
    k_x: int = 128             # joint-wise pose feature width
    k_p: int = 256             # encoded cloud width
    heads: int = 4
    attn_dim: int = 64         # denoiser cross-attention width
    denoiser_hidden: int = 64
    tied_kv: bool = True       # value projection shares the key projection
    use_pose_encoder: bool = True
    mini_hidden: int = 64
    sa1_count: int = 16
    sa1_radius: float = 0.3
    sa1_dim: int = 64
    sa2_count: int = 4
    sa2_radius: float = 0.8
    sa_hidden: int = 64
    stgcn_layers: int = 2
    stgcn_channels: int = 64
    temporal_kernel: int = 3
    skeleton_edges: list[tuple[int, int]] | None = None

    # generative process
    mode: str = "dm"
    iterations: int = 20       # sampling iterations (I)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma: float = 0.01        # flow-matching path noise
    tau: float = 0.01          # smooth-L1 threshold
    two_pass: bool = False     # run coordinate and rotation chains separately

    # optimization
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    lr_halve_epoch: int | None = None   # default: two thirds of epochs
    max_steps: int | None = None
    seed: int = 0
    threads: int = 1           # 1 = deterministic single-threaded mode

    # evaluation scenario
    scenario: str = "clean"
    n_infer: int | None = None
    noise_std: float = 0.01
    t_infer: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.t_infer is not None and self.t_infer > self.window:
            raise ConfigError("t_infer must not exceed the training window")
        if self.n_infer is not None and self.n_infer > self.points:
            raise ConfigError("n_infer must not exceed the trained point count")
        if self.patch_size > self.points or self.patch_count > self.points:
            raise ConfigError("patch shape exceeds points per frame")
        if self.window < 2:
            raise ConfigError("window must cover at least two frames")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.skeleton_edges is not None:
            self.skeleton_edges = [tuple(e) for e in self.skeleton_edges]

    @property
    def effective_t_infer(self) -> int:
        return self.t_infer if self.t_infer is not None else self.window

    @property
    def effective_lr_halve_epoch(self) -> int:
        if self.lr_halve_epoch is not None:
            return self.lr_halve_epoch
        return max(1, (2 * self.epochs) // 3)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _flatten(tree: dict) -> dict:
    flat: dict = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            for sub, subval in _flatten(value).items():
                if sub in flat:
                    raise ConfigError(f"duplicate config key {sub!r}")
                flat[sub] = subval
        else:
            if key in flat:
                raise ConfigError(f"duplicate config key {key!r}")
            flat[key] = value
    return flat


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a YAML config file into an ExperimentConfig."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    flat = _flatten(tree)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
