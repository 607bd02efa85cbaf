"""Synthetic articulated-body sequences and the on-disk dataset format.

A body is a skeleton dressed with capsules around its bones. A motion script
drives per-joint rotations with smooth seeded angle profiles; forward
kinematics yields ground-truth poses and point clouds are sampled on the
capsule surfaces, optionally culled to a single virtual viewpoint.

Datasets are a directory of flat little-endian float32 arrays plus a JSON
manifest, chosen so round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    PointCloudSequence,
    PoseFrame,
    PoseSequence,
    SkeletonGraph,
    axis_angle_to_matrix,
    encode_rotation,
    humanoid_skeleton,
)
from .errors import DatasetFormatError, ShapeError

DEFAULT_CAMERA = np.array([0.0, -3.0, 1.0])


@dataclass
class SyntheticBody:
    """Skeleton plus capsule geometry: one bone per edge, shared limb radius."""

    skeleton: SkeletonGraph
    bone_lengths: np.ndarray
    limb_radius: float
    rest_directions: np.ndarray

    def __post_init__(self) -> None:
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=np.float64)
        self.rest_directions = np.asarray(self.rest_directions, dtype=np.float64)
        e = len(self.skeleton.edges)
        if self.bone_lengths.shape != (e,):
            raise ShapeError(f"bone_lengths must be ({e},), got {self.bone_lengths.shape}")
        if self.rest_directions.shape != (e, 3):
            raise ShapeError(f"rest_directions must be ({e}, 3)")
        if np.any(self.bone_lengths <= 0):
            raise ShapeError("bone lengths must be positive")
        if self.limb_radius <= 0:
            raise ShapeError("limb radius must be positive")
        norms = np.linalg.norm(self.rest_directions, axis=1)
        self.rest_directions = self.rest_directions / norms[:, None]

    def rest_offsets(self) -> np.ndarray:
        """Child offset in the parent frame, ordered like skeleton.edges."""
        return self.rest_directions * self.bone_lengths[:, None]


_UP = np.array([0.0, 0.0, 1.0])
_DOWN = -_UP
_LEFT = np.array([1.0, 0.0, 0.0])
_RIGHT = -_LEFT
_FWD = np.array([0.0, 1.0, 0.0])

# direction, length per humanoid edge (child order matches humanoid_skeleton)
_HUMANOID_BONES = {
    1: (_UP, 0.15), 2: (_UP, 0.15), 3: (_UP, 0.15), 4: (_UP, 0.10), 5: (_UP, 0.15),
    6: (_LEFT, 0.20), 7: (_LEFT, 0.28), 8: (_LEFT, 0.25), 9: (_LEFT, 0.08),
    10: (_RIGHT, 0.20), 11: (_RIGHT, 0.28), 12: (_RIGHT, 0.25), 13: (_RIGHT, 0.08),
    14: (_LEFT, 0.10), 15: (_DOWN, 0.40), 16: (_DOWN, 0.40), 17: (_FWD, 0.15),
    18: (_RIGHT, 0.10), 19: (_DOWN, 0.40), 20: (_DOWN, 0.40), 21: (_FWD, 0.15),
    22: (_FWD, 0.08), 23: (_FWD, 0.08),
}


def humanoid_body(limb_radius: float = 0.06) -> SyntheticBody:
    """Default 24-joint humanoid body, roughly 1.8 m tall."""
    skeleton = humanoid_skeleton()
    dirs = np.zeros((len(skeleton.edges), 3))
    lengths = np.zeros(len(skeleton.edges))
    for i, (_, child) in enumerate(skeleton.edges):
        d, length = _HUMANOID_BONES[child]
        dirs[i] = d
        lengths[i] = length
    return SyntheticBody(skeleton, lengths, limb_radius, dirs)


def chain_body(skeleton: SkeletonGraph, bone_length: float = 0.3,
               limb_radius: float = 0.05) -> SyntheticBody:
    """Body over an arbitrary skeleton with uniform bones pointing up."""
    e = len(skeleton.edges)
    return SyntheticBody(
        skeleton,
        np.full(e, bone_length),
        limb_radius,
        np.tile(_UP, (e, 1)),
    )


@dataclass
class MotionScript:
    """Smooth seeded per-joint angle profiles about fixed random axes.

    angle_j(t) = sum_k amp[j,k] * sin(2*pi*freq[j,k]*t + phase[j,k]); the
    angular velocity is the analytic derivative, so its magnitude is bounded
    by ``max_angular_speed``.
    """

    axes: np.ndarray
    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    seed: int

    @classmethod
    def random(cls, num_joints: int, seed: int, harmonics: int = 3,
               max_amplitude: float = 0.5, max_frequency: float = 1.0) -> "MotionScript":
        rng = np.random.default_rng(seed)
        axes = rng.normal(size=(num_joints, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        amplitudes = rng.uniform(-max_amplitude, max_amplitude,
                                 size=(num_joints, harmonics)) / harmonics
        frequencies = rng.uniform(0.1, max_frequency, size=(num_joints, harmonics))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(num_joints, harmonics))
        return cls(axes, amplitudes, frequencies, phases, seed)

    @classmethod
    def still(cls, num_joints: int, seed: int = 0) -> "MotionScript":
        """Zero angular velocity everywhere: the body holds its rest pose."""
        axes = np.tile(np.array([1.0, 0.0, 0.0]), (num_joints, 1))
        zeros = np.zeros((num_joints, 1))
        return cls(axes, zeros, np.ones((num_joints, 1)), zeros, seed)

    def angles(self, t: float) -> np.ndarray:
        """Joint angles (J,) at time t seconds."""
        arg = 2.0 * np.pi * self.frequencies * t + self.phases
        return np.sum(self.amplitudes * np.sin(arg), axis=1)

    def rotations(self, t: float) -> np.ndarray:
        """Local joint rotations (J, 3, 3) at time t."""
        angles = self.angles(t)
        return np.stack([
            axis_angle_to_matrix(self.axes[j], angles[j])
            for j in range(self.axes.shape[0])
        ])

    def max_angular_speed(self) -> np.ndarray:
        """Upper bound on |d angle / dt| per joint (rad/s)."""
        return np.sum(2.0 * np.pi * self.frequencies * np.abs(self.amplitudes), axis=1)


def forward_kinematics(body: SyntheticBody, rotations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World joint positions (J, 3) and world rotations (J, 3, 3).

    ``rotations`` are local per-joint matrices; the root sits at the origin.
    """
    skeleton = body.skeleton
    j = skeleton.num_joints
    offsets = body.rest_offsets()
    edge_index = {edge: i for i, edge in enumerate(skeleton.edges)}
    positions = np.zeros((j, 3))
    world = np.zeros((j, 3, 3))
    world[0] = rotations[0]
    for parent, child in skeleton.topological_children():
        off = offsets[edge_index[(parent, child)]]
        positions[child] = positions[parent] + world[parent] @ off
        world[child] = world[parent] @ rotations[child]
    return positions, world


def _segment_areas(body: SyntheticBody) -> np.ndarray:
    r = body.limb_radius
    side = 2.0 * np.pi * r * body.bone_lengths
    caps = 4.0 * np.pi * r * r
    return side + caps


def _orthonormal_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0])
    if abs(axis @ helper) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    n1 = np.cross(axis, helper)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(axis, n1)
    return n1, n2


def _sample_capsule(rng: np.random.Generator, p0: np.ndarray, p1: np.ndarray,
                    radius: float) -> tuple[np.ndarray, np.ndarray]:
    """One point on the capsule surface around segment p0-p1, with its normal."""
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    side_area = 2.0 * np.pi * radius * length
    cap_area = 4.0 * np.pi * radius * radius
    if length > 1e-12 and rng.uniform() < side_area / (side_area + cap_area):
        u = axis / length
        n1, n2 = _orthonormal_frame(u)
        z = rng.uniform(0.0, length)
        psi = rng.uniform(0.0, 2.0 * np.pi)
        radial = np.cos(psi) * n1 + np.sin(psi) * n2
        return p0 + z * u + radius * radial, radial
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    if length > 1e-12:
        u = axis / length
        center = p1 if d @ u >= 0 else p0
    else:
        center = p0
    return center + radius * d, d


def generate_sequence(
    body: SyntheticBody,
    script: MotionScript,
    frames: int,
    points_per_frame: int,
    fps: float = 30.0,
    seed: int = 0,
    cull_backfaces: bool = False,
    camera: np.ndarray | None = None,
) -> tuple[PointCloudSequence, PoseSequence]:
    """Generate one synchronized (point cloud, pose) sequence.

    Pure function of (body, script, frames, points_per_frame, fps, seed,
    culling setup): the same arguments reproduce bit-identical output.
    """
    if frames < 1:
        raise ShapeError("need at least one frame")
    if points_per_frame < body.skeleton.num_joints:
        raise ShapeError("points_per_frame must be >= joint count")
    camera = DEFAULT_CAMERA if camera is None else np.asarray(camera, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, script.seed]))
    areas = _segment_areas(body)
    weights = areas / areas.sum()
    edges = body.skeleton.edges

    clouds = np.zeros((frames, points_per_frame, 3), dtype=np.float32)
    pose_frames: list[PoseFrame] = []
    for f in range(frames):
        t = f / fps
        local_rots = script.rotations(t)
        positions, _ = forward_kinematics(body, local_rots)
        pose_frames.append(PoseFrame(
            positions.astype(np.float32),
            encode_rotation(local_rots).astype(np.float32),
        ))
        collected = 0
        while collected < points_per_frame:
            e = int(rng.choice(len(edges), p=weights))
            parent, child = edges[e]
            point, normal = _sample_capsule(
                rng, positions[parent], positions[child], body.limb_radius)
            if cull_backfaces and normal @ (camera - point) <= 0.0:
                continue
            clouds[f, collected] = point.astype(np.float32)
            collected += 1
    return PointCloudSequence(clouds), PoseSequence(pose_frames)


@dataclass
class SequenceRecord:
    id: str
    frames: int
    points_file: str
    coords_file: str
    rots_file: str


@dataclass
class DatasetManifest:
    """Declared shapes for a dataset directory; every record must match on disk."""

    version: int
    num_joints: int
    window: int
    points_per_frame: int
    fps: float
    records: list[SequenceRecord]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "num_joints": self.num_joints,
            "window": self.window,
            "points_per_frame": self.points_per_frame,
            "fps": self.fps,
            "sequences": [vars(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        try:
            records = [SequenceRecord(**r) for r in data["sequences"]]
            return cls(
                version=int(data["version"]),
                num_joints=int(data["num_joints"]),
                window=int(data["window"]),
                points_per_frame=int(data["points_per_frame"]),
                fps=float(data["fps"]),
                records=records,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed manifest: {exc}") from exc


def write_dataset(
    directory: str | Path,
    sequences: list[tuple[PointCloudSequence, PoseSequence]],
    window: int = 4,
    fps: float = 30.0,
) -> DatasetManifest:
    """Write sequences as float32 little-endian blobs plus manifest.json.

    Arrays are stored exactly as float32, so read_dataset returns
    bit-identical values for float32 input.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    num_joints = sequences[0][1].joint_count if sequences else 0
    points_per_frame = sequences[0][0].points_per_frame if sequences else 0
    records = []
    for i, (cloud, poses) in enumerate(sequences):
        if len(cloud) != len(poses):
            raise ShapeError(f"sequence {i}: cloud and pose frame counts differ")
        rec = SequenceRecord(
            id=f"{i:04d}",
            frames=len(poses),
            points_file=f"seq_{i:04d}_points.f32",
            coords_file=f"seq_{i:04d}_coords.f32",
            rots_file=f"seq_{i:04d}_rots.f32",
        )
        cloud.frames.astype("<f4").tofile(directory / rec.points_file)
        poses.coords().astype("<f4").tofile(directory / rec.coords_file)
        poses.rots().astype("<f4").tofile(directory / rec.rots_file)
        records.append(rec)
    manifest = DatasetManifest(1, num_joints, window, points_per_frame, fps, records)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return manifest


def _read_array(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise DatasetFormatError(f"missing data file {path.name}")
    expected = int(np.prod(shape)) * 4
    actual = path.stat().st_size
    if actual != expected:
        raise DatasetFormatError(
            f"{path.name}: expected {expected} bytes for shape {shape}, found {actual}")
    return np.fromfile(path, dtype="<f4").reshape(shape)


def read_dataset(
    directory: str | Path,
) -> tuple[DatasetManifest, list[tuple[PointCloudSequence, PoseSequence]]]:
    """Load a dataset directory, validating shapes against the manifest."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"no manifest.json in {directory}")
    try:
        with open(manifest_path) as fh:
            manifest = DatasetManifest.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest is not valid JSON: {exc}") from exc
    sequences = []
    for rec in manifest.records:
        points = _read_array(directory / rec.points_file,
                             (rec.frames, manifest.points_per_frame, 3))
        coords = _read_array(directory / rec.coords_file,
                             (rec.frames, manifest.num_joints, 3))
        rots = _read_array(directory / rec.rots_file,
                           (rec.frames, manifest.num_joints, 6))
        poses = PoseSequence([PoseFrame(coords[f], rots[f]) for f in range(rec.frames)])
        sequences.append((PointCloudSequence(points), poses))
    return manifest, sequences
