"""Core domain types, 6D rotation algebra, and evaluation metrics.

Poses are root-relative: joint 0 is the root and its coordinates are zero
after relativization. Rotations travel as 6D vectors, the first two columns
of a rotation matrix laid out as ``[a1; a2]``; they decode to proper rotation
matrices by Gram-Schmidt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateRotationError,
    InvalidRotationError,
    InvalidSkeletonError,
    ShapeError,
)

ROOT_JOINT = 0

_DEGENERATE_TOL = 1e-12


def decode_rotation(r6: np.ndarray) -> np.ndarray:
    """Decode 6D rotation vectors into 3x3 rotation matrices.

    Accepts shape (..., 6); returns shape (..., 3, 3). The first three
    entries are a1, the last three a2; b1 = a1/|a1|, b2 is a2 orthogonalized
    against b1, b3 = b1 x b2.

    Raises DegenerateRotationError if a1 is zero or a1 and a2 are parallel.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ShapeError(f"expected trailing dim 6, got {r6.shape}")
    a1 = r6[..., :3]
    a2 = r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _DEGENERATE_TOL):
        raise DegenerateRotationError("first 6D column has zero norm")
    b1 = a1 / n1
    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _DEGENERATE_TOL):
        raise DegenerateRotationError("6D columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def encode_rotation(matrix: np.ndarray) -> np.ndarray:
    """Encode rotation matrices (..., 3, 3) as 6D vectors (..., 6).

    Keeps the first two columns. Raises InvalidRotationError unless the
    input is orthonormal within 1e-6 with determinant +1.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-2:] != (3, 3):
        raise ShapeError(f"expected trailing shape (3, 3), got {matrix.shape}")
    gram = matrix @ np.swapaxes(matrix, -1, -2)
    eye = np.eye(3)
    if np.max(np.abs(gram - eye)) > 1e-6:
        raise InvalidRotationError("matrix is not orthonormal within 1e-6")
    if np.any(np.linalg.det(matrix) < 0.0):
        raise InvalidRotationError("matrix has negative determinant")
    return np.concatenate([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)


def axis_angle_to_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < _DEGENERATE_TOL:
        raise DegenerateRotationError("rotation axis has zero norm")
    x, y, z = axis / norm
    c = float(np.cos(angle))
    s = float(np.sin(angle))
    t = 1.0 - c
    return np.array(
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly seeded random rotation via axis-angle."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-8:
        axis = rng.normal(size=3)
    angle = rng.uniform(-np.pi, np.pi)
    return axis_angle_to_matrix(axis, angle)


@dataclass
class PoseFrame:
    """One pose: per-joint coordinates (J, 3) in meters and 6D rotations (J, 6).

    Coordinates are root-relative once ``root_relative`` has been applied;
    joint 0 is the root by convention.
    """

    coords: np.ndarray
    rots: np.ndarray

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords)
        self.rots = np.asarray(self.rots)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be (J, 3), got {self.coords.shape}")
        if self.rots.ndim != 2 or self.rots.shape[1] != 6:
            raise ShapeError(f"rots must be (J, 6), got {self.rots.shape}")
        if self.coords.shape[0] != self.rots.shape[0]:
            raise ShapeError("coords and rots disagree on joint count")

    @property
    def joint_count(self) -> int:
        return self.coords.shape[0]

    def root_relative(self) -> "PoseFrame":
        """Subtract the root joint position from every joint."""
        return PoseFrame(self.coords - self.coords[ROOT_JOINT], self.rots.copy())

    def as_vector(self) -> np.ndarray:
        """Flatten to the (J, 9) layout [coords; rots]."""
        return np.concatenate([self.coords, self.rots], axis=1)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "PoseFrame":
        vec = np.asarray(vec)
        if vec.ndim != 2 or vec.shape[1] != 9:
            raise ShapeError(f"pose vector must be (J, 9), got {vec.shape}")
        return cls(vec[:, :3], vec[:, 3:])


@dataclass
class PoseSequence:
    """Ordered pose frames sharing one joint count."""

    frames: list[PoseFrame]

    def __post_init__(self) -> None:
        counts = {f.joint_count for f in self.frames}
        if len(counts) > 1:
            raise ShapeError(f"frames disagree on joint count: {sorted(counts)}")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, idx):
        return self.frames[idx]

    @property
    def joint_count(self) -> int:
        if not self.frames:
            raise ShapeError("empty pose sequence has no joint count")
        return self.frames[0].joint_count

    def coords(self) -> np.ndarray:
        return np.stack([f.coords for f in self.frames])

    def rots(self) -> np.ndarray:
        return np.stack([f.rots for f in self.frames])

    def as_array(self) -> np.ndarray:
        """Stack to (F, J, 9)."""
        return np.stack([f.as_vector() for f in self.frames])


@dataclass
class PointCloudSequence:
    """T frames of exactly N points each, shape (T, N, 3), meters."""

    frames: np.ndarray

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ShapeError(f"frames must be (T, N, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ShapeError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def points_per_frame(self) -> int:
        return self.frames.shape[1]


@dataclass
class SkeletonGraph:
    """Kinematic tree over joints: (parent, child) edges, root at index 0."""

    num_joints: int
    edges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        j = self.num_joints
        if j < 1:
            raise InvalidSkeletonError("skeleton needs at least one joint")
        for p, c in self.edges:
            if not (0 <= p < j and 0 <= c < j):
                raise InvalidSkeletonError(f"edge ({p}, {c}) outside [0, {j})")
        if len(self.edges) != j - 1:
            raise InvalidSkeletonError(
                f"a tree over {j} joints needs {j - 1} edges, got {len(self.edges)}"
            )
        seen = {ROOT_JOINT}
        frontier = [ROOT_JOINT]
        adj: dict[int, list[int]] = {i: [] for i in range(j)}
        for p, c in self.edges:
            adj[p].append(c)
            adj[c].append(p)
        while frontier:
            node = frontier.pop()
            for nxt in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        if len(seen) != j:
            raise InvalidSkeletonError("skeleton is disconnected")

    def parents(self) -> np.ndarray:
        """Parent index per joint; root maps to -1. Requires parent-rooted edges."""
        parents = np.full(self.num_joints, -1, dtype=np.int64)
        for p, c in self.edges:
            parents[c] = p
        return parents

    def adjacency(self) -> np.ndarray:
        """Symmetric 0/1 adjacency without self-loops, shape (J, J)."""
        a = np.zeros((self.num_joints, self.num_joints))
        for p, c in self.edges:
            a[p, c] = 1.0
            a[c, p] = 1.0
        return a

    def topological_children(self) -> list[tuple[int, int]]:
        """Edges ordered so each parent appears before its children."""
        parents = self.parents()
        order: list[tuple[int, int]] = []
        placed = {ROOT_JOINT}
        pending = [(int(parents[c]), c) for c in range(self.num_joints) if c != ROOT_JOINT]
        while pending:
            rest = []
            for p, c in pending:
                if p in placed:
                    order.append((p, c))
                    placed.add(c)
                else:
                    rest.append((p, c))
            if len(rest) == len(pending):
                raise InvalidSkeletonError("edges are not rooted at joint 0")
            pending = rest
        return order


def chain_skeleton(num_joints: int) -> SkeletonGraph:
    """Simple chain 0-1-2-...; handy for small tests."""
    return SkeletonGraph(num_joints, [(i, i + 1) for i in range(num_joints - 1)])


_HUMANOID_PARENTS = [
    -1,  # 0 pelvis
    0,   # 1 spine
    1,   # 2 chest
    2,   # 3 upper chest
    3,   # 4 neck
    4,   # 5 head
    3,   # 6 left shoulder
    6,   # 7 left elbow
    7,   # 8 left wrist
    8,   # 9 left hand
    3,   # 10 right shoulder
    10,  # 11 right elbow
    11,  # 12 right wrist
    12,  # 13 right hand
    0,   # 14 left hip
    14,  # 15 left knee
    15,  # 16 left ankle
    16,  # 17 left foot
    0,   # 18 right hip
    18,  # 19 right knee
    19,  # 20 right ankle
    20,  # 21 right foot
    17,  # 22 left toe
    21,  # 23 right toe
]


def humanoid_skeleton() -> SkeletonGraph:
    """Default 24-joint humanoid tree."""
    edges = [(p, c) for c, p in enumerate(_HUMANOID_PARENTS) if p >= 0]
    return SkeletonGraph(len(_HUMANOID_PARENTS), edges)


def mpjpe(pred: PoseFrame, gt: PoseFrame) -> float:
    """Mean per-joint position error in millimeters, on root-relative coords."""
    if pred.joint_count != gt.joint_count:
        raise ShapeError("poses disagree on joint count")
    dp = pred.root_relative().coords - gt.root_relative().coords
    return float(np.mean(np.linalg.norm(dp, axis=1)) * 1000.0)


def angular_error(pred: PoseFrame, gt: PoseFrame) -> float:
    """Mean geodesic angle between per-joint rotations, in degrees."""
    if pred.joint_count != gt.joint_count:
        raise ShapeError("poses disagree on joint count")
    rp = decode_rotation(pred.rots)
    rg = decode_rotation(gt.rots)
    rel = rp @ np.swapaxes(rg, -1, -2)
    trace = np.trace(rel, axis1=-2, axis2=-1)
    cos = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))
