"""Spatio-temporal point cloud encoder.

Per frame, farthest point sampling picks patch centers, each patch is the
center plus its nearest neighbors expressed relative to the center, and a
shared per-point network with max-pooling yields local patch features. A
two-level set-abstraction network produces one global feature per frame.
Fused patch tokens then pass through factorized attention (temporal over
frames, spatial over patches) and mean-pool to a single cloud embedding.

Grouping (FPS, kNN, ball queries) runs in numpy on raw coordinates; only the
learned maps run under torch, so gradients flow to parameters while the
grouping stays data-dependent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import PointCloudSequence
from .errors import ShapeError


def _lex_smallest(points: np.ndarray, candidates: np.ndarray) -> int:
    """Candidate index whose point is lexicographically smallest."""
    cand_pts = points[candidates]
    order = np.lexsort((cand_pts[:, 2], cand_pts[:, 1], cand_pts[:, 0]))
    return int(candidates[order[0]])


def canonical_seed(points: np.ndarray) -> int:
    """Index of the lexicographically smallest point (order-independent seed)."""
    return _lex_smallest(points, np.arange(points.shape[0]))


def fps(points: np.ndarray, count: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min farthest point sampling.

    Starts from seed_index; each step picks the point farthest from the
    selected set, breaking distance ties by lexicographically smallest
    coordinates so the selected point set depends only on geometry.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= count <= n:
        raise ShapeError(f"sample count {count} outside [1, {n}]")
    if not 0 <= seed_index < n:
        raise ShapeError(f"seed index {seed_index} outside [0, {n})")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = seed_index
    min_sq = np.sum((points - points[seed_index]) ** 2, axis=1)
    min_sq[seed_index] = -1.0  # selected points never re-enter
    for s in range(1, count):
        best = min_sq.max()
        candidates = np.flatnonzero(min_sq == best)
        pick = _lex_smallest(points, candidates)
        chosen[s] = pick
        min_sq = np.minimum(min_sq, np.sum((points - points[pick]) ** 2, axis=1))
        min_sq[pick] = -1.0
    return chosen


@dataclass
class PatchSet:
    """Patch centers (T, G, 3) and center-relative patches (T, G, M, 3).

    The first point of every patch is its own center (all zeros); the rest
    are ordered by ascending distance to the center.
    """

    centers: np.ndarray
    patches: np.ndarray


def _knn_patch(points: np.ndarray, center_idx: int, m: int) -> np.ndarray:
    d = np.linalg.norm(points - points[center_idx], axis=1)
    d[center_idx] = np.inf
    order = np.argsort(d, kind="stable")[: m - 1]
    idx = np.concatenate([[center_idx], order])
    return points[idx] - points[center_idx]


def make_patches(cloud, g: int, m: int, seed_index: int = 0) -> PatchSet:
    """FPS patch centers plus their m-1 nearest neighbors, per frame."""
    frames = cloud.frames if isinstance(cloud, PointCloudSequence) else np.asarray(cloud)
    t, n, _ = frames.shape
    if m > n:
        raise ShapeError(f"patch size {m} exceeds point count {n}")
    centers = np.zeros((t, g, 3))
    patches = np.zeros((t, g, m, 3))
    for f in range(t):
        pts = frames[f].astype(np.float64)
        centers_idx = fps(pts, g, seed_index)
        centers[f] = pts[centers_idx]
        for gi, ci in enumerate(centers_idx):
            patches[f, gi] = _knn_patch(pts, int(ci), m)
    return PatchSet(centers, patches)


def fuse_features(local, global_feats):
    """Concatenate per-patch local features with the frame's duplicated
    global feature: (..., T, G, k1) + (..., T, k2) -> (..., T, G, k1+k2)."""
    if local.shape[-3] != global_feats.shape[-2]:
        raise ShapeError("local and global features disagree on frame count")
    g = local.shape[-2]
    if isinstance(local, torch.Tensor):
        dup = global_feats.unsqueeze(-2).expand(*global_feats.shape[:-1], g,
                                                global_feats.shape[-1])
        return torch.cat([local, dup], dim=-1)
    dup = np.repeat(np.expand_dims(global_feats, -2), g, axis=-2)
    return np.concatenate([local, dup], axis=-1)


class MiniPointNet(nn.Module):
    """Shared per-point MLP followed by max-pooling over each patch."""

    def __init__(self, in_dim: int = 3, hidden: int = 64, out_dim: int = 128):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # patches (..., M, 3) -> (..., out_dim)
        return self.mlp(patches).max(dim=-2).values


class SetAbstraction(nn.Module):
    """One PointNet++-style level: shared map over grouped points, masked max."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, grouped: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # grouped (..., C, N, D), mask (..., C, N) with >=1 valid entry per group
        h = self.mlp(grouped)
        h = h.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        return h.max(dim=-2).values


class GlobalCloudEncoder(nn.Module):
    """Two set-abstraction levels then a global max-pool, one vector per frame.

    Grouping is radius-based with no sample cap, so the output is invariant
    to point permutation and to duplicated points.
    """

    def __init__(self, sa1_dim: int = 64, hidden: int = 64, out_dim: int = 128):
        super().__init__()
        self.sa1 = SetAbstraction(3, hidden, sa1_dim)
        self.sa2 = SetAbstraction(3 + sa1_dim, hidden, out_dim)

    def forward(
        self,
        points: torch.Tensor,
        centers1: torch.Tensor,
        mask1: torch.Tensor,
        centers2: torch.Tensor,
        mask2: torch.Tensor,
    ) -> torch.Tensor:
        # points (B,T,N,3); centers1 (B,T,C1,3); mask1 (B,T,C1,N);
        # centers2 (B,T,C2,3); mask2 (B,T,C2,C1) -> (B,T,out_dim)
        rel1 = points.unsqueeze(-3) - centers1.unsqueeze(-2)
        f1 = self.sa1(rel1, mask1)
        rel2 = centers1.unsqueeze(-3) - centers2.unsqueeze(-2)
        c2 = centers2.shape[-2]
        f1_dup = f1.unsqueeze(-3).expand(*f1.shape[:-2], c2, *f1.shape[-2:])
        f2 = self.sa2(torch.cat([rel2, f1_dup], dim=-1), mask2)
        return f2.max(dim=-2).values


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with optionally tied key/value projection.

    With ``tied_kv`` the value tokens are exactly the projected keys. The
    output projection is optional; denoiser heads apply their own output map
    instead.
    """

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int, heads: int = 1,
                 tied_kv: bool = True, out_dim: int | None = None):
        super().__init__()
        if attn_dim % heads != 0:
            raise ShapeError(f"attention dim {attn_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.q_proj = nn.Linear(query_dim, attn_dim)
        self.k_proj = nn.Linear(key_dim, attn_dim)
        self.v_proj = None if tied_kv else nn.Linear(key_dim, attn_dim)
        self.out_proj = nn.Linear(attn_dim, out_dim) if out_dim is not None else None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.head_dim).transpose(-3, -2)

    def forward(self, query: torch.Tensor, keys: torch.Tensor,
                return_weights: bool = False):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(keys))
        v = k if self.v_proj is None else self._split(self.v_proj(keys))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = torch.softmax(logits, dim=-1)
        out = weights @ v
        out = out.transpose(-3, -2).flatten(-2)
        if self.out_proj is not None:
            out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard transformer sinusoidal table, shape (length, dim)."""
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=dtype)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq[: dim // 2])
    return table


@dataclass
class CloudGroups:
    """Numpy grouping products consumed by the torch encoder."""

    patches: np.ndarray     # (B, T, G, M, 3)
    points: np.ndarray      # (B, T, N, 3)
    centers1: np.ndarray    # (B, T, C1, 3)
    mask1: np.ndarray       # (B, T, C1, N) bool
    centers2: np.ndarray    # (B, T, C2, 3)
    mask2: np.ndarray       # (B, T, C2, C1) bool


def group_cloud_sequence(
    clouds: np.ndarray,
    patch_count: int,
    patch_size: int,
    sa1_count: int,
    sa1_radius: float,
    sa2_count: int,
    sa2_radius: float,
    seed_index: int = 0,
) -> CloudGroups:
    """Run all geometric grouping for a batch of cloud windows (B, T, N, 3).

    Set-abstraction centers use the canonical lexicographic FPS seed so the
    global branch stays permutation-invariant; patch centers use seed_index.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    b, t, n, _ = clouds.shape
    patches = np.zeros((b, t, patch_count, patch_size, 3))
    centers1 = np.zeros((b, t, sa1_count, 3))
    mask1 = np.zeros((b, t, sa1_count, n), dtype=bool)
    centers2 = np.zeros((b, t, sa2_count, 3))
    mask2 = np.zeros((b, t, sa2_count, sa1_count), dtype=bool)
    for bi in range(b):
        for ti in range(t):
            pts = clouds[bi, ti]
            patch = make_patches(pts[None], patch_count, patch_size, seed_index)
            patches[bi, ti] = patch.patches[0]
            c1_idx = fps(pts, sa1_count, canonical_seed(pts))
            c1 = pts[c1_idx]
            centers1[bi, ti] = c1
            d1 = np.linalg.norm(pts[None, :, :] - c1[:, None, :], axis=-1)
            mask1[bi, ti] = d1 <= sa1_radius
            c2_idx = fps(c1, sa2_count, canonical_seed(c1))
            c2 = c1[c2_idx]
            centers2[bi, ti] = c2
            d2 = np.linalg.norm(c1[None, :, :] - c2[:, None, :], axis=-1)
            mask2[bi, ti] = d2 <= sa2_radius
    return CloudGroups(patches, clouds, centers1, mask1, centers2, mask2)


class SpatioTemporalCloudEncoder(nn.Module):
    """Full cloud branch: local + global features, fusion, factorized
    attention over time then patches, mean-pooled to one vector."""

    def __init__(
        self,
        k1: int = 128,
        k2: int = 128,
        k_p: int = 256,
        heads: int = 4,
        tied_kv: bool = True,
        mini_hidden: int = 64,
        sa1_dim: int = 64,
        sa_hidden: int = 64,
    ):
        super().__init__()
        k3 = k1 + k2
        self.local_net = MiniPointNet(3, mini_hidden, k1)
        self.global_net = GlobalCloudEncoder(sa1_dim, sa_hidden, k2)
        self.temporal_attn = MultiHeadAttention(k3, k3, k3, heads, tied_kv, out_dim=k3)
        self.spatial_attn = MultiHeadAttention(k3, k3, k3, heads, tied_kv, out_dim=k_p)

    def _dtype_device(self):
        p = next(self.parameters())
        return p.dtype, p.device

    def forward(self, groups: CloudGroups, return_weights: bool = False):
        dtype, device = self._dtype_device()

        def t(arr, bool_=False):
            return torch.as_tensor(arr, dtype=torch.bool if bool_ else dtype,
                                   device=device)

        local = self.local_net(t(groups.patches))              # (B,T,G,k1)
        global_feats = self.global_net(
            t(groups.points), t(groups.centers1), t(groups.mask1, True),
            t(groups.centers2), t(groups.mask2, True))          # (B,T,k2)
        fused = fuse_features(local, global_feats)              # (B,T,G,k3)

        b, frames, g, k3 = fused.shape
        pos = sinusoidal_positions(frames, k3, dtype=dtype).to(device)
        tokens = fused + pos[None, :, None, :]

        # temporal attention: tokens along T, independently per patch
        tt = tokens.permute(0, 2, 1, 3)                         # (B,G,T,k3)
        tt, w_t = self.temporal_attn(tt, tt, return_weights=True)
        tt = tt.permute(0, 2, 1, 3)                             # (B,T,G,k3)

        # spatial attention: tokens along G, independently per frame
        st, w_s = self.spatial_attn(tt, tt, return_weights=True)  # (B,T,G,k_p)

        pooled = st.mean(dim=(1, 2))                            # (B,k_p)
        if return_weights:
            return pooled, (w_t, w_s)
        return pooled
