"""Pose-history encoder: spatio-temporal graph convolution over the skeleton.

The history of T-1 pose frames (9 channels per joint: 3 coordinates plus the
6D rotation) passes through stacked layers of graph convolution with the
symmetrically normalized adjacency and temporal convolution along frames,
is average-pooled over time, and mapped per joint to the feature width. A
per-joint concatenation with the encoded cloud vector yields the joint-wise
conditioning features.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .core import SkeletonGraph
from .errors import ShapeError


def normalized_adjacency(skeleton: SkeletonGraph) -> np.ndarray:
    """D^(-1/2) (A + I) D^(-1/2) over the skeleton's undirected edges."""
    a = skeleton.adjacency() + np.eye(skeleton.num_joints)
    d = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


class GraphConv(nn.Module):
    """x -> A_hat x W over the joint axis."""

    def __init__(self, adjacency: np.ndarray, in_dim: int, out_dim: int):
        super().__init__()
        self.register_buffer("a_hat", torch.as_tensor(adjacency, dtype=torch.float32))
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x (B, T, J, C)
        mixed = torch.einsum("jk,btkc->btjc", self.a_hat.to(x.dtype), x)
        return self.linear(mixed)


class TemporalConv(nn.Module):
    """Per-joint 1D convolution along the frame axis, same length out."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 != 1:
            raise ShapeError("temporal kernel must be odd")
        self.conv = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, j, c = x.shape
        flat = x.permute(0, 2, 3, 1).reshape(b * j, c, t)
        out = self.conv(flat)
        return out.reshape(b, j, c, t).permute(0, 3, 1, 2)


class PoseHistoryEncoder(nn.Module):
    """Stacked (graph conv, temporal conv, ReLU) layers, temporal average
    pooling, then a shared per-joint MLP to the output width."""

    def __init__(
        self,
        skeleton: SkeletonGraph,
        in_dim: int = 9,
        channels: int = 64,
        out_dim: int = 128,
        layers: int = 2,
        temporal_kernel: int = 3,
    ):
        super().__init__()
        a_hat = normalized_adjacency(skeleton)
        dims = [in_dim] + [channels] * layers
        self.graph_convs = nn.ModuleList(
            GraphConv(a_hat, dims[i], dims[i + 1]) for i in range(layers))
        self.temporal_convs = nn.ModuleList(
            TemporalConv(dims[i + 1], temporal_kernel) for i in range(layers))
        self.head = nn.Sequential(
            nn.Linear(channels, channels),
            nn.ReLU(),
            nn.Linear(channels, out_dim),
        )

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        # history (B, T-1, J, 9) -> (B, J, out_dim)
        if history.ndim != 4:
            raise ShapeError(f"history must be (B, T-1, J, C), got {history.shape}")
        x = history
        for gconv, tconv in zip(self.graph_convs, self.temporal_convs):
            x = torch.relu(tconv(gconv(x)))
        pooled = x.mean(dim=1)
        return self.head(pooled)


def fuse_pose_point(joint_feats, cloud_feat):
    """Per-joint concat of joint features (..., J, k_x) with the duplicated
    cloud vector (..., k_p) -> (..., J, k_x + k_p)."""
    if isinstance(joint_feats, torch.Tensor):
        j = joint_feats.shape[-2]
        dup = cloud_feat.unsqueeze(-2).expand(*cloud_feat.shape[:-1], j,
                                              cloud_feat.shape[-1])
        return torch.cat([joint_feats, dup], dim=-1)
    j = joint_feats.shape[-2]
    dup = np.repeat(np.expand_dims(cloud_feat, -2), j, axis=-2)
    return np.concatenate([joint_feats, dup], axis=-1)
