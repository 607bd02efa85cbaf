"""Full generative pose model: encoders, denoisers, loss, and sampling glue.

The conditioning path encodes a window of point clouds to one vector and the
pose history to joint-wise features, concatenated per joint. Training
perturbs the ground-truth pose at a random iteration and regresses it back;
sampling drives the iterative schemes with closures over the conditioning.
All randomness is drawn up front into a PerturbationDraw so a loss value is
a pure function of parameters given the draw (which is what the finite
difference checks exercise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .cloud_encoder import SpatioTemporalCloudEncoder, group_cloud_sequence
from .config import ExperimentConfig
from .core import SkeletonGraph, chain_skeleton, humanoid_skeleton
from .errors import NumericalError, ShapeError
from .pose_encoder import PoseHistoryEncoder, fuse_pose_point
from .regressor import (
    CfmSchedule,
    CoordinateDenoiser,
    DmSchedule,
    PerturbedPose,
    RotationDenoiser,
    embeddings,
    ot_pair,
    perturb_cfm,
    perturb_dm,
    sample_cfm,
    sample_dm,
    smooth_l1,
)


def build_skeleton(cfg: ExperimentConfig) -> SkeletonGraph:
    """Skeleton from explicit config edges, else the default for the joint
    count (24 joints: humanoid; otherwise a chain)."""
    if cfg.skeleton_edges is not None:
        return SkeletonGraph(cfg.joints, list(cfg.skeleton_edges))
    if cfg.joints == 24:
        return humanoid_skeleton()
    return chain_skeleton(cfg.joints)


def build_schedule(cfg: ExperimentConfig):
    if cfg.mode == "dm":
        return DmSchedule.linear(cfg.iterations, cfg.beta_start, cfg.beta_end)
    return CfmSchedule(cfg.iterations, cfg.sigma)


class GenerativePoseModel(nn.Module):
    """Cloud encoder + pose-history encoder + factorized denoisers."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg
        self.skeleton = build_skeleton(cfg)
        self.cloud_encoder = SpatioTemporalCloudEncoder(
            k1=cfg.k1, k2=cfg.k2, k_p=cfg.k_p, heads=cfg.heads,
            tied_kv=cfg.tied_kv, mini_hidden=cfg.mini_hidden,
            sa1_dim=cfg.sa1_dim, sa_hidden=cfg.sa_hidden)
        if cfg.use_pose_encoder:
            self.pose_encoder = PoseHistoryEncoder(
                self.skeleton, in_dim=9, channels=cfg.stgcn_channels,
                out_dim=cfg.k_x, layers=cfg.stgcn_layers,
                temporal_kernel=cfg.temporal_kernel)
            cond_dim = cfg.k_x + cfg.k_p
        else:
            self.pose_encoder = None
            cond_dim = cfg.k_p
        self.cond_dim = cond_dim
        self.coord_denoiser = CoordinateDenoiser(
            cond_dim, cfg.attn_dim, cfg.heads, cfg.denoiser_hidden)
        self.rot_denoiser = RotationDenoiser(
            cond_dim, cfg.attn_dim, cfg.heads, cfg.denoiser_hidden)

    def _dtype_device(self):
        p = next(self.parameters())
        return p.dtype, p.device

    def condition(self, clouds: np.ndarray, history: np.ndarray,
                  fps_seed: int = 0) -> torch.Tensor:
        """Joint-wise conditioning features (B, J, cond_dim).

        clouds: (B, T, N, 3); history: (B, T-1, J, 9). Without the pose
        encoder the encoded cloud vector is duplicated across joints.
        """
        cfg = self.cfg
        dtype, device = self._dtype_device()
        groups = group_cloud_sequence(
            clouds, cfg.patch_count, cfg.patch_size, cfg.sa1_count,
            cfg.sa1_radius, cfg.sa2_count, cfg.sa2_radius, fps_seed)
        cloud_feat = self.cloud_encoder(groups)
        if self.pose_encoder is None:
            j = self.cfg.joints
            return cloud_feat.unsqueeze(1).expand(-1, j, -1)
        hist = torch.as_tensor(np.asarray(history), dtype=dtype, device=device)
        joint_feats = self.pose_encoder(hist)
        return fuse_pose_point(joint_feats, cloud_feat)

    def _embedding_tensors(self, i, batch: int):
        dtype, device = self._dtype_device()
        joints = self.cfg.joints
        if np.ndim(i) == 0:
            emb = embeddings(int(i), joints)
            e_i = np.broadcast_to(emb.e_i, (batch, joints, 3))
            e_j = np.broadcast_to(emb.e_j, (batch, joints, 3))
        else:
            embs = [embeddings(int(ib), joints) for ib in np.asarray(i)]
            e_i = np.stack([e.e_i for e in embs])
            e_j = np.broadcast_to(embs[0].e_j, (batch, joints, 3))
        return (torch.as_tensor(e_i.copy(), dtype=dtype, device=device),
                torch.as_tensor(e_j.copy(), dtype=dtype, device=device))

    def denoise_coords_step(self, noisy_coords: torch.Tensor, i,
                            cond: torch.Tensor) -> torch.Tensor:
        e_i, e_j = self._embedding_tensors(i, noisy_coords.shape[0])
        return self.coord_denoiser(noisy_coords, cond, e_i, e_j)

    def denoise_rots_step(self, noisy_rots: torch.Tensor,
                          pred_coords: torch.Tensor, i,
                          cond: torch.Tensor) -> torch.Tensor:
        e_i, e_j = self._embedding_tensors(i, noisy_rots.shape[0])
        return self.rot_denoiser(noisy_rots, pred_coords, cond, e_i, e_j)

    def sample(self, clouds: np.ndarray, history: np.ndarray, schedule,
               rng: torch.Generator, fps_seed: int = 0,
               two_pass: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Sample one pose per batch entry; returns (coords, rots) arrays."""
        two_pass = self.cfg.two_pass if two_pass is None else two_pass
        dtype, _ = self._dtype_device()
        with torch.no_grad():
            cond = self.condition(clouds, history, fps_seed)

            def coord_fn(x, i):
                return self.denoise_coords_step(x, i, cond)

            def rot_fn(x, pred_j, i):
                return self.denoise_rots_step(x, pred_j, i, cond)

            batch = clouds.shape[0]
            sampler = sample_dm if isinstance(schedule, DmSchedule) else sample_cfm
            coords, rots = sampler(coord_fn, rot_fn, schedule, batch,
                                   self.cfg.joints, rng, dtype, two_pass)
        return coords.cpu().numpy(), rots.cpu().numpy()


@dataclass
class PerturbationDraw:
    """All randomness of one training step, drawn before the loss."""

    i: np.ndarray                      # (B,) iteration per sample
    noise_coords: np.ndarray           # (B, J, 3)
    noise_rots: np.ndarray             # (B, J, 6)
    path_noise_coords: np.ndarray | None = None   # flow matching only
    path_noise_rots: np.ndarray | None = None
    fps_seed: int = 0


def draw_perturbation(rng: np.random.Generator, schedule, batch: int,
                      joints: int, n_points: int) -> PerturbationDraw:
    i = rng.integers(0, schedule.iterations + 1, size=batch)
    noise_c = rng.standard_normal((batch, joints, 3))
    noise_r = rng.standard_normal((batch, joints, 6))
    fps_seed = int(rng.integers(0, n_points))
    if isinstance(schedule, CfmSchedule):
        return PerturbationDraw(
            i, noise_c, noise_r,
            rng.standard_normal((batch, joints, 3)),
            rng.standard_normal((batch, joints, 6)),
            fps_seed)
    return PerturbationDraw(i, noise_c, noise_r, fps_seed=fps_seed)


def _invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.shape[0])
    return inv


def perturb_batch(gt_coords: np.ndarray, gt_rots: np.ndarray, schedule,
                  draw: PerturbationDraw) -> PerturbedPose:
    """Apply the mode-matching perturbation; flow matching first couples
    noise to data with the exact optimal-transport assignment (separately
    for coordinates and rotations)."""
    if isinstance(schedule, DmSchedule):
        return perturb_dm(gt_coords, gt_rots, draw.i, schedule,
                          draw.noise_coords, draw.noise_rots)
    z0_c = draw.noise_coords[_invert_permutation(ot_pair(draw.noise_coords, gt_coords))]
    z0_r = draw.noise_rots[_invert_permutation(ot_pair(draw.noise_rots, gt_rots))]
    return perturb_cfm(gt_coords, gt_rots, draw.i, schedule, z0_c, z0_r,
                       draw.path_noise_coords, draw.path_noise_rots)


@dataclass
class TrainingBatch:
    clouds: np.ndarray       # (B, T, N, 3)
    history: np.ndarray      # (B, T-1, J, 9)
    gt_coords: np.ndarray    # (B, J, 3)
    gt_rots: np.ndarray      # (B, J, 6)


def training_loss(model: GenerativePoseModel, batch: TrainingBatch,
                  schedule, draw: PerturbationDraw) -> torch.Tensor:
    """Mean over the batch of SmoothL1(prediction, ground truth) / J."""
    if batch.gt_coords.shape[0] != batch.clouds.shape[0]:
        raise ShapeError("batch arrays disagree on batch size")
    dtype, device = model._dtype_device()
    cond = model.condition(batch.clouds, batch.history, draw.fps_seed)
    perturbed = perturb_batch(batch.gt_coords, batch.gt_rots, schedule, draw)
    x_j = torch.as_tensor(perturbed.coords, dtype=dtype, device=device)
    x_r = torch.as_tensor(perturbed.rots, dtype=dtype, device=device)
    pred_j = model.denoise_coords_step(x_j, draw.i, cond)
    pred_r = model.denoise_rots_step(x_r, pred_j, draw.i, cond)
    pred = torch.cat([pred_j, pred_r], dim=-1)
    gt = torch.cat([
        torch.as_tensor(batch.gt_coords, dtype=dtype, device=device),
        torch.as_tensor(batch.gt_rots, dtype=dtype, device=device),
    ], dim=-1)
    joints = gt.shape[-2]
    batch_size = gt.shape[0]
    return smooth_l1(pred, gt, model.cfg.tau) / (joints * batch_size)


def train_step(model: GenerativePoseModel, batch: TrainingBatch, schedule,
               rng: np.random.Generator) -> float:
    """One optimization-ready step: draws randomness, computes the loss,
    backpropagates, and returns the loss value. Raises NumericalError on a
    non-finite loss (gradients are then unusable)."""
    draw = draw_perturbation(rng, schedule, batch.gt_coords.shape[0],
                             model.cfg.joints, model.cfg.points)
    loss = training_loss(model, batch, schedule, draw)
    if not torch.isfinite(loss):
        raise NumericalError("training loss is not finite")
    loss.backward()
    return float(loss.detach())
