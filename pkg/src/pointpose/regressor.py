"""Factorized generative pose regressor.

Ground-truth poses are perturbed either with a diffusion variance schedule
or along straight optimal-transport flow-matching paths. Two cross-attention
denoisers read the perturbed pose together with iteration and joint-index
embeddings against the joint-wise conditioning features: the coordinate
branch predicts clean joint coordinates directly, and the rotation branch
adds a residual correction conditioned on those predicted coordinates.
Sampling runs the matching iterative scheme in reverse (diffusion) or
forward along the path (flow matching).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from .cloud_encoder import MultiHeadAttention
from .errors import NumericalError, ShapeError

CoordDenoiseFn = Callable[[torch.Tensor, int], torch.Tensor]
RotDenoiseFn = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


@dataclass
class DmSchedule:
    """Diffusion variance schedule: betas indexed 0..I."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.shape[0] < 2:
            raise ShapeError("betas must be a 1D sequence of length I+1")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ShapeError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.betas) < 0):
            raise ShapeError("betas must be non-decreasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def iterations(self) -> int:
        return self.betas.shape[0] - 1

    @classmethod
    def linear(cls, iterations: int = 20, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "DmSchedule":
        return cls(np.linspace(beta_start, beta_end, iterations + 1))


@dataclass
class CfmSchedule:
    """Flow-matching path: step count and fixed path noise scale."""

    iterations: int = 20
    sigma: float = 0.01

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ShapeError("need at least one flow step")
        if self.sigma < 0:
            raise ShapeError("sigma must be nonnegative")


@dataclass
class PerturbedPose:
    """Noisy pose at iteration i: coords (..., J, 3) and rotations (..., J, 6)."""

    coords: np.ndarray
    rots: np.ndarray
    i: np.ndarray


def _gather_bar(schedule: DmSchedule, i) -> np.ndarray:
    i = np.asarray(i)
    if np.any(i < 0) or np.any(i > schedule.iterations):
        raise ShapeError(f"iteration index outside [0, {schedule.iterations}]")
    return schedule.alpha_bars[i]


def perturb_dm(coords: np.ndarray, rots: np.ndarray, i, schedule: DmSchedule,
               noise_coords: np.ndarray, noise_rots: np.ndarray) -> PerturbedPose:
    """Diffuse ground truth: sqrt(abar_i) x + sqrt(1 - abar_i) eps.

    ``i`` may be a scalar or one index per leading batch entry.
    """
    abar = _gather_bar(schedule, i)
    scale = np.sqrt(abar)
    noise_scale = np.sqrt(1.0 - abar)
    while np.ndim(scale) < coords.ndim:
        scale = scale[..., None]
        noise_scale = noise_scale[..., None]
    return PerturbedPose(
        scale * coords + noise_scale * noise_coords,
        scale * rots + noise_scale * noise_rots,
        np.asarray(i),
    )


def perturb_cfm(coords: np.ndarray, rots: np.ndarray, i, schedule: CfmSchedule,
                noise_coords: np.ndarray, noise_rots: np.ndarray,
                path_noise_coords: np.ndarray,
                path_noise_rots: np.ndarray) -> PerturbedPose:
    """Straight-path interpolation (i/I) gt + (1 - i/I) z0 + sigma eps."""
    frac = np.asarray(i, dtype=np.float64) / schedule.iterations
    if np.any(frac < 0) or np.any(frac > 1):
        raise ShapeError(f"iteration index outside [0, {schedule.iterations}]")
    while np.ndim(frac) < coords.ndim:
        frac = frac[..., None]
    s = schedule.sigma
    return PerturbedPose(
        frac * coords + (1.0 - frac) * noise_coords + s * path_noise_coords,
        frac * rots + (1.0 - frac) * noise_rots + s * path_noise_rots,
        np.asarray(i),
    )


def ot_pair(noise_batch: np.ndarray, gt_batch: np.ndarray) -> np.ndarray:
    """Exact minimum-cost coupling between a noise batch and a data batch.

    Returns a permutation ``perm`` with noise b paired to gt perm[b],
    minimizing the total squared Euclidean cost.
    """
    noise = np.asarray(noise_batch, dtype=np.float64).reshape(len(noise_batch), -1)
    gt = np.asarray(gt_batch, dtype=np.float64).reshape(len(gt_batch), -1)
    if noise.shape[0] != gt.shape[0]:
        raise ShapeError("batches must have equal size")
    cost = ((noise[:, None, :] - gt[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(noise.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


@dataclass
class IterJointEmbedding:
    """Iteration embedding (identical rows) and joint index embedding."""

    e_i: np.ndarray
    e_j: np.ndarray


def embeddings(i: int, joints: int) -> IterJointEmbedding:
    """Sinusoidal iteration/joint embeddings: rows [n, sin n, cos n]."""
    if i < 0:
        raise ShapeError("iteration index must be nonnegative")
    e_i = np.tile([float(i), np.sin(i), np.cos(i)], (joints, 1))
    idx = np.arange(joints, dtype=np.float64)
    e_j = np.stack([idx, np.sin(idx), np.cos(idx)], axis=1)
    return IterJointEmbedding(e_i, e_j)


def smooth_l1(x, y, tau: float = 0.01):
    """Branchwise smooth L1 summed over all elements.

    Per element with d = |x - y|: 50 d^2 below tau, d - 0.005 above. The
    default tau is the unique threshold making value and slope continuous.
    """
    if tau <= 0:
        raise ShapeError("tau must be positive")
    if isinstance(x, torch.Tensor):
        d = (x - y).abs()
        return torch.where(d < tau, 50.0 * d * d, d - 0.005).sum()
    d = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    return float(np.where(d < tau, 50.0 * d * d, d - 0.005).sum())


class CoordinateDenoiser(nn.Module):
    """Cross-attention from noisy joint queries to conditioning tokens,
    mapped to clean coordinate predictions."""

    def __init__(self, cond_dim: int, attn_dim: int = 64, heads: int = 4,
                 hidden: int = 64):
        super().__init__()
        self.attn = MultiHeadAttention(3 + 3 + 3, cond_dim, attn_dim, heads,
                                       tied_kv=True, out_dim=None)
        self.out = nn.Sequential(
            nn.Linear(attn_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 3),
        )

    def forward(self, noisy_coords: torch.Tensor, cond: torch.Tensor,
                e_i: torch.Tensor, e_j: torch.Tensor,
                return_weights: bool = False):
        query = torch.cat([noisy_coords, e_i, e_j], dim=-1)
        h, w = self.attn(query, cond, return_weights=True)
        out = self.out(h)
        if return_weights:
            return out, w
        return out


class RotationDenoiser(nn.Module):
    """Residual rotation branch keyed on predicted coordinates and
    conditioning features."""

    def __init__(self, cond_dim: int, attn_dim: int = 64, heads: int = 4,
                 hidden: int = 64):
        super().__init__()
        self.attn = MultiHeadAttention(6 + 3 + 3, 3 + cond_dim, attn_dim, heads,
                                       tied_kv=True, out_dim=None)
        self.out = nn.Sequential(
            nn.Linear(attn_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 6),
        )

    def forward(self, noisy_rots: torch.Tensor, pred_coords: torch.Tensor,
                cond: torch.Tensor, e_i: torch.Tensor, e_j: torch.Tensor,
                return_weights: bool = False):
        query = torch.cat([noisy_rots, e_i, e_j], dim=-1)
        keys = torch.cat([pred_coords, cond], dim=-1)
        h, w = self.attn(query, keys, return_weights=True)
        out = noisy_rots + self.out(h)
        if return_weights:
            return out, w
        return out


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericalError(f"non-finite values in {name}")


def _ddim_sigma(abar_prev: float, abar: float) -> float:
    return float(np.sqrt((1.0 - abar_prev) * (abar_prev - abar)
                         / (abar_prev * (1.0 - abar))))


def sample_dm(
    coord_fn: CoordDenoiseFn,
    rot_fn: RotDenoiseFn,
    schedule: DmSchedule,
    batch: int,
    joints: int,
    rng: torch.Generator,
    dtype: torch.dtype = torch.float32,
    two_pass: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Iterative diffusion sampling from pure noise.

    Starts at x_I ~ N(0, I) and walks i = I..1: the denoisers predict the
    clean pose, the implied noise is re-estimated, and the next iterate is
    formed with the stochastic DDIM update. The final prediction (made at
    i = 1) is returned. With ``two_pass`` the coordinate chain runs to
    completion first and the rotation chain replays it, consuming the stored
    per-iteration coordinate predictions.
    """
    steps = schedule.iterations
    bars = schedule.alpha_bars

    def randn(*shape):
        return torch.randn(*shape, generator=rng, dtype=dtype)

    def step(x, pred, i, eps_draw):
        abar, abar_prev = float(bars[i]), float(bars[i - 1])
        implied = (x - np.sqrt(abar) * pred) / np.sqrt(1.0 - abar)
        sigma = _ddim_sigma(abar_prev, abar)
        direction = np.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
        return np.sqrt(abar_prev) * pred + direction * implied + sigma * eps_draw

    x_j = randn(batch, joints, 3)
    x_r = randn(batch, joints, 6)
    if two_pass:
        coord_preds: dict[int, torch.Tensor] = {}
        for i in range(steps, 0, -1):
            pred_j = coord_fn(x_j, i)
            _check_finite("coordinate sampling", pred_j)
            coord_preds[i] = pred_j
            x_j = step(x_j, pred_j, i, randn(batch, joints, 3))
        for i in range(steps, 0, -1):
            pred_r = rot_fn(x_r, coord_preds[i], i)
            _check_finite("rotation sampling", pred_r)
            x_r = step(x_r, pred_r, i, randn(batch, joints, 6))
        return coord_preds[1], pred_r

    for i in range(steps, 0, -1):
        pred_j = coord_fn(x_j, i)
        pred_r = rot_fn(x_r, pred_j, i)
        _check_finite("sampling", pred_j, pred_r)
        x_j = step(x_j, pred_j, i, randn(batch, joints, 3))
        x_r = step(x_r, pred_r, i, randn(batch, joints, 6))
    return pred_j, pred_r


def sample_cfm(
    coord_fn: CoordDenoiseFn,
    rot_fn: RotDenoiseFn,
    schedule: CfmSchedule,
    batch: int,
    joints: int,
    rng: torch.Generator,
    dtype: torch.dtype = torch.float32,
    two_pass: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Flow-matching sampling along the straight path from a fixed noise draw.

    The initial draw doubles as the path endpoint z0: each step re-predicts
    the clean pose and re-perturbs it to the next fraction along the path,
    i increasing to I, where the last prediction is returned.
    """
    steps = schedule.iterations
    sigma = schedule.sigma

    def randn(*shape):
        return torch.randn(*shape, generator=rng, dtype=dtype)

    def advance(pred, z0, i, eps_draw):
        frac = (i + 1) / steps
        return frac * pred + (1.0 - frac) * z0 + sigma * eps_draw

    z0_j = randn(batch, joints, 3)
    z0_r = randn(batch, joints, 6)
    if two_pass:
        x_j = z0_j
        coord_preds: dict[int, torch.Tensor] = {}
        for i in range(steps):
            pred_j = coord_fn(x_j, i)
            _check_finite("coordinate sampling", pred_j)
            coord_preds[i] = pred_j
            x_j = advance(pred_j, z0_j, i, randn(batch, joints, 3))
        coord_preds[steps] = coord_fn(x_j, steps)
        _check_finite("coordinate sampling", coord_preds[steps])
        x_r = z0_r
        for i in range(steps):
            pred_r = rot_fn(x_r, coord_preds[i], i)
            _check_finite("rotation sampling", pred_r)
            x_r = advance(pred_r, z0_r, i, randn(batch, joints, 6))
        pred_r = rot_fn(x_r, coord_preds[steps], steps)
        _check_finite("rotation sampling", pred_r)
        return coord_preds[steps], pred_r

    x_j, x_r = z0_j, z0_r
    for i in range(steps):
        pred_j = coord_fn(x_j, i)
        pred_r = rot_fn(x_r, pred_j, i)
        _check_finite("sampling", pred_j, pred_r)
        x_j = advance(pred_j, z0_j, i, randn(batch, joints, 3))
        x_r = advance(pred_r, z0_r, i, randn(batch, joints, 6))
    pred_j = coord_fn(x_j, steps)
    pred_r = rot_fn(x_r, pred_j, steps)
    _check_finite("sampling", pred_j, pred_r)
    return pred_j, pred_r
