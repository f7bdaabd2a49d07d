"""
Registration network - shared 4-scale feature pyramid with per-scale
correlation/update blocks refining corner displacements coarse-to-fine,
plus the displacement and pseudo-label losses.

register(net, x1, x2) predicts dp whose homography carries x1-frame points
onto x2-frame points, i.e. warp(x1, H) ~ x2.
"""
from dataclasses import dataclass
import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArchitectureMismatch, ShapeMismatch, ShapeNotDivisible
from .geometry import (
    CornerDisplacement,
    Frame,
    corners_to_homography,
    corners_to_homography_torch,
    homography_to_corners,
    invert,
    warp,
)

FGO_GAMMA = 0.85
STRIDES = (1, 2, 4, 8)
# TL, TR, BR, BL read from a 2x2 grid as (row, col)
_CORNER_ROWS = (0, 0, 1, 1)
_CORNER_COLS = (0, 1, 1, 0)


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


def _conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.GroupNorm(_groups(out_ch), out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.GroupNorm(_groups(out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class FeatureEncoder(nn.Module):
    """Pyramid at strides 1, 2, 4, 8 (finest first)"""

    def __init__(self, in_channels: int = 1, width: int = 64):
        super().__init__()
        channels = (width, width, 2 * width, 2 * width)
        self.channels = channels
        self.levels = nn.ModuleList([
            _conv_block(in_channels, channels[0]),
            _conv_block(channels[0], channels[1], stride=2),
            _conv_block(channels[1], channels[2], stride=2),
            _conv_block(channels[2], channels[3], stride=2),
        ])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


def cost_volume(f1: torch.Tensor, f2: torch.Tensor, radius: int) -> torch.Tensor:
    """Local correlation over a (2r+1)^2 window of shifts, scaled by 1/sqrt(C)"""
    _, channels, height, width = f1.shape
    padded = F.pad(f2, (radius, radius, radius, radius))
    out = []
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            shifted = padded[:, :, dy:dy + height, dx:dx + width]
            out.append((f1 * shifted).sum(dim=1))
    return torch.stack(out, dim=1) / math.sqrt(channels)


class UpdateBlock(nn.Module):
    """Cost volume -> residual corner displacement (B, 4, 2) in level pixels"""

    def __init__(self, corr_channels: int, hidden: int = 64, layers: int = 3):
        super().__init__()
        if layers < 2:
            raise ValueError("UpdateBlock needs at least two layers")
        body = [nn.Conv2d(corr_channels, hidden, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(layers - 2):
            body += [nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*body)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.head = nn.Conv2d(hidden, 2, 1)

    def forward(self, corr: torch.Tensor) -> torch.Tensor:
        grid = self.head(self.pool(self.body(corr)))  # (B, 2, 2, 2)
        corners = grid[:, :, list(_CORNER_ROWS), list(_CORNER_COLS)]  # (B, 2, 4)
        return corners.transpose(1, 2)


def scale_homography(h: torch.Tensor, frame: Frame, level_frame: Frame) -> torch.Tensor:
    """Express a full-resolution homography in the pixel grid of a pyramid level"""
    height, width = frame
    lh, lw = level_frame
    sx = (lw - 1) / max(width - 1, 1)
    sy = (lh - 1) / max(height - 1, 1)
    s = torch.diag(torch.tensor([sx, sy, 1.0], dtype=h.dtype, device=h.device))
    s_inv = torch.diag(torch.tensor([1.0 / sx, 1.0 / sy, 1.0], dtype=h.dtype, device=h.device))
    return s @ h @ s_inv


@dataclass
class RegPrediction:
    """Per-iteration corner displacements, each (B, 4, 2); the last is the estimate"""
    deltas: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.deltas)

    @property
    def final(self) -> torch.Tensor:
        return self.deltas[-1]

    def final_displacement(self, index: int = 0) -> CornerDisplacement:
        return CornerDisplacement(self.final[index].detach().cpu().double().numpy())

    def as_numpy(self) -> np.ndarray:
        """(N_i, B, 4, 2) for diagnostics export"""
        return np.stack([d.detach().cpu().double().numpy() for d in self.deltas])


class RegNetwork(nn.Module):
    def __init__(self, in_channels: int = 1, width: int = 64, iterations=(2, 2, 2, 2), radius: int = 4, hidden: int = 64):
        super().__init__()
        iterations = tuple(int(q) for q in iterations)
        if len(iterations) != len(STRIDES) or any(q < 0 for q in iterations) or sum(iterations) == 0:
            raise ValueError(f"Need {len(STRIDES)} non-negative per-scale iteration counts, got {iterations}")
        self.in_channels = in_channels
        self.width = width
        self.iterations = iterations
        self.radius = radius
        self.hidden = hidden
        self.encoder = FeatureEncoder(in_channels, width)
        corr_channels = (2 * radius + 1) ** 2
        self.updates = nn.ModuleList([UpdateBlock(corr_channels, hidden) for _ in STRIDES])

    @property
    def total_iterations(self) -> int:
        return sum(self.iterations)

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "width": self.width,
            "iterations": list(self.iterations),
            "radius": self.radius,
            "hidden": self.hidden,
        }

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> list[torch.Tensor]:
        frame = tuple(x1.shape[-2:])
        feats1 = self.encoder(x1)
        feats2 = self.encoder(x2)
        limit = 0.25 * min(frame)

        dp = torch.zeros(x1.shape[0], 4, 2, dtype=x1.dtype, device=x1.device)
        deltas = []
        for level in reversed(range(len(STRIDES))):
            f1, f2 = feats1[level], feats2[level]
            for _ in range(self.iterations[level]):
                running = dp.detach()
                h = corners_to_homography_torch(running.clamp(-limit, limit), frame)
                h_level = scale_homography(h, frame, tuple(f1.shape[-2:]))
                # align f2 onto f1: f2w(p) = f2(H p)
                f2w, _ = warp(f2, torch.linalg.inv(h_level))
                residual = self.updates[level](cost_volume(f1, f2w, self.radius)) * STRIDES[level]
                dp = running + residual
                deltas.append(dp)
        return deltas


def register(net: RegNetwork, x1: torch.Tensor, x2: torch.Tensor) -> RegPrediction:
    if x1.dim() == 3:
        x1, x2 = x1.unsqueeze(0), x2.unsqueeze(0)
    if x1.shape != x2.shape or x1.dim() != 4:
        raise ShapeMismatch(f"Registration inputs differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if x1.shape[1] != net.in_channels:
        raise ShapeMismatch(f"Network expects {net.in_channels} channels, got {x1.shape[1]}")
    factor = 2 ** (len(STRIDES) - 1)
    if x1.shape[-2] % factor or x1.shape[-1] % factor:
        raise ShapeNotDivisible(f"Spatial size {tuple(x1.shape[-2:])} not divisible by {factor}")
    return RegPrediction(net(x1, x2))


def _target_tensor(target, like: torch.Tensor) -> torch.Tensor:
    if isinstance(target, CornerDisplacement):
        t = torch.as_tensor(target.dp)[None]
    elif isinstance(target, (list, tuple)):
        t = torch.stack([torch.as_tensor(d.dp if isinstance(d, CornerDisplacement) else d) for d in target])
    else:
        t = torch.as_tensor(target)
    t = t.to(dtype=like.dtype, device=like.device)
    if t.dim() == 2:
        t = t[None]
    return t.expand_as(like)


def iteration_errors(pred: RegPrediction, target) -> list[torch.Tensor]:
    """Mean absolute corner error of every iteration"""
    if len(pred) == 0:
        raise ValueError("Prediction has no iterations")
    t = _target_tensor(target, pred.final)
    return [(d - t).abs().mean() for d in pred.deltas]


def fgo_surrogate(errors: list[torch.Tensor], gamma: float = FGO_GAMMA) -> torch.Tensor:
    """Exponentially weighted per-iteration L1, weight gamma^(N-i)"""
    n = len(errors)
    return sum(gamma ** (n - i) * e for i, e in enumerate(errors, start=1))


def loss_displacement(pred: RegPrediction, gt, gamma: float = FGO_GAMMA) -> torch.Tensor:
    errors = iteration_errors(pred, gt)
    return sum(errors) + fgo_surrogate(errors, gamma)


def loss_pseudo(pred: RegPrediction, pl, gamma: float = FGO_GAMMA) -> torch.Tensor:
    if isinstance(pl, torch.Tensor):
        pl = pl.detach()
    return loss_displacement(pred, pl, gamma)


def clone_parameters(src: RegNetwork, into: RegNetwork | None = None) -> RegNetwork:
    """Deep copy of src's parameters, either into a fresh network or into `into`"""
    if into is None:
        return copy.deepcopy(src)
    src_state, dst_state = src.state_dict(), into.state_dict()
    if src_state.keys() != dst_state.keys():
        raise ArchitectureMismatch("Parameter names differ between networks")
    for name, value in src_state.items():
        if value.shape != dst_state[name].shape:
            raise ArchitectureMismatch(f"{name}: {tuple(value.shape)} vs {tuple(dst_state[name].shape)}")
    into.load_state_dict({name: value.detach().clone() for name, value in src_state.items()})
    return into


def inverse_displacement(dp: CornerDisplacement, frame: Frame) -> CornerDisplacement:
    return homography_to_corners(invert(corners_to_homography(dp, frame)), frame)
