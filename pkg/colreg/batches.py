"""
Batch builders for the training stages: randomly warped targets for the
translator, self-supervised pairs for the intermediate registration network
and pseudo-labelled pairs from a frozen registration network.
"""
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
import torch

from .errors import DegenerateCorners, SingularHomography
from .geometry import CornerDisplacement, Homography, corners_to_homography, invert, random_homography, warp
from .regnet import RegNetwork, register


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _random_batch_homographies(batch: int, rho: float, frame, rng) -> tuple[list[Homography], torch.Tensor]:
    hs, dps = [], []
    for _ in range(batch):
        h, dp = random_homography(rng, rho, frame)
        hs.append(h)
        dps.append(dp.dp)
    return hs, torch.as_tensor(np.stack(dps))


def stack_homographies(hs: list[Homography]) -> torch.Tensor:
    """(B, 3, 3) float64 tensor"""
    return torch.as_tensor(np.stack([h.h for h in hs]))


@dataclass
class WarpedPair:
    """x^T and x^T' = warp(x^T, H) with H random per sample"""
    x: torch.Tensor
    x_warped: torch.Tensor
    mask: torch.Tensor
    dp: torch.Tensor


def make_warped_pair(x: torch.Tensor, rho: float, seed=None) -> WarpedPair:
    rng = _rng(seed)
    frame = tuple(x.shape[-2:])
    hs, dp = _random_batch_homographies(x.shape[0], rho, frame, rng)
    x_warped, mask = warp(x, stack_homographies(hs))
    return WarpedPair(x, x_warped, mask, dp.to(x.dtype))


@dataclass
class SelfSupBatch:
    x_s_prime: torch.Tensor
    x_s2t: torch.Tensor
    gt: torch.Tensor  # (B, 4, 2)
    mask: torch.Tensor


def make_selfsup_batch(x_s: torch.Tensor, rho: float, translator: Callable[[torch.Tensor], torch.Tensor], seed=None) -> SelfSupBatch:
    """(x^S', x^S->T, dp^GT) with x^S' = warp(x^S, H^-1) and dp^GT the corners of H.

    The translation stays aligned with x^S, so register(x^S', x^S->T) should
    recover H. The translator runs without gradients.
    """
    rng = _rng(seed)
    frame = tuple(x_s.shape[-2:])
    with torch.no_grad():
        x_s2t = translator(x_s)

    if rho == 0:
        gt = torch.zeros(x_s.shape[0], 4, 2, dtype=x_s.dtype, device=x_s.device)
        mask = torch.ones(x_s.shape[0], 1, *frame, dtype=x_s.dtype, device=x_s.device)
        return SelfSupBatch(x_s.clone(), x_s2t, gt, mask)

    hs, dp = _random_batch_homographies(x_s.shape[0], rho, frame, rng)
    x_s_prime, mask = warp(x_s, stack_homographies([invert(h) for h in hs]))
    return SelfSupBatch(x_s_prime, x_s2t, dp.to(dtype=x_s.dtype, device=x_s.device), mask)


@dataclass
class PseudoLabelBatch:
    x_s: torch.Tensor
    x_t: torch.Tensor
    pl: torch.Tensor  # (B, 4, 2), final iteration of the frozen network
    h_hat: list[Homography]
    x_tw: torch.Tensor  # warp(x^T, H^-1), aligned with x^S
    mask: torch.Tensor


@dataclass
class PseudoLabelStats:
    batches: int = 0
    pairs: int = 0
    skipped: int = 0
    skipped_ids: list = field(default_factory=list)


def make_pseudo_labels(
    reg: RegNetwork,
    pairs: Iterable[tuple[torch.Tensor, torch.Tensor]],
    stats: PseudoLabelStats | None = None,
) -> Iterator[PseudoLabelBatch]:
    """One PseudoLabelBatch per input batch; samples whose prediction does not
    define a homography are dropped and counted in `stats`.
    """
    stats = stats if stats is not None else PseudoLabelStats()
    for x_s, x_t in pairs:
        frame = tuple(x_s.shape[-2:])
        with torch.no_grad():
            pl = register(reg, x_s, x_t).final.detach()

        keep, hs = [], []
        for b in range(pl.shape[0]):
            try:
                hs.append(corners_to_homography(CornerDisplacement(pl[b].cpu().double().numpy()), frame))
                keep.append(b)
            except (DegenerateCorners, SingularHomography, ValueError):
                stats.skipped += 1
                stats.skipped_ids.append(stats.pairs + b)
        stats.pairs += pl.shape[0]
        if not keep:
            continue

        index = torch.as_tensor(keep, device=x_s.device)
        x_s, x_t, pl = x_s[index], x_t[index], pl[index]
        x_tw, mask = warp(x_t, stack_homographies([invert(h) for h in hs]))
        stats.batches += 1
        yield PseudoLabelBatch(x_s, x_t, pl, hs, x_tw, mask)
