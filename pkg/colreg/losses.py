"""
Losses - mean-normalized L1 terms shared by the MIM, diffusion and registration losses
"""
import torch

from .errors import EmptyMask, ShapeMismatch


def as_tensor(x) -> torch.Tensor:
    # MimFeature and friends carry their tensor in `.map`
    return x.map if hasattr(x, "map") else x


def mean_l1(a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"L1 operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def masked_l1(a, b, mask: torch.Tensor) -> torch.Tensor:
    """Sum of |a - b| over valid pixels divided by the number of valid elements"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"L1 operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    try:
        m = mask.to(a.dtype).expand_as(a)
    except RuntimeError as e:
        raise ShapeMismatch(f"Mask {tuple(mask.shape)} does not broadcast to {tuple(a.shape)}") from e
    count = m.sum()
    if count <= 0:
        raise EmptyMask("Mask has no valid pixels")
    return ((a - b).abs() * m).sum() / count
