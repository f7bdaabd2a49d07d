"""
MIM features - handcrafted log-Gabor Maximum Index Map, its normalization,
and the learnable MIM encoders with their training losses.
"""
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
import math

import cv2
import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeMismatch
from .losses import masked_l1, mean_l1

NORM_EPS = 1e-8


class Provenance(str, Enum):
    HANDCRAFTED = "handcrafted"
    LEARNED_SOURCE = "learned-source"
    LEARNED_TARGET = "learned-target"


@dataclass
class MimFeature:
    map: torch.Tensor  # (B, C, H, W)
    provenance: Provenance = Provenance.HANDCRAFTED
    normalized: bool = False

    @property
    def learned(self) -> bool:
        return self.provenance is not Provenance.HANDCRAFTED


@dataclass(frozen=True)
class LogGaborBank:
    """Oriented log-Gabor filters stored as frequency-domain transfer functions"""
    n_scales: int = 4
    n_orient: int = 6
    min_wavelength: float = 3.0
    mult: float = 2.1
    sigma_onf: float = 0.55
    d_theta_on_sigma: float = 1.2
    lowpass_cutoff: float = 0.45
    lowpass_order: int = 15

    def one_sided(self, height: int, width: int) -> torch.Tensor:
        """(S, O, H, W) real filters covering one orientation lobe each"""
        return torch.from_numpy(_one_sided_filters(self, height, width))

    def transfer_functions(self, height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Even and odd transfer functions, each (S, O, H, W) complex128.

        even = (G(f) + G(-f)) / 2 and odd = -i (G(f) - G(-f)) / 2, so both
        kernels are real in space and even + i*odd = G.
        """
        g = _one_sided_filters(self, height, width)
        g_flip = np.roll(np.flip(g, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1))
        even = (g + g_flip) / 2.0
        odd = -1j * (g - g_flip) / 2.0
        return torch.from_numpy(even.astype(np.complex128)), torch.from_numpy(odd.astype(np.complex128))


@lru_cache(maxsize=32)
def _one_sided_filters(bank: LogGaborBank, height: int, width: int) -> np.ndarray:
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    radius[0, 0] = 1.0
    theta = np.arctan2(-fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)

    lowpass = 1.0 / (1.0 + (radius / bank.lowpass_cutoff) ** (2 * bank.lowpass_order))
    theta_sigma = math.pi / bank.n_orient / bank.d_theta_on_sigma

    filters = np.zeros((bank.n_scales, bank.n_orient, height, width))
    for s in range(bank.n_scales):
        fo = 1.0 / (bank.min_wavelength * bank.mult ** s)
        radial = np.exp(-(np.log(radius / fo)) ** 2 / (2 * math.log(bank.sigma_onf) ** 2)) * lowpass
        radial[0, 0] = 0.0  # zero DC
        for o in range(bank.n_orient):
            angle = o * math.pi / bank.n_orient
            ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
            dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
            dtheta = np.abs(np.arctan2(ds, dc))
            spread = np.exp(-dtheta ** 2 / (2 * theta_sigma ** 2))
            filters[s, o] = radial * spread
    return filters


def _to_gray_batch(img) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(img) if isinstance(img, np.ndarray) else img)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[None]
    if x.dim() != 4:
        raise ShapeMismatch(f"Expected an image of rank 2-4, got {tuple(x.shape)}")
    # luminance as channel average
    return x.to(torch.float64).mean(dim=1, keepdim=True)


def compute_mim(img, bank: LogGaborBank | None = None, index_map: bool = False) -> MimFeature:
    """Handcrafted MIM: per pixel, max over orientations of summed scale amplitudes.

    With index_map=True the argmax orientation index is returned instead
    (RIFT-style maximum index map).
    """
    bank = bank or LogGaborBank()
    out_dtype = img.dtype if isinstance(img, torch.Tensor) and img.is_floating_point() else torch.float32
    x = _to_gray_batch(img)
    height, width = x.shape[-2:]

    spectrum = torch.fft.fft2(x)
    filters = bank.one_sided(height, width).to(x.device)
    per_orient = []
    for o in range(bank.n_orient):
        # |E + iO| = |ifft(F G)| since even + i*odd = G
        eo = torch.fft.ifft2(spectrum.unsqueeze(2) * filters[:, o].unsqueeze(0).unsqueeze(0))
        per_orient.append(eo.abs().sum(dim=2))
    amplitude = torch.stack(per_orient, dim=2)  # (B, 1, O, H, W)

    if index_map:
        result = amplitude.argmax(dim=2).to(torch.float64)
    else:
        result = amplitude.amax(dim=2)
    return MimFeature(result.to(out_dtype), Provenance.HANDCRAFTED)


def normalize_mim(f: MimFeature) -> MimFeature:
    """Per-sample, per-channel affine map onto [-1, 1]; constant channels map to 0"""
    x = f.map
    flat = x.flatten(2)
    lo = flat.amin(dim=-1)[..., None, None]
    hi = flat.amax(dim=-1)[..., None, None]
    span = hi - lo
    out = 2.0 * (x - lo) / span.clamp_min(NORM_EPS) - 1.0
    out = torch.where(span < NORM_EPS, torch.zeros_like(out), out)
    return MimFeature(out, f.provenance, normalized=True)


def handcrafted_condition(img: torch.Tensor, bank: LogGaborBank | None = None, channels: int = 1) -> MimFeature:
    """Normalized handcrafted MIM, repeated to `channels` to match learned features"""
    feat = normalize_mim(compute_mim(img, bank))
    mim = feat.map.to(img.dtype).to(img.device)
    if channels > 1:
        mim = mim.repeat(1, channels, 1, 1)
    return MimFeature(mim, Provenance.HANDCRAFTED, normalized=True)


class MimEncoder(nn.Module):
    """Stride-1 convolutional encoder producing MIM-like maps in [-1, 1]"""

    def __init__(self, in_channels: int = 1, out_channels: int = 1, width: int = 64, depth: int = 6, zero_head: bool = False):
        super().__init__()
        if depth < 2:
            raise ValueError("MimEncoder needs at least two layers")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.depth = depth

        layers = [nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(width, out_channels, 3, padding=1)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def architecture(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels, "width": self.width, "depth": self.depth}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.head(self.body(x)))


def encode_mim(enc: MimEncoder, img: torch.Tensor, provenance: Provenance = Provenance.LEARNED_TARGET) -> MimFeature:
    if img.dim() != 4 or img.shape[1] != enc.in_channels:
        raise ShapeMismatch(f"Encoder expects (B, {enc.in_channels}, H, W), got {tuple(img.shape)}")
    return MimFeature(enc(img), provenance, normalized=True)


def loss_mim_target(xs_warped, xt, mask: torch.Tensor) -> torch.Tensor:
    """Masked L1 between the warped source MIM-like map and the target encoder output"""
    return masked_l1(xs_warped, xt, mask)


def loss_mim_source(x_trans: torch.Tensor, x_tw: torch.Tensor, mask: torch.Tensor, xs, xs_frozen, lambda_mds: float = 1.0) -> torch.Tensor:
    """lambda_mds * masked L1(translation, warped target) + L1 drift from the frozen map"""
    return lambda_mds * masked_l1(x_trans, x_tw, mask) + mean_l1(xs, xs_frozen)


def save_feature_png(feature: MimFeature, path: str | Path, index: int = 0) -> Path:
    """Write one sample's first channel as a 16-bit lossless PNG"""
    feat = feature if feature.normalized else normalize_mim(feature)
    values = feat.map[index, 0].detach().cpu().double().numpy()
    pixels = np.round((values + 1.0) / 2.0 * 65535.0).clip(0, 65535).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), pixels)
    return path
