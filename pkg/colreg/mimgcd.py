"""
MIM-guided conditional diffusion - forward noising, conditional noise
prediction, one-step Tweedie translation and the translator's losses.

Timesteps are 1-based: t in [1, T], alpha_bar(t) = prod_{s<=t} (1 - beta_s).
"""
from dataclasses import dataclass
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ProvenanceMismatch, ShapeMismatch, ShapeNotDivisible, TimestepOutOfRange
from .losses import as_tensor, masked_l1, mean_l1
from .mimfeat import MimFeature, Provenance


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if betas.size == 0:
            raise ValueError("Noise schedule needs at least one timestep")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("Noise rates must lie in [0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cumprod", np.cumprod(1.0 - betas))

    @classmethod
    def linear(cls, timesteps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, timesteps, dtype=np.float64), kind="linear")

    @classmethod
    def quadratic(cls, timesteps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        return cls(np.linspace(beta_start ** 0.5, beta_end ** 0.5, timesteps, dtype=np.float64) ** 2, kind="quad")

    @classmethod
    def cosine(cls, timesteps: int, s: float = 8e-3) -> "NoiseSchedule":
        steps = np.arange(timesteps + 1, dtype=np.float64) / timesteps + s
        alphas = np.cos(steps / (1 + s) * math.pi / 2) ** 2
        alphas = alphas / alphas[0]
        betas = np.clip(1 - alphas[1:] / alphas[:-1], 0.0, 0.999)
        return cls(betas, kind="cosine")

    @classmethod
    def build(cls, kind: str, timesteps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if kind == "linear":
            return cls.linear(timesteps, beta_start, beta_end)
        if kind == "quad":
            return cls.quadratic(timesteps, beta_start, beta_end)
        if kind == "cosine":
            return cls.cosine(timesteps)
        raise ValueError(f"Unknown noise schedule: {kind}")

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.is_floating_point():
            t = t.round().long()
        if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > self.timesteps:
            raise TimestepOutOfRange(f"Timestep outside [1, {self.timesteps}]: {t.tolist()}")
        table = torch.from_numpy(self.alphas_cumprod)
        return table[t.cpu() - 1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls(np.asarray(data["betas"]), kind=data.get("kind", "custom"))


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(dtype=like.dtype, device=like.device)
    if coef.dim() == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.dim() - 1)))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ShapeMismatch(f"Noise {tuple(eps.shape)} does not match image {tuple(x0.shape)}")
    ab = _broadcast(sched.alpha_bar(t), x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def tweedie_one_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    ab = _broadcast(sched.alpha_bar(t), x_t)
    return x_t / ab.sqrt() - (1.0 - ab).sqrt() / ab.sqrt() * eps_hat


def sample_timesteps(batch: int, low: int, high: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform integer timesteps in [low, high]"""
    return torch.randint(low, high + 1, (batch,), generator=generator)


def t2_band(sched: NoiseSchedule, low_frac: float = 0.8) -> tuple[int, int]:
    return max(1, math.ceil(low_frac * sched.timesteps)), sched.timesteps


def inference_t2(sched: NoiseSchedule, frac: float = 0.9) -> int:
    return min(sched.timesteps, max(1, round(frac * sched.timesteps)))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / max(half, 1))
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DiffusionModel(nn.Module):
    """Conditional noise predictor: a 3-resolution U-shaped network.

    Inputs are concatenated channel-wise: noised image, clean condition image,
    MIM(-like) condition map. The timestep enters through a sinusoidal embedding.
    """
    DOWNSAMPLE = 4

    def __init__(self, image_channels: int = 1, mim_channels: int = 1, base: int = 64, zero_head: bool = False):
        super().__init__()
        self.image_channels = image_channels
        self.mim_channels = mim_channels
        self.base = base
        temb_dim = 4 * base

        self.temb_mlp = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.inc = nn.Conv2d(2 * image_channels + mim_channels, base, 3, padding=1)
        self.enc1 = ResBlock(base, base, temb_dim)
        self.down1 = nn.Conv2d(base, base, 3, stride=2, padding=1)
        self.enc2 = ResBlock(base, 2 * base, temb_dim)
        self.down2 = nn.Conv2d(2 * base, 2 * base, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * base, 2 * base, temb_dim)
        self.up2 = nn.Conv2d(2 * base, 2 * base, 3, padding=1)
        self.dec2 = ResBlock(4 * base, 2 * base, temb_dim)
        self.up1 = nn.Conv2d(2 * base, base, 3, padding=1)
        self.dec1 = ResBlock(2 * base, base, temb_dim)
        self.out_norm = nn.GroupNorm(_groups(base), base)
        self.out = nn.Conv2d(base, image_channels, 3, padding=1)
        if zero_head:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def architecture(self) -> dict:
        return {"image_channels": self.image_channels, "mim_channels": self.mim_channels, "base": self.base}

    def forward(self, x_t, cond_img, cond_mim, t):
        temb = self.temb_mlp(timestep_embedding(t, self.base))
        h = self.inc(torch.cat([x_t, cond_img, cond_mim], dim=1))
        h1 = self.enc1(h, temb)
        h2 = self.enc2(self.down1(h1), temb)
        h = self.mid(self.down2(h2), temb)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec2(torch.cat([h, h2], dim=1), temb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec1(torch.cat([h, h1], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


def predict_noise(m: DiffusionModel, x_t: torch.Tensor, cond_img: torch.Tensor, cond_mim, t) -> torch.Tensor:
    cond_mim = as_tensor(cond_mim)
    if x_t.dim() != 4 or cond_img.shape != x_t.shape:
        raise ShapeMismatch(f"Noised image {tuple(x_t.shape)} and condition image {tuple(cond_img.shape)} differ")
    if x_t.shape[1] != m.image_channels:
        raise ShapeMismatch(f"Model expects {m.image_channels} image channels, got {x_t.shape[1]}")
    if cond_mim.dim() != 4 or cond_mim.shape[0] != x_t.shape[0] or cond_mim.shape[-2:] != x_t.shape[-2:] or cond_mim.shape[1] != m.mim_channels:
        raise ShapeMismatch(f"MIM condition {tuple(cond_mim.shape)} does not fit image {tuple(x_t.shape)}")
    if x_t.shape[-2] % m.DOWNSAMPLE or x_t.shape[-1] % m.DOWNSAMPLE:
        raise ShapeNotDivisible(f"Spatial size {tuple(x_t.shape[-2:])} not divisible by {m.DOWNSAMPLE}")

    t = torch.as_tensor(t, device=x_t.device)
    if t.dim() == 0:
        t = t.expand(x_t.shape[0])
    return m(x_t, cond_img, cond_mim.to(x_t.dtype), t)


def loss_noise(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mean_l1(eps_hat, eps)


def loss_translate(x_hat: torch.Tensor, x_target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return masked_l1(x_hat, x_target, mask)


def check_condition(mim: MimFeature, it: int) -> None:
    """Bootstrap (it == 0) conditions on handcrafted MIM, later alternations on learned maps"""
    if it == 0 and mim.provenance is not Provenance.HANDCRAFTED:
        raise ProvenanceMismatch(f"it=0 requires a handcrafted MIM condition, got {mim.provenance.value}")
    if it >= 1 and mim.provenance is Provenance.HANDCRAFTED:
        raise ProvenanceMismatch(f"it={it} requires a learned MIM-like condition")


def _randn_like(x: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    return torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)


def diffusion_loss(
    m: DiffusionModel,
    x_target: torch.Tensor,
    x_target_warped: torch.Tensor,
    mask_warped: torch.Tensor,
    mim_target: MimFeature,
    mim_target_warped: MimFeature,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    t2_low_frac: float = 0.8,
) -> tuple[torch.Tensor, dict]:
    """L_n + L_t on (x^T, x^T') with the two reverse-process signatures
    Psi(x_t1, x^T', mim(x^T), t1) and Psi(x_t2, x^T, mim(x^T'), t2).
    """
    batch = x_target.shape[0]
    t1 = sample_timesteps(batch, 1, sched.timesteps, generator)
    lo, hi = t2_band(sched, t2_low_frac)
    t2 = sample_timesteps(batch, lo, hi, generator)

    eps1 = _randn_like(x_target, generator)
    x_t1 = forward_noise(x_target, t1, eps1, sched)
    l_n = loss_noise(predict_noise(m, x_t1, x_target_warped, mim_target, t1), eps1)

    eps2 = _randn_like(x_target, generator)
    x_t2 = forward_noise(x_target, t2, eps2, sched)
    eps_hat2 = predict_noise(m, x_t2, x_target, mim_target_warped, t2)
    x_hat = tweedie_one_step(x_t2, eps_hat2, t2, sched)
    l_t = loss_translate(x_hat, x_target_warped, mask_warped)

    return l_n + l_t, {"loss_noise": float(l_n.detach()), "loss_translate": float(l_t.detach())}


def translate(
    m: DiffusionModel,
    x_ref: torch.Tensor,
    cond_mim,
    t2: int,
    sched: NoiseSchedule,
    rng: torch.Generator | int | None = None,
    clip: bool = True,
) -> torch.Tensor:
    """One-step translation: noise the target-domain reference at t2, predict
    the noise under the source MIM condition, and apply Tweedie's estimate.
    """
    generator = rng
    if isinstance(rng, int):
        generator = torch.Generator().manual_seed(rng)
    eps = _randn_like(x_ref, generator)
    x_t = forward_noise(x_ref, t2, eps, sched)
    eps_hat = predict_noise(m, x_t, x_ref, cond_mim, t2)
    out = tweedie_one_step(x_t, eps_hat, t2, sched)
    return out.clamp(-1.0, 1.0) if clip else out
