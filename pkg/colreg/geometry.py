"""
Geometry - homography parameterization, warping and random deformations
Shared by every other CoLReg module.

Conventions:
  * corners are ordered TL, TR, BR, BL and sit on pixel centres, i.e.
    (0, 0), (W-1, 0), (W-1, H-1), (0, H-1)
  * a frame is given as (height, width)
  * warp(img, h) produces out(p) = img(h^-1 p): content at q moves to h q
"""
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateCorners, SingularHomography

Frame = tuple[int, int]

DET_EPS = 1e-10
_COLLINEAR_EPS = 1e-9
_BOUNDS_TOL = 1e-6


def frame_corners(frame: Frame) -> np.ndarray:
    height, width = frame
    return np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class CornerDisplacement:
    """4x2 pixel offsets of the TL, TR, BR, BL corners"""
    dp: np.ndarray

    def __post_init__(self):
        dp = np.asarray(self.dp, dtype=np.float64)
        if dp.shape != (4, 2):
            raise ValueError(f"Corner displacement must be 4x2, got {dp.shape}")
        if not np.all(np.isfinite(dp)):
            raise ValueError("Corner displacement has non-finite entries")
        object.__setattr__(self, "dp", dp)

    @classmethod
    def zeros(cls) -> "CornerDisplacement":
        return cls(np.zeros((4, 2)))

    def magnitude(self) -> float:
        return float(np.abs(self.dp).max())


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, stored with h[2, 2] = 1"""
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError(f"Homography must be 3x3, got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise SingularHomography("Homography has non-finite entries")
        if abs(h[2, 2]) < 1e-12:
            raise SingularHomography("h[2][2] vanishes, cannot normalize")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= DET_EPS:
            raise SingularHomography(f"Homography is singular (det={np.linalg.det(h):.3e})")
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map Nx2 points through the homography"""
        points = np.asarray(points, dtype=np.float64)
        homog = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ self.h.T
        if np.any(np.abs(homog[:, 2]) < 1e-12):
            raise DegenerateCorners("Point mapped to infinity")
        return homog[:, :2] / homog[:, 2:3]


def _hartley(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if mean_dist < 1e-12:
        raise DegenerateCorners("Corner points are coincident")
    s = np.sqrt(2.0) / mean_dist
    transform = np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    normalized = (points - centroid) * s
    return normalized, transform


def _check_general_position(points: np.ndarray) -> None:
    scale = max(np.ptp(points[:, 0]), np.ptp(points[:, 1]), 1.0)
    for i, j, k in combinations(range(4), 3):
        a, b, c = points[i], points[j], points[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < _COLLINEAR_EPS * scale * scale:
            raise DegenerateCorners(f"Corners {i}, {j}, {k} are collinear")


def corners_to_homography(dp: CornerDisplacement, frame: Frame) -> Homography:
    """Homography mapping every frame corner c to c + dp (normalized DLT, 8x8 system)"""
    src = frame_corners(frame)
    dst = src + dp.dp
    _check_general_position(src)
    _check_general_position(dst)

    src_n, t_src = _hartley(src)
    dst_n, t_dst = _hartley(dst)

    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src_n, dst_n)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v

    if np.linalg.cond(a) > 1e12:
        raise DegenerateCorners("DLT system is singular")
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise DegenerateCorners(f"DLT system is singular: {e}") from e

    h_n = np.append(sol, 1.0).reshape(3, 3)
    try:
        return Homography(np.linalg.inv(t_dst) @ h_n @ t_src)
    except SingularHomography as e:
        raise DegenerateCorners(str(e)) from e


def homography_to_corners(h: Homography, frame: Frame) -> CornerDisplacement:
    corners = frame_corners(frame)
    return CornerDisplacement(h.apply(corners) - corners)


def invert(h: Homography) -> Homography:
    return Homography(np.linalg.inv(h.h))


def compose(h1: Homography, h2: Homography) -> Homography:
    """h1 after h2: compose(h1, h2).apply(p) == h1.apply(h2.apply(p))"""
    return Homography(h1.h @ h2.h)


def random_homography(seed, rho: float, frame: Frame, max_tries: int = 16) -> tuple[Homography, CornerDisplacement]:
    """Draw dp i.i.d. uniform in [-rho, rho] and its homography.

    `seed` is an int or a numpy Generator; degenerate draws are redrawn up to
    `max_tries` times.
    """
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    last_error = None
    for _ in range(max_tries):
        dp = CornerDisplacement(rng.uniform(-rho, rho, size=(4, 2)))
        try:
            return corners_to_homography(dp, frame), dp
        except DegenerateCorners as e:
            last_error = e
    raise DegenerateCorners(f"No valid homography after {max_tries} draws: {last_error}")


# Batched torch counterparts used inside the networks and data pipeline

def frame_corners_torch(frame: Frame, dtype=torch.float64, device=None) -> torch.Tensor:
    return torch.as_tensor(frame_corners(frame), dtype=dtype, device=device)


def corners_to_homography_torch(dp: torch.Tensor, frame: Frame) -> torch.Tensor:
    """Batched, differentiable DLT: dp (B, 4, 2) -> H (B, 3, 3) in float64"""
    height, width = frame
    dp = dp.to(torch.float64)
    batch = dp.shape[0]
    src = frame_corners_torch(frame, device=dp.device).expand(batch, 4, 2)
    dst = src + dp

    # scale both point sets into roughly [-0.5, 0.5] for conditioning
    s = 1.0 / max(width - 1, height - 1, 1)
    norm = torch.tensor([[s, 0.0, -0.5], [0.0, s, -0.5], [0.0, 0.0, 1.0]], dtype=torch.float64, device=dp.device)
    src_n = src * s - 0.5
    dst_n = dst * s - 0.5

    x, y = src_n[..., 0], src_n[..., 1]
    u, v = dst_n[..., 0], dst_n[..., 1]
    zeros = torch.zeros_like(x)
    ones = torch.ones_like(x)
    rows_u = torch.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y], dim=-1)
    rows_v = torch.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y], dim=-1)
    a = torch.stack([rows_u, rows_v], dim=2).reshape(batch, 8, 8)
    b = torch.stack([u, v], dim=2).reshape(batch, 8, 1)

    sol = torch.linalg.solve(a, b).squeeze(-1)
    h_n = torch.cat([sol, torch.ones(batch, 1, dtype=torch.float64, device=dp.device)], dim=1).reshape(batch, 3, 3)
    h = torch.linalg.inv(norm) @ h_n @ norm
    return h / h[:, 2:3, 2:3]


def _as_batch_homography(h, batch: int, device) -> torch.Tensor:
    if isinstance(h, Homography):
        h = h.h
    h = torch.as_tensor(h, dtype=torch.float64, device=device)
    if h.dim() == 2:
        h = h.unsqueeze(0)
    if h.shape[0] == 1 and batch > 1:
        h = h.expand(batch, 3, 3)
    return h


def warp(img: torch.Tensor, h, out_size: Frame | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear warp with zero padding.

    out(p) = img(h^-1 p) where h^-1 p lands inside the source frame, 0 elsewhere.
    `img` is (C, H, W) or (B, C, H, W); `h` is a Homography, a 3x3 array or a
    (B, 3, 3) tensor. Returns the warped image and its ValidMask (B, 1, Ho, Wo).
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    if img.dim() != 4 or img.numel() == 0:
        raise ValueError(f"warp expects a nonempty (B, C, H, W) image, got {tuple(img.shape)}")

    h_mat = _as_batch_homography(h, img.shape[0], img.device)
    if img.shape[0] == 1 and h_mat.shape[0] > 1:
        img = img.expand(h_mat.shape[0], *img.shape[1:])
    batch, _, height, width = img.shape
    out_h, out_w = out_size if out_size is not None else (height, width)

    ys, xs = torch.meshgrid(
        torch.arange(out_h, dtype=torch.float64, device=img.device),
        torch.arange(out_w, dtype=torch.float64, device=img.device),
        indexing="ij",
    )
    pix = torch.stack([xs.reshape(-1), ys.reshape(-1), torch.ones(out_h * out_w, dtype=torch.float64, device=img.device)])
    src = torch.linalg.inv(h_mat) @ pix
    w = src[:, 2]
    finite = w.abs() > 1e-12
    w = torch.where(finite, w, torch.ones_like(w))
    sx = torch.where(finite, src[:, 0] / w, torch.full_like(w, -1e6))
    sy = torch.where(finite, src[:, 1] / w, torch.full_like(w, -1e6))

    inside = (sx >= -_BOUNDS_TOL) & (sx <= width - 1 + _BOUNDS_TOL) & (sy >= -_BOUNDS_TOL) & (sy <= height - 1 + _BOUNDS_TOL)
    mask = inside.to(img.dtype).reshape(batch, 1, out_h, out_w)

    gx = 2.0 * sx / max(width - 1, 1) - 1.0
    gy = 2.0 * sy / max(height - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).reshape(batch, out_h, out_w, 2).to(img.dtype)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=True) * mask

    if squeeze:
        return out.squeeze(0), mask.squeeze(0)
    return out, mask
