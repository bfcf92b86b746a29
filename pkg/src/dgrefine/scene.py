"""Dense voxel radiance field and differentiable emission-absorption renderer.

The field stores pre-activation density and color lattices; softplus/sigmoid
activations keep density non-negative and colors in [0, 1]. Rendering casts
one ray per pixel center, clips it against the field bounding box, takes
uniformly spaced midpoint samples, trilinearly interpolates the raw lattices,
activates, and composites front to back over a configurable background.
Everything is plain torch tensor math, so gradients flow to every lattice
parameter and the whole pass is deterministic (no RNG, no atomics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .cameras import CameraPose, pixel_rays
from .errors import ConfigurationError

DEFAULT_BBOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]], dtype=np.float64)

FIELD_CHECKPOINT_KIND = "radiance_field"
FIELD_CHECKPOINT_VERSION = 1

DENSITY_ACTIVATIONS = {"softplus": F.softplus}
COLOR_ACTIVATIONS = {"sigmoid": torch.sigmoid}


def softplus_inverse(y):
    """x such that softplus(x) = y, stable for small and large y."""
    y = np.asarray(y, dtype=np.float64)
    out = np.where(y > 20.0, y, np.log(np.expm1(np.clip(y, 1e-30, 20.0))))
    return out


@dataclass
class RadianceField:
    """Voxel lattice scene model. Lattice points span the bbox corner-to-corner."""

    density_raw: torch.Tensor  # (N, N, N) pre-activation
    color_raw: torch.Tensor  # (N, N, N, 3) pre-activation
    bbox: np.ndarray  # (2, 3) [min, max] world bounds
    density_activation: str = "softplus"
    color_activation: str = "sigmoid"

    def __post_init__(self):
        if self.density_raw.shape != self.color_raw.shape[:3]:
            raise ConfigurationError("density and color lattices must share resolution")
        if self.density_activation not in DENSITY_ACTIVATIONS:
            raise ConfigurationError(f"unknown density activation {self.density_activation!r}")
        if self.color_activation not in COLOR_ACTIVATIONS:
            raise ConfigurationError(f"unknown color activation {self.color_activation!r}")
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)

    @property
    def resolution(self) -> int:
        return self.density_raw.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.density_raw.dtype

    def parameters(self) -> list[torch.Tensor]:
        return [self.density_raw, self.color_raw]

    def center(self) -> np.ndarray:
        return 0.5 * (self.bbox[0] + self.bbox[1])

    def clone(self) -> "RadianceField":
        return RadianceField(
            self.density_raw.detach().clone(),
            self.color_raw.detach().clone(),
            self.bbox.copy(),
            self.density_activation,
            self.color_activation,
        )

    def to_dtype(self, dtype: torch.dtype) -> "RadianceField":
        return RadianceField(
            self.density_raw.detach().to(dtype),
            self.color_raw.detach().to(dtype),
            self.bbox.copy(),
            self.density_activation,
            self.color_activation,
        )

    def requires_grad_(self, flag: bool = True) -> "RadianceField":
        self.density_raw.requires_grad_(flag)
        self.color_raw.requires_grad_(flag)
        return self


@dataclass
class RenderSettings:
    image_size: int = 64
    samples_per_ray: int = 64
    near: float = 0.5
    far: float = 3.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    compute_depth: bool = True
    compute_normal: bool = False

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigurationError("image_size must be >= 8")
        if self.samples_per_ray < 2:
            raise ConfigurationError("samples_per_ray must be >= 2")
        if not self.near < self.far:
            raise ConfigurationError("near must be < far")
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3 or any(c < 0.0 or c > 1.0 for c in bg):
            raise ConfigurationError("background must be RGB in [0, 1]")
        self.background = bg


@dataclass
class RenderedView:
    rgb: torch.Tensor  # (H, W, 3) in [0, 1]
    alpha: torch.Tensor  # (H, W) in [0, 1]
    depth: torch.Tensor | None  # (H, W) world units, None if not computed
    pose: CameraPose
    normal: torch.Tensor | None = None  # (H, W, 3) camera-space, optional
    settings: RenderSettings | None = None

    def rgb_numpy(self) -> np.ndarray:
        return self.rgb.detach().cpu().numpy()


def init_field(
    resolution: int,
    bbox: np.ndarray | None = None,
    seed: int = 0,
    blob_density: float = 1.0,
    blob_sigma: float = 0.25,
    color_noise_std: float = 0.1,
    floor_density: float = 1e-6,
    dtype: torch.dtype = torch.float32,
) -> RadianceField:
    """Soft-sphere initialization: a Gaussian density blob at the bbox center.

    The blob guarantees early renders are non-empty. Along a ray through the
    center the analytic optical depth is blob_density * blob_sigma * sqrt(2*pi),
    so the initial center-pixel alpha is strictly inside (0, 1).
    """
    if resolution < 8:
        raise ConfigurationError("field resolution must be >= 8")
    bbox = np.asarray(DEFAULT_BBOX if bbox is None else bbox, dtype=np.float64).reshape(2, 3)

    axes = [np.linspace(bbox[0, a], bbox[1, a], resolution) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    center = 0.5 * (bbox[0] + bbox[1])
    r2 = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2
    sigma = blob_density * np.exp(-r2 / (2.0 * blob_sigma**2)) + floor_density
    density_raw = torch.from_numpy(softplus_inverse(sigma)).to(dtype)

    gen = torch.Generator().manual_seed(seed)
    color_raw = torch.randn((resolution,) * 3 + (3,), generator=gen) * color_noise_std
    return RadianceField(density_raw, color_raw.to(dtype), bbox)


def init_blob_center_alpha(
    blob_density: float = 1.0, blob_sigma: float = 0.25
) -> float:
    """Closed-form alpha of the initialization blob for a ray through the center."""
    return 1.0 - math.exp(-blob_density * blob_sigma * math.sqrt(2.0 * math.pi))


def _trilinear(grid: torch.Tensor, points: torch.Tensor, bbox: np.ndarray) -> torch.Tensor:
    """Interpolate `grid` at world `points` (M, 3). Lattice is corner-aligned.

    grid: (N, N, N) or (N, N, N, C). Points outside the bbox clamp to the faces.
    Backed by grid_sample with align_corners=True, which matches a lattice whose
    first/last points sit exactly on the bbox faces.
    """
    dtype = grid.dtype
    bmin = torch.as_tensor(bbox[0], dtype=dtype)
    extent = torch.as_tensor(bbox[1] - bbox[0], dtype=dtype)
    u = (points - bmin) / extent * 2.0 - 1.0  # normalized lattice coords in [-1, 1]

    if grid.dim() == 3:
        vol = grid[None, None]  # (1, 1, Nx, Ny, Nz)
        channels = 1
    else:
        vol = grid.permute(3, 0, 1, 2)[None]  # (1, C, Nx, Ny, Nz)
        channels = vol.shape[1]

    # grid_sample's last axis orders (W, H, D) = lattice axes (z, y, x).
    coords = torch.stack([u[:, 2], u[:, 1], u[:, 0]], dim=-1)
    coords = coords.reshape(1, -1, 1, 1, 3)
    out = F.grid_sample(
        vol, coords, mode="bilinear", padding_mode="border", align_corners=True
    )
    out = out.reshape(channels, -1).T
    return out[:, 0] if grid.dim() == 3 else out


def _ray_bbox_span(
    origins: torch.Tensor, dirs: torch.Tensor, bbox: np.ndarray
) -> tuple[torch.Tensor, torch.Tensor]:
    """Slab-test entry/exit distances of each ray against the bbox."""
    dtype = origins.dtype
    bmin = torch.as_tensor(bbox[0], dtype=dtype)
    bmax = torch.as_tensor(bbox[1], dtype=dtype)
    inv = 1.0 / torch.where(dirs.abs() > 1e-12, dirs, torch.full_like(dirs, 1e-12))
    t_a = (bmin - origins) * inv
    t_b = (bmax - origins) * inv
    t_enter = torch.minimum(t_a, t_b).amax(dim=-1)
    t_exit = torch.maximum(t_a, t_b).amin(dim=-1)
    return t_enter, t_exit


def _render_rays(
    field: RadianceField,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    settings: RenderSettings,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    """Composite a flat bundle of rays; returns (rgb (R,3), alpha (R,), depth (R,) or None)."""
    dtype = field.dtype
    n_rays = origins.shape[0]
    s = settings.samples_per_ray

    t_enter, t_exit = _ray_bbox_span(origins, dirs, field.bbox)
    t0 = torch.clamp(t_enter, min=settings.near)
    t1 = torch.clamp(t_exit, max=settings.far)
    hit = t1 > t0
    span = torch.where(hit, t1 - t0, torch.zeros_like(t0))

    # Uniform midpoint stratification of [t0, t1]; delta is the per-ray bin width.
    delta = span / s
    offsets = (torch.arange(s, dtype=dtype) + 0.5) / s
    t = t0[:, None] + offsets[None, :] * span[:, None]  # (R, S)
    points = origins[:, None, :] + dirs[:, None, :] * t[..., None]

    density_act = DENSITY_ACTIVATIONS[field.density_activation]
    color_act = COLOR_ACTIVATIONS[field.color_activation]
    sigma = density_act(_trilinear(field.density_raw, points.reshape(-1, 3), field.bbox))
    sigma = sigma.reshape(n_rays, s) * hit[:, None].to(dtype)
    color = color_act(_trilinear(field.color_raw, points.reshape(-1, 3), field.bbox))
    color = color.reshape(n_rays, s, 3)

    alphas = 1.0 - torch.exp(-sigma * delta[:, None])
    transparency = 1.0 - alphas
    # Exclusive cumulative product: visibility of sample i from the camera.
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alphas[:, :1]), transparency[:, :-1]], dim=1), dim=1
    )
    weights = trans * alphas  # (R, S)

    alpha = 1.0 - torch.prod(transparency, dim=1)  # exact telescoped sum of weights
    bg = torch.as_tensor(settings.background, dtype=dtype)
    rgb = (weights[..., None] * color).sum(dim=1) + (1.0 - alpha)[:, None] * bg

    depth = None
    if settings.compute_depth:
        depth = (weights * t).sum(dim=1) / torch.clamp(alpha, min=1e-6)
    return rgb, alpha, depth


def render_batch(
    field: RadianceField, poses: list[CameraPose], settings: RenderSettings
) -> list[RenderedView]:
    """Render several poses in one interpolation pass (read-only on the field)."""
    size = settings.image_size
    dtype = field.dtype
    bundles = [pixel_rays(p, size, size, dtype=dtype) for p in poses]
    origins = torch.cat([o for o, _ in bundles], dim=0)
    dirs = torch.cat([d for _, d in bundles], dim=0)

    rgb, alpha, depth = _render_rays(field, origins, dirs, settings)
    views = []
    per = size * size
    for i, pose in enumerate(poses):
        sl = slice(i * per, (i + 1) * per)
        d = depth[sl].reshape(size, size) if depth is not None else None
        a = alpha[sl].reshape(size, size)
        normal = None
        if settings.compute_normal and d is not None:
            normal = depth_normals(d, a, pose.fov)
        views.append(
            RenderedView(
                rgb=rgb[sl].reshape(size, size, 3),
                alpha=a,
                depth=d,
                pose=pose,
                normal=normal,
                settings=settings,
            )
        )
    return views


def render(field: RadianceField, pose: CameraPose, settings: RenderSettings) -> RenderedView:
    """Render the field at `pose`. Pure and deterministic; differentiable in the lattices."""
    return render_batch(field, [pose], settings)[0]


def depth_normals(depth: torch.Tensor, alpha: torch.Tensor, fov: float) -> torch.Tensor:
    """Camera-space unit normals from a depth map via central differences.

    Convention: x right, y up, z toward the camera; a fronto-parallel surface
    maps to (0, 0, 1). Depth gradients are converted from per-pixel to world
    units using the pixel footprint at each depth.
    """
    h, w = depth.shape
    pixel_world = depth * (2.0 * math.tan(fov / 2.0) / w)  # world size of one pixel
    dz_dx = torch.zeros_like(depth)
    dz_dy = torch.zeros_like(depth)
    dz_dx[:, 1:-1] = (depth[:, 2:] - depth[:, :-2]) / 2.0
    dz_dy[1:-1, :] = (depth[2:, :] - depth[:-2, :]) / 2.0
    scale = torch.clamp(pixel_world, min=1e-8)
    # Image rows grow downward while camera y grows upward.
    n = torch.stack([-dz_dx / scale, dz_dy / scale, torch.ones_like(depth)], dim=-1)
    return n / torch.linalg.norm(n, dim=-1, keepdim=True)


REGULARIZER_NAMES = ("opacity_entropy", "orientation")


def regularization_losses(
    view: RenderedView, weights: dict[str, float]
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of named scene regularizers with a per-term breakdown.

    opacity_entropy: mean binary entropy of alpha, pushing pixels to be either
    fully covered or empty. orientation: penalizes depth-derived normals that
    face away from the camera (negative z in camera space).
    """
    for name in weights:
        if name not in REGULARIZER_NAMES:
            raise ConfigurationError(f"unknown regularizer {name!r}")

    terms: dict[str, torch.Tensor] = {}
    a = view.alpha.clamp(1e-7, 1.0 - 1e-7)
    entropy = -(a * torch.log(a) + (1.0 - a) * torch.log(1.0 - a))
    # Exactly zero at the saturated endpoints instead of the clamped epsilon value.
    saturated = (view.alpha <= 0.0) | (view.alpha >= 1.0)
    terms["opacity_entropy"] = torch.where(saturated, torch.zeros_like(entropy), entropy).mean()

    if "orientation" in weights:
        if view.depth is None:
            raise ConfigurationError("orientation regularizer needs a depth map")
        normal = view.normal
        if normal is None:
            normal = depth_normals(view.depth, view.alpha, view.pose.fov)
        backfacing = F.relu(-normal[..., 2]) ** 2
        mask = (view.alpha > 0.5).to(backfacing.dtype)
        terms["orientation"] = (backfacing * mask).sum() / mask.sum().clamp(min=1.0)

    total = view.rgb.new_zeros(())
    for name, w in weights.items():
        total = total + float(w) * terms[name]
    return total, terms


def save_field(field: RadianceField, path) -> None:
    """Write the field as float32 lattices with bbox, activations, version, hash."""
    arrays = {
        "density_raw": field.density_raw.detach().cpu().numpy().astype(np.float32),
        "color_raw": field.color_raw.detach().cpu().numpy().astype(np.float32),
    }
    meta = {
        "bbox": field.bbox.tolist(),
        "density_activation": field.density_activation,
        "color_activation": field.color_activation,
    }
    checkpoint.save_archive(path, FIELD_CHECKPOINT_KIND, FIELD_CHECKPOINT_VERSION, arrays, meta)


def load_field(path) -> RadianceField:
    arrays, meta = checkpoint.load_archive(path, FIELD_CHECKPOINT_KIND, FIELD_CHECKPOINT_VERSION)
    return RadianceField(
        torch.from_numpy(arrays["density_raw"]),
        torch.from_numpy(arrays["color_raw"]),
        np.asarray(meta["bbox"]),
        meta["density_activation"],
        meta["color_activation"],
    )
