"""Camera poses, the uniform enhancement rig, and training pose sampling.

Poses are spherical look-at cameras: azimuth/elevation/radius around a fixed
target with a square pinhole intrinsic. The rig covers azimuth evenly (gap
exactly 2*pi/n_views between consecutive poses) and assigns elevation bands
round-robin, which keeps the pose distribution unbiased per view.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError

TWO_PI = 2.0 * math.pi

_WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class CameraPose:
    azimuth: float  # radians, [0, 2*pi)
    elevation: float  # radians
    radius: float  # world units
    fov: float  # radians, full vertical/horizontal angle
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("camera radius must be > 0")
        if not 0.0 < self.fov < math.pi:
            raise ConfigurationError("fov must be in (0, pi)")
        object.__setattr__(self, "azimuth", float(self.azimuth) % TWO_PI)
        object.__setattr__(self, "elevation", float(self.elevation))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "fov", float(self.fov))
        object.__setattr__(self, "look_at", tuple(float(c) for c in self.look_at))

    def position(self) -> np.ndarray:
        """Camera center in world space (y-up spherical placement)."""
        ce = math.cos(self.elevation)
        offset = np.array(
            [
                ce * math.sin(self.azimuth),
                math.sin(self.elevation),
                ce * math.cos(self.azimuth),
            ]
        )
        return np.asarray(self.look_at) + self.radius * offset

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation, columns (right, down, forward).

        OpenCV-style right-handed frame: x right, y down (image rows), z forward,
        so the matrix is a proper rotation (det = +1).
        """
        pos = self.position()
        forward = np.asarray(self.look_at) - pos
        forward = forward / np.linalg.norm(forward)
        up_hint = _WORLD_UP
        if abs(float(forward @ up_hint)) > 0.999:  # looking straight up/down
            up_hint = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up_hint)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        return np.stack([right, down, forward], axis=1)

    def camera_to_world(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.position()
        return m

    def to_dict(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "radius": self.radius,
            "fov": self.fov,
            "look_at": list(self.look_at),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(d["azimuth"], d["elevation"], d["radius"], d["fov"], tuple(d["look_at"]))


def pixel_rays(
    pose: CameraPose,
    width: int,
    height: int,
    dtype: torch.dtype = torch.float32,
    pixel_coords: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space rays, one per pixel center (or through explicit pixel coords).

    The ray through the continuous image center (width/2, height/2) is the
    camera forward axis and passes through `look_at` at distance `radius`.
    Returns (origins, dirs), both (N, 3), dirs unit length.
    """
    if pixel_coords is None:
        ys, xs = torch.meshgrid(
            torch.arange(height, dtype=dtype) + 0.5,
            torch.arange(width, dtype=dtype) + 0.5,
            indexing="ij",
        )
        px = xs.reshape(-1)
        py = ys.reshape(-1)
    else:
        px = pixel_coords[:, 0].to(dtype)
        py = pixel_coords[:, 1].to(dtype)

    focal = 0.5 * width / math.tan(pose.fov / 2.0)
    # Camera frame: x right, y down (image rows), z forward (into the scene).
    dirs_cam = torch.stack(
        [
            (px - width / 2.0) / focal,
            (py - height / 2.0) / focal,
            torch.ones_like(px),
        ],
        dim=-1,
    )
    rot = torch.as_tensor(pose.rotation(), dtype=dtype)
    dirs = dirs_cam @ rot.T
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origin = torch.as_tensor(pose.position(), dtype=dtype)
    origins = origin.expand(dirs.shape[0], 3).contiguous()
    return origins, dirs


@dataclass
class PoseSet:
    """Ordered rig poses plus the planned enhancement samples per view."""

    poses: list[CameraPose]
    samples_per_view: int

    def __post_init__(self):
        if self.samples_per_view < 1:
            raise ConfigurationError("samples_per_view must be >= 1")
        azimuths = [p.azimuth for p in self.poses]
        if any(b <= a for a, b in zip(azimuths, azimuths[1:])):
            raise ConfigurationError("rig azimuths must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def planned_images(self) -> int:
        return len(self.poses) * self.samples_per_view

    def to_dict(self) -> dict:
        return {
            "poses": [p.to_dict() for p in self.poses],
            "samples_per_view": self.samples_per_view,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseSet":
        return cls([CameraPose.from_dict(p) for p in d["poses"]], d["samples_per_view"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "PoseSet":
        return cls.from_dict(json.loads(s))


def uniform_pose_set(
    n_views: int,
    samples_per_view: int,
    elevation_bands: tuple[float, ...] = (0.0, math.radians(30.0)),
    radius: float = 2.0,
    fov: float = math.radians(50.0),
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> PoseSet:
    """Evenly spaced azimuth ring(s) enveloping the scene.

    Azimuth gap between consecutive poses is exactly 2*pi/n_views; elevation
    bands are assigned round-robin so each band is itself evenly spaced.
    Fully deterministic.
    """
    if n_views < 1:
        raise ConfigurationError("n_views must be >= 1")
    if samples_per_view < 1:
        raise ConfigurationError("samples_per_view must be >= 1")
    bands = tuple(elevation_bands)
    if len(bands) == 0:
        raise ConfigurationError("elevation_bands must not be empty")

    poses = [
        CameraPose(
            azimuth=TWO_PI * i / n_views,
            elevation=bands[i % len(bands)],
            radius=radius,
            fov=fov,
            look_at=look_at,
        )
        for i in range(n_views)
    ]
    return PoseSet(poses, samples_per_view)


@dataclass
class PoseDistribution:
    """Ranges for random training views. Degenerate [a, a] ranges are allowed."""

    azimuth_range: tuple[float, float] = (0.0, TWO_PI)
    elevation_range: tuple[float, float] = (math.radians(-10.0), math.radians(45.0))
    radius_range: tuple[float, float] = (2.0, 2.0)
    fov: float = math.radians(50.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("azimuth_range", "elevation_range", "radius_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigurationError(f"{name} is empty: [{lo}, {hi}]")


def training_pose_sampler(rng_seed: int, distribution: PoseDistribution):
    """Infinite reproducible stream of poses uniform over the configured ranges."""
    rng = np.random.default_rng(rng_seed)
    d = distribution
    while True:
        yield CameraPose(
            azimuth=rng.uniform(*d.azimuth_range),
            elevation=rng.uniform(*d.elevation_range),
            radius=rng.uniform(*d.radius_range),
            fov=d.fov,
            look_at=d.look_at,
        )
