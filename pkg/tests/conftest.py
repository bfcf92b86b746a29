import math

import numpy as np
import pytest
import torch

from dgrefine.cameras import CameraPose
from dgrefine.scene import (
    DEFAULT_BBOX,
    RadianceField,
    RenderSettings,
    softplus_inverse,
)


@pytest.fixture(autouse=True)
def _single_thread_torch():
    """Keep tests deterministic and avoid oversubscribing the 2-core CI box."""
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(old)


def make_sphere_field(
    resolution: int = 64,
    radius: float = 0.8,
    density: float = 1.0,
    color=(1.0, 0.0, 0.0),
    color_logit: float = 12.0,
    dtype=torch.float32,
) -> RadianceField:
    """Homogeneous sphere: constant post-activation density inside `radius`."""
    raw_in = float(softplus_inverse(density))
    raw_out = float(softplus_inverse(1e-8))
    axes = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(axes, axes, axes, indexing="ij")
    r = np.sqrt(gx**2 + gy**2 + gz**2)
    draw = np.where(r < radius, raw_in, raw_out)
    craw = np.zeros((resolution,) * 3 + (3,))
    for c in range(3):
        craw[..., c] = color_logit if color[c] > 0.5 else -color_logit
    return RadianceField(
        torch.from_numpy(draw).to(dtype),
        torch.from_numpy(craw).to(dtype),
        DEFAULT_BBOX.copy(),
    )


def front_pose(radius: float = 2.0, fov_deg: float = 40.0) -> CameraPose:
    return CameraPose(0.0, 0.0, radius, math.radians(fov_deg))


def chord_settings(image_size: int = 16, spp: int = 64) -> RenderSettings:
    """near/far bracket a unit-length segment centered on the origin for a
    camera at distance 2, so the integrated chord is exactly 1.0."""
    return RenderSettings(image_size=image_size, samples_per_ray=spp, near=1.5, far=2.5)
