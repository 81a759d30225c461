"""Procedurally generated toy scenes for the CLI studies and fixtures.

The transmittance study stacks 100 thin, laterally enormous ellipsoids so
every pixel ray crosses all of them at full kernel strength; the discrete
transmittance staircase then sits exactly on the per-splat opacity grid,
and saturation indices are integer-exact.  The blending study arranges
three fully opaque colored splats, concentric or rotated.
"""
from __future__ import annotations

import numpy as np

from .primitives import Camera, GaussianPrimitive, SH_C0
from .render import SceneArrays
from .transmittance import TransmittanceModel

__all__ = [
    "STUDY_MODELS",
    "transmit_study_scene",
    "transmit_study_camera",
    "blend_study_scene",
    "blend_study_camera",
    "golden_scene",
    "golden_camera",
    "selfrecon_scene",
    "selfrecon_camera",
    "perturb_scene",
    "dense_scene",
]

# the nine columns of the comparison studies, fastest decay last
STUDY_MODELS = [
    TransmittanceModel.power_law(2.0),
    TransmittanceModel.exponential(),
    TransmittanceModel.quadratic(-0.5),
    TransmittanceModel.vicini(0.5),
    TransmittanceModel.blended(0.5),
    TransmittanceModel.linear(),
    TransmittanceModel.quadratic(0.5),
    TransmittanceModel.quadratic(1.0),
    TransmittanceModel.power_law(-1.0),
]

TRANSMIT_OPACITY = 0.02
TRANSMIT_COUNT = 100
# wide enough that the kernel rounds to exactly 1.0 across the viewport
_TRANSMIT_LATERAL = 1e9
_TRANSMIT_THICKNESS = 0.01


def _flat_rgb(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64)[:, None] / SH_C0


def _roll_quat(angle: float) -> np.ndarray:
    # rotation about the viewing axis (+z)
    return np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)])


def transmit_study_scene(seed: int) -> list[GaussianPrimitive]:
    """100 elliptical splats of opacity 0.02, uniform in depth 1..10.

    Aspect ratios in [1, 3] and random in-plane rotations; both lateral
    axes are so large that every pixel sees each splat at the exact peak
    opacity, which keeps the overdraw accounting integer-exact.
    """
    rng = np.random.default_rng(seed)
    depths = np.sort(rng.uniform(1.0, 10.0, TRANSMIT_COUNT))
    scene = []
    white = _flat_rgb([1.0, 1.0, 1.0])
    for z in depths:
        aspect = rng.uniform(1.0, 3.0)
        angle = rng.uniform(0.0, np.pi)
        scale = [_TRANSMIT_LATERAL * aspect, _TRANSMIT_LATERAL, _TRANSMIT_THICKNESS]
        scene.append(GaussianPrimitive([0.0, 0.0, z], scale, _roll_quat(angle),
                                       TRANSMIT_OPACITY, white))
    return scene


def transmit_study_camera(size: int = 64) -> Camera:
    return Camera.from_look_at([0, 0, 0], [0, 0, 1], [0, 1, 0], 50.0, size, size)


def blend_study_scene(variant: str) -> list[GaussianPrimitive]:
    """Three fully opaque splats: red front, green middle, blue back."""
    colors = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])
    depths = (2.0, 4.0, 6.0)
    thin = 0.01
    scene = []
    if variant == "concentric":
        sizes = (0.35, 0.8, 1.3)
        for color, z, s in zip(colors, depths, sizes):
            scene.append(GaussianPrimitive([0, 0, z], [s, s, thin], _roll_quat(0.0),
                                           1.0, _flat_rgb(color)))
    elif variant == "cyclic":
        angles = (0.0, np.pi / 3, 2 * np.pi / 3)
        offsets = ([0.0, 0.25], [-0.22, -0.12], [0.22, -0.12])
        for color, z, ang, off in zip(colors, depths, angles, offsets):
            scale = [1.1 * z / 2.0, 0.22 * z / 2.0, thin]
            scene.append(GaussianPrimitive([off[0] * z / 2.0, off[1] * z / 2.0, z],
                                           scale, _roll_quat(ang), 1.0, _flat_rgb(color)))
    else:
        raise ValueError(f"unknown blend variant: {variant!r}")
    return scene


def blend_study_camera(size: int = 64) -> Camera:
    return Camera.from_look_at([0, 0, 0], [0, 0, 1], [0, 1, 0], 60.0, size, size)


def golden_camera() -> Camera:
    return Camera.from_look_at([0.4, -0.3, -3.0], [0, 0, 2.0], [0, 1, 0], 55.0, 48, 48)


def golden_scene(seed: int = 0, n: int = 10) -> list[GaussianPrimitive]:
    """Small mixed scene used as the determinism fixture."""
    rng = np.random.default_rng(seed)
    scene = []
    for _ in range(n):
        center = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.5, 5)])
        scale = rng.uniform(0.15, 0.6, 3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        sh = np.zeros((3, 4))
        sh[:, 0] = rng.uniform(0.2, 1.2, 3) / SH_C0
        sh[:, 1:] = rng.normal(0.0, 0.2, (3, 3))
        scene.append(GaussianPrimitive(center, scale, q, rng.uniform(0.3, 0.9), sh))
    return scene


def selfrecon_scene(seed: int = 123, n: int = 8) -> list[GaussianPrimitive]:
    """Ground-truth scene for the self-reconstruction fixture."""
    rng = np.random.default_rng(seed)
    scene = []
    for _ in range(n):
        center = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8),
                           rng.uniform(2.5, 5.0)])
        scale = rng.uniform(0.25, 0.6, 3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        sh = np.zeros((3, 4))
        sh[:, 0] = rng.uniform(0.2, 1.0, 3) / SH_C0
        sh[:, 1:] = rng.normal(0.0, 0.15, (3, 3))
        scene.append(GaussianPrimitive(center, scale, q, rng.uniform(0.4, 0.85), sh))
    return scene


def perturb_scene(scene, seed: int, strength: float = 1.0) -> list[GaussianPrimitive]:
    """Jittered copy of a scene, the starting point for refinement runs."""
    rng = np.random.default_rng(seed)
    out = []
    for p in scene:
        q = p.rotation + rng.normal(0, 0.15 * strength, 4)
        q /= np.linalg.norm(q)
        lo, hi = 1.0 - 0.4 * strength, 1.0 + 0.5 * strength
        out.append(GaussianPrimitive(
            p.center + rng.normal(0, 0.25 * strength, 3),
            p.scale * rng.uniform(max(lo, 0.1), hi, 3),
            q,
            float(np.clip(p.opacity + rng.uniform(-0.2, 0.2) * strength, 0.05, 0.95)),
            p.sh * rng.uniform(max(lo, 0.1), hi, p.sh.shape),
        ))
    return out


def selfrecon_camera(size: int = 64) -> Camera:
    return Camera.from_look_at([0, 0, 0], [0, 0, 3.5], [0, 1, 0], 55.0, size, size)


def dense_scene(seed: int = 5, n: int = 5000) -> SceneArrays:
    """Dense cluster of small opaque-ish splats for throughput comparisons."""
    rng = np.random.default_rng(seed)
    centers = np.column_stack([
        rng.uniform(-1.6, 1.6, n), rng.uniform(-1.6, 1.6, n), rng.uniform(2.0, 8.0, n)])
    scales = rng.uniform(0.05, 0.18, (n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(0.3, 0.9, n)
    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = rng.uniform(0.2, 1.0, (n, 3)) / SH_C0
    return SceneArrays(centers, scales, quats, opacities, sh)
