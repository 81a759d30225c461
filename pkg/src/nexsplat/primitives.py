"""Anisotropic Gaussian primitives, cameras, and per-ray sample gathering.

Primitives are rendered as billboards: each one contributes a single
sample per ray, placed at the depth where the kernel peaks along the ray,
with opacity equal to the primitive opacity times the kernel value there.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .compositor import ALPHA_MAX, SplatSample

__all__ = [
    "OPACITY_MIN",
    "SH_C0",
    "SH_C1",
    "GaussianPrimitive",
    "Ray",
    "Camera",
    "quat_to_rot",
    "quat_rot_jacobian",
    "eval_sh",
    "peak_along_ray",
    "alpha_gradients",
    "gather_sorted",
    "load_scene",
    "save_scene",
    "load_camera",
    "save_camera",
]

OPACITY_MIN = 1e-4
SCALE_MIN = 1e-6
NEAR_PLANE = 1e-4
DEFAULT_ALPHA_CUTOFF = 1.0 / 255.0

# real spherical harmonics, bands 0 and 1
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions (w, x, y, z); leading dims batch.

    The quaternion is normalized internally, so callers may hand in raw
    optimizer state.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rot_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: (..., 4, 3, 3), component order (w,x,y,z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (4, 3, 3))
    J[..., 0, :, :] = 2 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], -2)
    J[..., 1, :, :] = 2 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1),
    ], -2)
    J[..., 2, :, :] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1),
    ], -2)
    J[..., 3, :, :] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1),
    ], -2)
    return J


@dataclass
class GaussianPrimitive:
    """One splat: center, per-axis scale, orientation, opacity, emission.

    ``sh`` holds per-channel basis coefficients, shape (3, 1) for constant
    color or (3, 4) for view-dependent band-1 emission.  Opacities above
    the compositing cap are clamped down to it so "fully opaque" inputs
    stay representable.
    """

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh: np.ndarray

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.sh = np.atleast_2d(np.asarray(self.sh, dtype=np.float64))
        if self.sh.shape not in ((3, 1), (3, 4)):
            raise ValueError(f"sh must have shape (3,1) or (3,4), got {self.sh.shape}")
        if np.any(self.scale < SCALE_MIN):
            raise ValueError(f"scale components must be >= {SCALE_MIN}")
        norm = np.linalg.norm(self.rotation)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"rotation quaternion must be unit length, |q| = {norm}")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError(f"opacity must be in (0, 1], got {self.opacity}")
        self.opacity = float(np.clip(self.opacity, OPACITY_MIN, ALPHA_MAX))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rot(self.rotation)

    def inv_covariance(self) -> np.ndarray:
        R = self.rotation_matrix()
        return (R / self.scale**2) @ R.T

    def covariance(self) -> np.ndarray:
        R = self.rotation_matrix()
        return (R * self.scale**2) @ R.T


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)


@dataclass
class Camera:
    """Pinhole camera.  ``rotation`` maps camera axes to world axes; the
    camera looks along its +z axis and image rows grow along +y."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if self.focal <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal length and image dimensions must be positive")

    @classmethod
    def from_look_at(cls, position, look_at, up, fov_deg: float,
                     width: int, height: int) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(look_at, dtype=np.float64) - position
        fn = np.linalg.norm(forward)
        if fn == 0:
            raise ValueError("camera position and look-at point coincide")
        forward = forward / fn
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, upv)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValueError("up vector is parallel to the view direction")
        right = right / rn
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(position, R, focal, width / 2.0, height / 2.0, width, height)

    def pixel_directions(self) -> np.ndarray:
        """Unit world-space directions through all pixel centers, (H, W, 3)."""
        j = np.arange(self.width) + 0.5
        i = np.arange(self.height) + 0.5
        xc = (j - self.cx) / self.focal
        yc = (i - self.cy) / self.focal
        d_cam = np.empty((self.height, self.width, 3))
        d_cam[..., 0] = xc[None, :]
        d_cam[..., 1] = yc[:, None]
        d_cam[..., 2] = 1.0
        d_world = d_cam @ self.rotation.T
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def ray_for_pixel(self, row: int, col: int) -> Ray:
        d_cam = np.array([(col + 0.5 - self.cx) / self.focal,
                          (row + 0.5 - self.cy) / self.focal, 1.0])
        d = self.rotation @ d_cam
        return Ray(self.position, d / np.linalg.norm(d))


def eval_sh(sh: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Emission from band-0/1 coefficients, clamped to be nonnegative.

    sh: (..., 3, C) with C in {1, 4}; direction: (..., 3) unit vectors.
    """
    sh = np.asarray(sh, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    out = SH_C0 * sh[..., 0]
    if sh.shape[-1] == 4:
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        out = (out
               - SH_C1 * y[..., None] * sh[..., 1]
               + SH_C1 * z[..., None] * sh[..., 2]
               - SH_C1 * x[..., None] * sh[..., 3])
    return np.maximum(out, 0.0)


def peak_along_ray(primitive: GaussianPrimitive, ray: Ray) -> tuple[float, float]:
    """Depth of the kernel maximum along the ray and the opacity there."""
    A = primitive.inv_covariance()
    b = primitive.center - ray.origin
    d = ray.direction
    Ad = A @ d
    t_peak = float(b @ Ad) / float(d @ Ad)
    diff = t_peak * d - b
    m2 = float(diff @ (A @ diff))
    alpha = min(primitive.opacity * np.exp(-0.5 * m2), ALPHA_MAX)
    return t_peak, alpha


def alpha_gradients(primitive: GaussianPrimitive, ray: Ray) -> dict:
    """Analytic derivatives of the peak opacity w.r.t. primitive parameters.

    The peak depth is the argmax of the kernel along the ray, so its own
    parameter dependence drops out of the chain (stationarity) and the
    kernel exponent can be differentiated at fixed depth.  Quaternion
    gradients include the normalization, matching finite differences of
    the raw four-vector.
    """
    t_peak, alpha = peak_along_ray(primitive, ray)
    if alpha >= ALPHA_MAX:  # clamped: flat to first order
        return {"alpha": alpha, "t_peak": t_peak,
                "d_opacity": 0.0, "d_center": np.zeros(3),
                "d_scale": np.zeros(3), "d_rotation": np.zeros(4)}
    A = primitive.inv_covariance()
    R = primitive.rotation_matrix()
    s = primitive.scale
    diff = t_peak * ray.direction - (primitive.center - ray.origin)
    u = R.T @ diff

    dm2_dcenter = -2.0 * (A @ diff)
    dm2_dscale = -2.0 * u**2 / s**3
    # m2 = diff^T R S^-2 R^T diff  =>  dm2/dR = 2 diff (S^-2 u)^T
    dm2_dR = 2.0 * np.outer(diff, u / s**2)
    J = quat_rot_jacobian(primitive.rotation)  # (4, 3, 3) at the unit point
    dm2_dq_unit = np.einsum("qab,ab->q", J, dm2_dR)
    # chain through normalization of the raw quaternion
    q = primitive.rotation
    dm2_dq = dm2_dq_unit - q * (q @ dm2_dq_unit)

    factor = -0.5 * alpha
    return {
        "alpha": alpha,
        "t_peak": t_peak,
        "d_opacity": alpha / primitive.opacity,
        "d_center": factor * dm2_dcenter,
        "d_scale": factor * dm2_dscale,
        "d_rotation": factor * dm2_dq,
    }


def gather_sorted(scene, ray: Ray, max_n: int = 128,
                  alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF,
                  near: float = NEAR_PLANE) -> list[SplatSample]:
    """Evaluate every primitive against the ray, cull, sort, truncate.

    Primitives peaking behind the near plane or below the opacity cutoff
    are dropped; survivors are sorted by peak depth (ties broken by scene
    order) and the nearest ``max_n`` kept.  Emission is evaluated for the
    ray direction.
    """
    hits = []
    for pid, prim in enumerate(scene):
        t_peak, alpha = peak_along_ray(prim, ray)
        if t_peak <= near or alpha < alpha_cutoff:
            continue
        hits.append((t_peak, pid, alpha, prim))
    hits.sort(key=lambda h: (h[0], h[1]))
    samples = []
    for t_peak, _, alpha, prim in hits[:max_n]:
        emission = eval_sh(prim.sh, ray.direction)
        samples.append(SplatSample(t_peak, alpha, tuple(emission)))
    return samples


# ---------------------------------------------------------------------------
# scene and camera files
# ---------------------------------------------------------------------------


def _primitive_to_dict(p: GaussianPrimitive) -> dict:
    return {
        "center": p.center.tolist(),
        "scale": p.scale.tolist(),
        "rotation": p.rotation.tolist(),
        "opacity": p.opacity,
        "sh": p.sh.tolist(),
    }


def _primitive_from_dict(d: dict, where: str) -> GaussianPrimitive:
    try:
        q = np.asarray(d["rotation"], dtype=np.float64)
        q = q / np.linalg.norm(q)
        return GaussianPrimitive(d["center"], d["scale"], q, float(d["opacity"]), d["sh"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{where}: invalid primitive: {exc}") from exc


def save_scene(scene, path) -> None:
    with open(path, "w") as fh:
        json.dump([_primitive_to_dict(p) for p in scene], fh)


def load_scene(path) -> list[GaussianPrimitive]:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: scene file must be a JSON array of primitives")
    return [_primitive_from_dict(d, f"{path}[{i}]") for i, d in enumerate(data)]


def save_camera(spec: dict, path) -> None:
    """Persist a look-at camera description (the format load_camera reads)."""
    required = {"position", "look_at", "up", "fov_deg", "width", "height"}
    missing = required - spec.keys()
    if missing:
        raise ValueError(f"camera spec missing keys: {sorted(missing)}")
    with open(path, "w") as fh:
        json.dump(spec, fh)


def load_camera(path) -> Camera:
    with open(path) as fh:
        d = json.load(fh)
    try:
        return Camera.from_look_at(d["position"], d["look_at"], d["up"],
                                   float(d["fov_deg"]), int(d["width"]), int(d["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: invalid camera: {exc}") from exc
