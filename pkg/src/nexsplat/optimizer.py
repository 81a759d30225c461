"""Inverse rendering at desk scale: loss, metrics, bounded Adam, and the
training loop with split-based densification and pruning.

Images are compared in sRGB space; the loss returns the adjoint seed with
respect to the linear render so it can be fed straight into the renderer's
backward pass.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .adjoint import UnsupportedModelError
from .compositor import ALPHA_MAX
from .images import dsrgb_dlinear, linear_to_srgb
from .primitives import Camera, OPACITY_MIN, SCALE_MIN, quat_to_rot
from .render import SceneArrays, render, render_backward, render_forward_cached
from .transmittance import TransmittanceModel, model_from_config, model_to_config

__all__ = [
    "SSIM_WINDOW",
    "ssim",
    "loss",
    "mse",
    "psnr",
    "AdamState",
    "bounded_adam_step",
    "densify_and_prune",
    "TrainConfig",
    "TrainReport",
    "train",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAM_GROUPS = ("centers", "scales", "quats", "opacities", "sh")


# ---------------------------------------------------------------------------
# metrics and loss
# ---------------------------------------------------------------------------


def _gauss_kernel():
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _window_filter(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def _valid_mask(h: int, w: int) -> np.ndarray:
    half = SSIM_WINDOW // 2
    mask = np.zeros((h, w))
    mask[half:h - half, half:w - half] = 1.0
    return mask


def ssim(x: np.ndarray, y: np.ndarray, with_grad: bool = False):
    """Mean structural similarity over fully-interior windows.

    ``x`` and ``y`` are (H, W, 3) in [0, 1]-ish range.  With ``with_grad``
    also returns d(mean ssim)/dx.
    """
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    h, w = x.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    mask = _valid_mask(h, w)[:, :, None]

    mu_x, mu_y = _window_filter(x), _window_filter(y)
    sxx = _window_filter(x * x) - mu_x * mu_x
    syy = _window_filter(y * y) - mu_y * mu_y
    sxy = _window_filter(x * y) - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    s_map = (a1 * a2) / (b1 * b2)
    n_valid = mask.sum()  # interior windows per channel
    value = float((s_map * mask).sum() / (n_valid * 3))
    if not with_grad:
        return value

    m = mask / (n_valid * 3)
    ds_dmu = 2 * (mu_y * a2 * b1 - mu_x * a1 * a2) / (b1 * b1 * b2)
    ds_dsxx = -s_map / b2
    ds_dsxy = 2 * a1 / (b1 * b2)
    grad = (_window_filter(m * (ds_dmu - 2 * mu_x * ds_dsxx - mu_y * ds_dsxy))
            + 2 * x * _window_filter(m * ds_dsxx)
            + y * _window_filter(m * ds_dsxy))
    return value, grad


def mse(a_linear: np.ndarray, b_linear: np.ndarray) -> float:
    """Mean squared error between images, in clipped sRGB."""
    xa = np.clip(linear_to_srgb(np.clip(a_linear, 0.0, None)), 0.0, 1.0)
    xb = np.clip(linear_to_srgb(np.clip(b_linear, 0.0, None)), 0.0, 1.0)
    return float(np.mean((xa - xb) ** 2))


def psnr(a_linear: np.ndarray, b_linear: np.ndarray) -> float:
    """10 log10(1 / MSE) on [0, 1] sRGB images; +inf for identical inputs."""
    err = mse(a_linear, b_linear)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / err))


def loss(rendered_linear: np.ndarray, target_linear: np.ndarray, lam: float):
    """(1 - lam) L1 + lam (1 - SSIM), both in sRGB.

    Returns the scalar loss and the adjoint seed d(loss)/d(linear render).
    """
    if rendered_linear.shape != target_linear.shape:
        raise ValueError(
            f"image shapes differ: {rendered_linear.shape} vs {target_linear.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"ssim weight must be in [0, 1], got {lam}")
    xs = linear_to_srgb(rendered_linear)
    ys = linear_to_srgb(target_linear)
    diff = xs - ys
    l1 = float(np.mean(np.abs(diff)))
    d_l1 = np.sign(diff) / diff.size

    if lam > 0.0:
        s_val, d_s = ssim(xs, ys, with_grad=True)
        total = (1.0 - lam) * l1 + lam * (1.0 - s_val)
        d_srgb = (1.0 - lam) * d_l1 - lam * d_s
    else:
        total = l1
        d_srgb = d_l1
    seed = d_srgb * dsrgb_dlinear(rendered_linear)
    return total, seed


# ---------------------------------------------------------------------------
# bounded Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    nan_skips: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def bounded_adam_step(params: dict, grads: dict, state: AdamState,
                      lr: dict, lr_mult: float = 1.0) -> None:
    """One Adam step followed by projection onto parameter bounds.

    Opacities are clamped to [1e-4, 1 - 1e-6], scales floored, quaternions
    renormalized.  Non-finite gradients are dropped (counted, not applied).
    """
    state.step += 1
    t = state.step
    for key in params:
        g = grads[key]
        bad = ~np.isfinite(g)
        if bad.any():
            state.nan_skips += int(bad.sum())
            g = np.where(bad, 0.0, g)
        m = state.m[key]
        v = state.v[key]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        params[key] -= lr[key] * lr_mult * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    if "opacities" in params:
        np.clip(params["opacities"], OPACITY_MIN, ALPHA_MAX, out=params["opacities"])
    if "scales" in params:
        np.maximum(params["scales"], SCALE_MIN, out=params["scales"])
    if "quats" in params:
        q = params["quats"]
        q /= np.linalg.norm(q, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# densify / prune
# ---------------------------------------------------------------------------


def densify_and_prune(arrs: SceneArrays, mean_pos_grad: np.ndarray,
                      grad_threshold: float, prune_opacity: float,
                      prune_scale: float, max_primitives: int):
    """Split high-gradient primitives along their longest axis; drop the
    nearly-invisible ones.  Returns (new_arrays, n_split, n_pruned)."""
    n = len(arrs)
    keep = (arrs.opacities >= prune_opacity) & (arrs.scales.max(axis=1) >= prune_scale)
    split = keep & (mean_pos_grad > grad_threshold)
    budget = max(0, max_primitives - int(keep.sum()))
    if split.sum() > budget:
        order = np.argsort(-mean_pos_grad)
        allowed = np.zeros(n, dtype=bool)
        chosen = [i for i in order if split[i]][:budget]
        allowed[chosen] = True
        split = split & allowed

    plain = keep & ~split
    out = {k: [getattr(arrs, k)[plain]] for k in
           ("centers", "scales", "quats", "opacities", "sh")}
    idx = np.nonzero(split)[0]
    if idx.size:
        axis = np.argmax(arrs.scales[idx], axis=1)
        R = quat_to_rot(arrs.quats[idx])
        world_axis = np.take_along_axis(R, axis[:, None, None], axis=2)[:, :, 0]
        length = arrs.scales[idx, axis]
        offset = 0.5 * length[:, None] * world_axis
        child_scale = arrs.scales[idx].copy()
        child_scale[np.arange(idx.size), axis] = length / 2.0
        for sign in (+1.0, -1.0):
            out["centers"].append(arrs.centers[idx] + sign * offset)
            out["scales"].append(child_scale)
            out["quats"].append(arrs.quats[idx])
            out["opacities"].append(arrs.opacities[idx])
            out["sh"].append(arrs.sh[idx])
    new = SceneArrays(**{k: np.concatenate(v, axis=0) for k, v in out.items()})
    return new, int(idx.size), int(n - keep.sum())


# ---------------------------------------------------------------------------
# configuration and reporting
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Training settings.  Defaults mirror the reconstruction recipe; desk
    fixtures override the rates and budgets."""

    model: dict = field(default_factory=lambda: {"model": "exponential"})
    lambda_ssim: float = 0.2
    lr: dict = field(default_factory=lambda: {
        "centers": 0.13, "scales": 0.08, "quats": 0.45,
        "opacities": 1.0, "sh": 2.0,
    })
    lr_decay_floor: float = 0.1
    max_iterations: int = 2000
    budget_s: float | None = None
    target_psnr: float | None = None
    densify_interval: int = 100
    densify_grad_threshold: float = 5e-6
    densify_until: int = 3000
    prune_interval: int = 200
    prune_opacity: float = 0.008
    prune_scale: float = 1e-4
    max_primitives: int = 200_000
    coarse_to_fine: list = field(default_factory=lambda: [[4, 64], [2, 200]])
    chunk_size: int | None = 128
    max_splats: int = 128
    alpha_cutoff: float = 1.0 / 255.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must be in [0, 1]")
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")
        missing = set(PARAM_GROUPS) - self.lr.keys()
        if missing:
            raise ValueError(f"missing learning rates for {sorted(missing)}")
        self.transmittance_model()  # validates the tag and parameter

    def transmittance_model(self) -> TransmittanceModel:
        return model_from_config(self.model)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_json(self, path) -> None:
        d = dict(self.__dict__)
        d["model"] = model_to_config(self.transmittance_model())
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (iter, wallclock, loss, psnr, n_prims)
    final_metrics: list = field(default_factory=list)
    nan_skips: int = 0

    def append(self, iteration: int, wallclock: float, loss_value: float,
               psnr_value: float, n_primitives: int) -> None:
        self.rows.append((iteration, wallclock, loss_value, psnr_value, n_primitives))

    @property
    def iterations(self) -> int:
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,wallclock_s,loss,psnr,n_primitives\n")
            for it, wall, lo, ps, n in self.rows:
                fh.write(f"{it},{wall:.6f},{lo:.8g},{ps:.6g},{n}\n")

    def metrics_to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"views": self.final_metrics, "iterations": self.iterations,
                       "nan_skips": self.nan_skips}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _downscale_camera(camera: Camera, divisor: int) -> Camera:
    if divisor == 1:
        return camera
    return Camera(camera.position, camera.rotation, camera.focal / divisor,
                  camera.cx / divisor, camera.cy / divisor,
                  camera.width // divisor, camera.height // divisor)


def _downscale_image(img: np.ndarray, divisor: int) -> np.ndarray:
    if divisor == 1:
        return img
    h, w = img.shape[:2]
    hh, ww = h // divisor, w // divisor
    return img[:hh * divisor, :ww * divisor].reshape(
        hh, divisor, ww, divisor, -1).mean(axis=(1, 3)).reshape(hh, ww, img.shape[2])


def _divisor_at(coarse_to_fine, iteration: int) -> int:
    for divisor, until in coarse_to_fine:
        if iteration < until:
            return int(divisor)
    return 1


def train(scene, views, config: TrainConfig):
    """Optimize primitive parameters against target views.

    ``views`` is a list of (Camera, target_linear_image).  Stops on the
    iteration cap, the wall-clock budget, or the optional target PSNR.
    Returns (list of primitives, TrainReport).
    """
    if not views:
        raise ValueError("training needs at least one view")
    model = config.transmittance_model()
    if model.variant not in ("linear", "quadratic", "exponential"):
        raise UnsupportedModelError(
            f"training requires an analytic adjoint; {model.describe()} has none")

    arrs = scene.copy() if isinstance(scene, SceneArrays) else SceneArrays.from_primitives(scene)
    background = np.zeros(3)
    report = TrainReport()
    if config.max_iterations <= 0:
        out_scene = arrs.to_primitives()
        _final_metrics(arrs, views, model, config, report)
        return out_scene, report

    params = {k: getattr(arrs, k) for k in PARAM_GROUPS}
    state = AdamState.for_params(params)
    pos_grad_accum = np.zeros(len(arrs))
    accum_steps = 0
    scaled = {}

    start = time.perf_counter()
    for it in range(config.max_iterations):
        elapsed = time.perf_counter() - start
        if config.budget_s is not None and elapsed >= config.budget_s:
            break
        divisor = _divisor_at(config.coarse_to_fine, it)
        vi = it % len(views)
        if (vi, divisor) not in scaled:
            cam, target = views[vi]
            scaled[(vi, divisor)] = (_downscale_camera(cam, divisor),
                                     _downscale_image(target, divisor))
        cam_d, target_d = scaled[(vi, divisor)]

        fwd, cache = render_forward_cached(
            arrs, cam_d, model, background, max_splats=config.max_splats,
            alpha_cutoff=config.alpha_cutoff, chunk_size=config.chunk_size)
        loss_value, seed = loss(fwd.rgb, target_d, config.lambda_ssim)
        grads = render_backward(
            arrs, cam_d, model, background, cache, seed,
            max_splats=config.max_splats, alpha_cutoff=config.alpha_cutoff,
            chunk_size=config.chunk_size)

        lr_mult = config.lr_decay_floor ** (it / max(1, config.max_iterations))
        bounded_adam_step(params, grads, state, config.lr, lr_mult)

        pos_grad_accum += np.linalg.norm(grads["centers"], axis=1)
        accum_steps += 1

        psnr_value = psnr(fwd.rgb, target_d)
        report.append(it + 1, time.perf_counter() - start, loss_value, psnr_value,
                      len(arrs))

        if (config.target_psnr is not None and divisor == 1
                and psnr_value >= config.target_psnr):
            break

        densify_due = (config.densify_interval > 0 and (it + 1) % config.densify_interval == 0
                       and (it + 1) <= config.densify_until)
        prune_due = config.prune_interval > 0 and (it + 1) % config.prune_interval == 0
        if densify_due or prune_due:
            arrs, n_split, n_pruned = densify_and_prune(
                arrs,
                pos_grad_accum / max(1, accum_steps),
                config.densify_grad_threshold if densify_due else np.inf,
                config.prune_opacity if prune_due else 0.0,
                config.prune_scale if prune_due else 0.0,
                config.max_primitives)
            if n_split or n_pruned:
                params = {k: getattr(arrs, k) for k in PARAM_GROUPS}
                report.nan_skips += state.nan_skips
                state = AdamState.for_params(params)
            pos_grad_accum = np.zeros(len(arrs))
            accum_steps = 0

    report.nan_skips += state.nan_skips
    _final_metrics(arrs, views, model, config, report)
    return arrs.to_primitives(), report


def _final_metrics(arrs, views, model, config, report: TrainReport) -> None:
    for cam, target in views:
        out = render(arrs, cam, model, np.zeros(3), max_splats=config.max_splats,
                     alpha_cutoff=config.alpha_cutoff, chunk_size=config.chunk_size)
        xs = np.clip(linear_to_srgb(np.clip(out.rgb, 0, None)), 0, 1)
        ys = np.clip(linear_to_srgb(np.clip(target, 0, None)), 0, 1)
        report.final_metrics.append({
            "psnr": psnr(out.rgb, target),
            "mse": mse(out.rgb, target),
            "ssim": ssim(xs, ys),
        })
