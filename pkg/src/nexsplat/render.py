"""Vectorized image rendering and its path-replay backward pass.

The sweep walks the scene in front-to-back chunks, keeping a per-pixel
carry (accumulated weight, optical depth, transparency product) and
dropping pixels from the active set once they saturate or hit the sample
cap, so work tracks overdraw rather than scene size.  With a single chunk
the traversal is exact: every surviving splat is depth-sorted per pixel
before compositing, reproducing the per-ray gather/composite contract.

The backward pass replays the identical traversal with O(pixels) state,
reading gradients from the closed-form adjoints and chaining them to the
primitive parameters through the kernel-peak derivatives.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .compositor import ALPHA_MAX
from .primitives import (
    DEFAULT_ALPHA_CUTOFF,
    NEAR_PLANE,
    SH_C0,
    SH_C1,
    Camera,
    GaussianPrimitive,
    quat_rot_jacobian,
    quat_to_rot,
)
from .transmittance import TransmittanceModel, discrete_extinction

__all__ = [
    "SceneArrays",
    "RenderResult",
    "render",
    "render_forward_cached",
    "render_backward",
    "render_with_gradients",
]


@dataclass
class SceneArrays:
    """Structure-of-arrays scene mirror used by the vectorized paths."""

    centers: np.ndarray   # (P, 3)
    scales: np.ndarray    # (P, 3)
    quats: np.ndarray     # (P, 4), normalized on use
    opacities: np.ndarray  # (P,)
    sh: np.ndarray        # (P, 3, C)

    @classmethod
    def from_primitives(cls, scene) -> "SceneArrays":
        n = len(scene)
        c = max((p.sh.shape[1] for p in scene), default=1)
        sh = np.zeros((n, 3, c))
        for i, p in enumerate(scene):
            sh[i, :, : p.sh.shape[1]] = p.sh
        return cls(
            centers=np.array([p.center for p in scene], dtype=np.float64).reshape(n, 3),
            scales=np.array([p.scale for p in scene], dtype=np.float64).reshape(n, 3),
            quats=np.array([p.rotation for p in scene], dtype=np.float64).reshape(n, 4),
            opacities=np.array([p.opacity for p in scene], dtype=np.float64),
            sh=sh,
        )

    def to_primitives(self) -> list[GaussianPrimitive]:
        prims = []
        for i in range(len(self.opacities)):
            q = self.quats[i] / np.linalg.norm(self.quats[i])
            prims.append(GaussianPrimitive(
                self.centers[i].copy(),
                np.maximum(self.scales[i], 1e-6),
                q,
                float(np.clip(self.opacities[i], 1e-4, ALPHA_MAX)),
                self.sh[i].copy(),
            ))
        return prims

    def __len__(self) -> int:
        return len(self.opacities)

    def copy(self) -> "SceneArrays":
        return SceneArrays(self.centers.copy(), self.scales.copy(), self.quats.copy(),
                           self.opacities.copy(), self.sh.copy())


@dataclass
class RenderResult:
    rgb: np.ndarray       # (H, W, 3) linear radiance
    overdraw: np.ndarray  # (H, W) splats evaluated per pixel
    residual: np.ndarray  # (H, W) transmittance left after all splats


def _sh_basis(dirs: np.ndarray, n_coeffs: int) -> np.ndarray:
    """(M, C) basis row per direction."""
    m = dirs.shape[0]
    Y = np.empty((m, n_coeffs))
    Y[:, 0] = SH_C0
    if n_coeffs == 4:
        Y[:, 1] = -SH_C1 * dirs[:, 1]
        Y[:, 2] = SH_C1 * dirs[:, 2]
        Y[:, 3] = -SH_C1 * dirs[:, 0]
    return Y


def _chunk_geometry(arrs: SceneArrays, ids: np.ndarray, dirs: np.ndarray,
                    origin: np.ndarray, near: float, cutoff: float):
    """Peak depth/opacity of chunk primitives against a pixel subset.

    Returns per (row, pixel): t, alpha, valid, plus the row-space tensors
    the gradient chain reuses (kernel value, offset at peak, and frames).
    """
    q = arrs.quats[ids]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    R = quat_to_rot(q)                           # (r, 3, 3)
    s = arrs.scales[ids]
    A = np.einsum("rab,rb,rcb->rac", R, 1.0 / s**2, R)
    b = arrs.centers[ids] - origin[None, :]      # (r, 3)

    Ad = np.einsum("rac,mc->rma", A, dirs)       # (r, m, 3)
    dAd = np.einsum("rma,ma->rm", Ad, dirs)
    bAd = np.einsum("ra,rma->rm", b, Ad)
    t = bAd / dAd
    diff = t[:, :, None] * dirs[None, :, :] - b[:, None, :]
    Adiff = np.einsum("rac,rmc->rma", A, diff)
    m2 = np.einsum("rma,rma->rm", diff, Adiff)
    kernel = np.exp(-0.5 * m2)
    alpha_raw = arrs.opacities[ids][:, None] * kernel
    clamped = alpha_raw >= ALPHA_MAX
    alpha = np.minimum(alpha_raw, ALPHA_MAX)
    valid = (t > near) & (alpha >= cutoff)
    return {
        "q": q, "R": R, "s": s, "t": t, "alpha": alpha, "valid": valid,
        "kernel": kernel, "clamped": clamped, "diff": diff, "Adiff": Adiff,
    }


def _emission(arrs: SceneArrays, ids: np.ndarray, Y: np.ndarray):
    """Clamped emission (r, m, 3) and its positivity mask."""
    raw = np.einsum("rck,mk->rmc", arrs.sh[ids], Y)
    return np.maximum(raw, 0.0), raw > 0.0


def _forward_sweep(arrs: SceneArrays, dirs: np.ndarray, origin: np.ndarray,
                   model: TransmittanceModel, background: np.ndarray,
                   max_splats: int, cutoff: float, near: float,
                   chunks: list[np.ndarray]):
    m = dirs.shape[0]
    cum = np.zeros(m)
    tau = np.zeros(m)
    prod = np.ones(m)
    count = np.zeros(m, dtype=np.int64)
    rad = np.zeros((m, 3))
    sat = np.zeros(m, dtype=bool)
    e_k = np.broadcast_to(background, (m, 3)).copy()
    t_k = np.zeros(m)
    sum_ea = np.zeros((m, 3))  # over splats after the first, ahead of saturation
    sum_a = np.zeros(m)

    for ids in chunks:
        active = np.nonzero(~sat & (count < max_splats))[0]
        if active.size == 0:
            break
        sub = dirs[active]
        geo = _chunk_geometry(arrs, ids, sub, origin, near, cutoff)
        Y = _sh_basis(sub, arrs.sh.shape[2])
        E, _ = _emission(arrs, ids, Y)
        order = np.argsort(np.where(geo["valid"], geo["t"], np.inf), axis=0, kind="stable")
        alpha_s = np.take_along_axis(geo["alpha"], order, 0)
        valid_s = np.take_along_axis(geo["valid"], order, 0)
        E_s = np.take_along_axis(E, order[:, :, None], 0)

        cum_s, tau_s, prod_s = cum[active], tau[active], prod[active]
        count_s, rad_s, sat_s = count[active], rad[active], sat[active]
        ek_s, tk_s = e_k[active], t_k[active]
        sea_s, sa_s = sum_ea[active], sum_a[active]

        for slot in range(len(ids)):
            a = alpha_s[slot]
            e = E_s[slot]
            live = valid_s[slot] & ~sat_s & (count_s < max_splats)
            if not live.any():
                continue
            w_raw = np.asarray(discrete_extinction(model, a, tau_s, prod_s))
            sat_now = live & (cum_s + w_raw >= 1.0)
            go = live & ~sat_now
            w = np.where(sat_now, 1.0 - cum_s, np.where(go, w_raw, 0.0))
            rad_s += w[:, None] * e
            not_first = count_s >= 1
            count_s = count_s + live
            add = np.where(go, a, 0.0)
            keep = go & not_first
            sea_s += np.where(keep[:, None], add[:, None] * e, 0.0)
            sa_s += np.where(keep, add, 0.0)
            cum_s += np.where(go, w, 0.0)
            tau_s += add
            prod_s *= 1.0 - add
            ek_s = np.where(sat_now[:, None], e, ek_s)
            tk_s = np.where(sat_now, w, tk_s)
            sat_s |= sat_now

        cum[active], tau[active], prod[active] = cum_s, tau_s, prod_s
        count[active], rad[active], sat[active] = count_s, rad_s, sat_s
        e_k[active], t_k[active] = ek_s, tk_s
        sum_ea[active], sum_a[active] = sea_s, sa_s

    residual = np.where(sat, 0.0, 1.0 - cum)
    rad += background[None, :] * residual[:, None]
    t_k = np.where(sat, t_k, residual)
    theta0 = sum_ea - e_k * sum_a[:, None]
    return {
        "rad": rad, "residual": residual, "overdraw": count, "sat": sat,
        "e_k": e_k, "t_k": t_k, "theta0": theta0,
    }


def _backward_sweep(arrs: SceneArrays, dirs: np.ndarray, origin: np.ndarray,
                    model: TransmittanceModel, background: np.ndarray,
                    max_splats: int, cutoff: float, near: float,
                    chunks: list[np.ndarray], cache: dict, seed: np.ndarray):
    """Replay the forward traversal, reading closed-form adjoints.

    ``seed`` is d(loss)/d(pixel radiance), (M, 3).  Returns per-parameter
    gradient arrays shaped like the scene arrays.
    """
    variant = model.variant
    if variant not in ("linear", "quadratic", "exponential"):
        raise ValueError(f"no analytic backward pass for {model.describe()}")
    c = model.param if variant == "quadratic" else 0.0

    P = len(arrs)
    g = {
        "centers": np.zeros((P, 3)),
        "scales": np.zeros((P, 3)),
        "quats": np.zeros((P, 4)),
        "opacities": np.zeros(P),
        "sh": np.zeros_like(arrs.sh),
    }
    m = dirs.shape[0]
    cum = np.zeros(m)
    tau = np.zeros(m)
    prod = np.ones(m)
    count = np.zeros(m, dtype=np.int64)
    sat = np.zeros(m, dtype=bool)
    s_theta = np.zeros((m, 3))
    L = cache["rad"].copy()
    trans = np.ones(m)
    e_k = cache["e_k"]
    theta0 = cache["theta0"]

    for ids in chunks:
        active = np.nonzero(~sat & (count < max_splats))[0]
        if active.size == 0:
            break
        sub = dirs[active]
        geo = _chunk_geometry(arrs, ids, sub, origin, near, cutoff)
        Y = _sh_basis(sub, arrs.sh.shape[2])
        E, E_pos = _emission(arrs, ids, Y)
        order = np.argsort(np.where(geo["valid"], geo["t"], np.inf), axis=0, kind="stable")
        alpha_s = np.take_along_axis(geo["alpha"], order, 0)
        valid_s = np.take_along_axis(geo["valid"], order, 0)
        E_s = np.take_along_axis(E, order[:, :, None], 0)

        cum_s, tau_s, prod_s = cum[active], tau[active], prod[active]
        count_s, sat_s = count[active], sat[active]
        st_s, L_s, tr_s = s_theta[active], L[active], trans[active]
        ek_s, th0_s = e_k[active], theta0[active]
        seed_s = seed[active]

        n_rows = len(ids)
        d_alpha_rows = np.zeros((n_rows, active.size))
        d_em_rows = np.zeros((n_rows, active.size, 3))

        for slot in range(n_rows):
            a = alpha_s[slot]
            e = E_s[slot]
            live = valid_s[slot] & ~sat_s & (count_s < max_splats)
            if not live.any():
                continue
            w_raw = np.asarray(discrete_extinction(model, a, tau_s, prod_s))
            sat_now = live & (cum_s + w_raw >= 1.0)
            go = live & ~sat_now
            w = np.where(sat_now, 1.0 - cum_s, np.where(go, w_raw, 0.0))

            not_first = count_s >= 1
            if variant == "quadratic":
                upd = go & not_first
                st_s += np.where(upd[:, None], (e - ek_s) * a[:, None], 0.0)

            d_em = np.zeros((active.size, 3))
            d_al = np.zeros(active.size)
            if variant == "linear":
                d_em[go] = seed_s[go] * a[go, None]
                d_al[go] = np.einsum("mc,mc->m", seed_s[go], e[go] - ek_s[go])
            elif variant == "quadratic":
                ramp = 1.0 + c * tau_s
                d_em[go] = seed_s[go] * (a[go] * ramp[go])[:, None]
                theta_i = th0_s - st_s
                d_al[go] = np.einsum(
                    "mc,mc->m", seed_s[go],
                    (e[go] - ek_s[go]) * ramp[go, None] + c * theta_i[go])
            else:  # exponential
                # alpha is capped at ALPHA_MAX upstream, so 1 - a >= 1e-6
                d_em[go] = seed_s[go] * (tr_s[go] * a[go])[:, None]
                L_next = (L_s - e * a[:, None]) / (1.0 - a[:, None])
                d_al[go] = np.einsum("mc,mc->m", seed_s[go],
                                     tr_s[go, None] * (e[go] - L_next[go]))
                L_s = np.where(go[:, None], L_next, L_s)
                tr_s *= np.where(go, 1.0 - a, 1.0)
            # the saturating splat only moves the loss through its emission
            d_em[sat_now] = seed_s[sat_now] * w[sat_now, None]

            np.put_along_axis(d_alpha_rows, order[slot][None, :], d_al[None, :], 0)
            np.put_along_axis(d_em_rows, order[slot][None, :, None], d_em[None, :, :], 0)

            count_s = count_s + live
            add = np.where(go, a, 0.0)
            cum_s += np.where(go, w, 0.0)
            tau_s += add
            prod_s *= 1.0 - add
            sat_s |= sat_now

        # chain row-space gradients to the primitive parameters
        d_alpha_rows = np.where(geo["clamped"], 0.0, d_alpha_rows)
        alpha_r = geo["alpha"]
        da = d_alpha_rows * alpha_r  # d(loss)/d(-0.5 m2) per row/pixel
        g["opacities"][ids] += np.einsum("rm,rm->r", d_alpha_rows, geo["kernel"])
        g["centers"][ids] += np.einsum("rm,rma->ra", da, geo["Adiff"])
        u = np.einsum("rba,rmb->rma", geo["R"], geo["diff"])
        us2 = u / geo["s"][:, None, :] ** 2
        g["scales"][ids] += np.einsum("rm,rma->ra", da, u * us2 / geo["s"][:, None, :])
        J = quat_rot_jacobian(geo["q"])  # (r, 4, 3, 3)
        dm2_dq = 2.0 * np.einsum("rqab,rma,rmb->rmq", J, geo["diff"], us2)
        dq_unit = np.einsum("rm,rmq->rq", -0.5 * da, dm2_dq)
        qn = geo["q"]
        g["quats"][ids] += dq_unit - qn * np.einsum("rq,rq->r", qn, dq_unit)[:, None]
        d_em_eff = np.where(E_pos, d_em_rows, 0.0)
        g["sh"][ids] += np.einsum("rmc,mk->rck", d_em_eff, Y)

        cum[active], tau[active], prod[active] = cum_s, tau_s, prod_s
        count[active], sat[active] = count_s, sat_s
        s_theta[active], L[active], trans[active] = st_s, L_s, tr_s

    return g


def _depth_chunks(arrs: SceneArrays, camera: Camera, chunk_size: int | None):
    """Primitive index chunks in approximate front-to-back order."""
    n = len(arrs)
    if chunk_size is None or chunk_size >= n:
        return [np.arange(n)]
    forward = camera.rotation[:, 2]
    depth = (arrs.centers - camera.position) @ forward
    order = np.argsort(depth, kind="stable")
    return [order[i:i + chunk_size] for i in range(0, n, chunk_size)]


def render(scene, camera: Camera, model: TransmittanceModel, background,
           *, max_splats: int = 128, alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF,
           near: float = NEAR_PLANE, chunk_size: int | None = None,
           threads: int = 1) -> RenderResult:
    """Render the scene: radiance, overdraw, and residual transmittance.

    The default single-chunk traversal sorts all surviving splats per pixel
    and is exact; a finite ``chunk_size`` orders primitives by center depth
    across chunks (exact within each), trading a little ordering fidelity
    for early-termination savings on dense scenes.  Output is identical for
    any ``threads`` value: bands of rows are computed independently.
    """
    arrs = scene if isinstance(scene, SceneArrays) else SceneArrays.from_primitives(scene)
    background = np.asarray(background, dtype=np.float64)
    h, w = camera.height, camera.width
    if len(arrs) == 0:
        return RenderResult(
            rgb=np.broadcast_to(background, (h, w, 3)).copy(),
            overdraw=np.zeros((h, w), dtype=np.int64),
            residual=np.ones((h, w)),
        )
    dirs = camera.pixel_directions()
    chunks = _depth_chunks(arrs, camera, chunk_size)

    def run_band(rows):
        band = dirs[rows].reshape(-1, 3)
        out = _forward_sweep(arrs, band, camera.position, model, background,
                             max_splats, alpha_cutoff, near, chunks)
        nr = len(rows)
        return (out["rad"].reshape(nr, w, 3),
                out["overdraw"].reshape(nr, w),
                out["residual"].reshape(nr, w))

    bands = np.array_split(np.arange(h), max(1, min(threads, h)))
    bands = [b for b in bands if len(b)]
    if len(bands) == 1:
        results = [run_band(bands[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            results = list(pool.map(run_band, bands))

    rgb = np.concatenate([r[0] for r in results], axis=0)
    overdraw = np.concatenate([r[1] for r in results], axis=0)
    residual = np.concatenate([r[2] for r in results], axis=0)
    return RenderResult(rgb, overdraw, residual)


def render_forward_cached(arrs: SceneArrays, camera: Camera,
                          model: TransmittanceModel, background,
                          *, max_splats: int = 128,
                          alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF,
                          near: float = NEAR_PLANE,
                          chunk_size: int | None = None):
    """Forward sweep that also returns the replay cache for the backward
    pass (per-pixel radiance, saturation emission, theta0)."""
    background = np.asarray(background, dtype=np.float64)
    dirs = camera.pixel_directions().reshape(-1, 3)
    chunks = _depth_chunks(arrs, camera, chunk_size)
    h, w = camera.height, camera.width
    fwd = _forward_sweep(arrs, dirs, camera.position, model, background,
                         max_splats, alpha_cutoff, near, chunks)
    result = RenderResult(fwd["rad"].reshape(h, w, 3),
                          fwd["overdraw"].reshape(h, w),
                          fwd["residual"].reshape(h, w))
    return result, fwd


def render_backward(arrs: SceneArrays, camera: Camera,
                    model: TransmittanceModel, background,
                    cache: dict, seed_image: np.ndarray,
                    *, max_splats: int = 128,
                    alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF,
                    near: float = NEAR_PLANE,
                    chunk_size: int | None = None) -> dict:
    """Parameter gradients for an adjoint seed, replaying the traversal
    that produced ``cache``.  Settings must match the forward call."""
    background = np.asarray(background, dtype=np.float64)
    dirs = camera.pixel_directions().reshape(-1, 3)
    chunks = _depth_chunks(arrs, camera, chunk_size)
    return _backward_sweep(arrs, dirs, camera.position, model, background,
                           max_splats, alpha_cutoff, near, chunks, cache,
                           seed_image.reshape(-1, 3))


def render_with_gradients(arrs: SceneArrays, camera: Camera,
                          model: TransmittanceModel, background,
                          seed_image: np.ndarray,
                          *, max_splats: int = 128,
                          alpha_cutoff: float = DEFAULT_ALPHA_CUTOFF,
                          near: float = NEAR_PLANE,
                          chunk_size: int | None = None):
    """Forward render plus parameter gradients for a given adjoint seed.

    ``seed_image`` is d(loss)/d(linear radiance), (H, W, 3).  Returns
    (RenderResult, grads dict keyed like SceneArrays fields).
    """
    result, cache = render_forward_cached(
        arrs, camera, model, background, max_splats=max_splats,
        alpha_cutoff=alpha_cutoff, near=near, chunk_size=chunk_size)
    grads = render_backward(
        arrs, camera, model, background, cache, seed_image,
        max_splats=max_splats, alpha_cutoff=alpha_cutoff, near=near,
        chunk_size=chunk_size)
    return result, grads
