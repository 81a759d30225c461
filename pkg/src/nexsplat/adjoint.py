"""Analytic backward passes for the compositing model.

Gradients are produced in path-replay style: a second front-to-back sweep
over the ray carries O(1) state (running optical depth, transmittance, the
suffix emission sum, and the reconstructed downstream radiance) instead of
storing a per-splat tape.  The forward pass caches the two quantities the
replay cannot rebuild on its own: the saturating splat's emission and the
initial suffix sum theta0.

Closed forms per model, for splats ahead of the saturating index k:
  linear       dL/dalpha_i = seed . (E_i - E_k)
  quadratic    dL/dalpha_i = seed . [(E_i - E_k)(1 + c tau_i) + c Theta_i]
  exponential  dL/dalpha_i = seed . T_i (E_i - L_{i+1})
with dL/dE_i = seed * alpha_i (times (1 + c tau_i) for quadratic, times
T_i for exponential) and, when a splat saturates, dL/dE_k = seed * T_k.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compositor import (
    ALPHA_MAX,
    CompositeResult,
    SplatSample,
    composite_batch,
    composite_forward,
)
from .transmittance import TransmittanceModel, discrete_extinction

_ANALYTIC_VARIANTS = ("linear", "quadratic", "exponential")

__all__ = [
    "AdjointCarry",
    "SplatGradients",
    "UnsupportedModelError",
    "backward_linear",
    "backward_quadratic",
    "backward_exponential",
    "analytic_backward",
    "finite_diff_gradients",
    "gradient_check",
]


class UnsupportedModelError(ValueError):
    """Raised when no analytic backward pass exists for a model."""


@dataclass
class AdjointCarry:
    """State threaded through one backward replay of a ray."""

    tau_bar: float
    T_bar: float
    theta: np.ndarray
    e_k: np.ndarray
    L_next: np.ndarray
    exp_prod: float


@dataclass
class SplatGradients:
    """Per-splat gradients of a scalar loss seeded with d(loss)/d(radiance).

    ``d_alpha`` is the seed-contracted scalar per splat; ``d_emission``
    keeps one value per channel.  Splats past the saturating index carry
    exactly zero.
    """

    d_alpha: np.ndarray
    d_emission: np.ndarray


def _unpack(samples):
    n = len(samples)
    alpha = np.array([s.alpha for s in samples], dtype=np.float64)
    emission = np.array([s.emission for s in samples], dtype=np.float64).reshape(n, 3)
    return n, alpha, emission


def _k0(forward: CompositeResult, n: int) -> int:
    return forward.k - 1 if forward.k is not None else n


def _check_weights(forward: CompositeResult, expected: np.ndarray, k0: int, model: str):
    if not np.allclose(forward.weights[:k0], expected[:k0], rtol=1e-9, atol=1e-12):
        raise ValueError(f"forward result was not produced by the {model} model")


def backward_linear(samples, forward: CompositeResult, seed,
                    return_carry: bool = False):
    """Adjoint of the linear model: delta L_i = d(E_i a_i) - E_k da_i + delta L_{i+1}."""
    seed = np.asarray(seed, dtype=np.float64)
    n, alpha, emission = _unpack(samples)
    k0 = _k0(forward, n)
    _check_weights(forward, alpha, k0, "linear")

    d_alpha = np.zeros(n)
    d_emission = np.zeros((n, 3))
    carry = AdjointCarry(0.0, 1.0, forward.theta0.copy(), forward.e_k.copy(),
                         forward.radiance.copy(), 1.0)
    for i in range(k0):
        if i >= 1:
            carry.theta -= (emission[i] - carry.e_k) * alpha[i]
        d_emission[i] = seed * alpha[i]
        d_alpha[i] = seed @ (emission[i] - carry.e_k)
        carry.tau_bar += alpha[i]
        carry.T_bar -= forward.weights[i]
        carry.exp_prod *= 1.0 - alpha[i]
    if k0 < n:
        d_emission[k0] = seed * forward.t_k
    grads = SplatGradients(d_alpha, d_emission)
    return (grads, carry) if return_carry else grads


def backward_quadratic(c: float, samples, forward: CompositeResult, seed,
                       return_carry: bool = False):
    """Adjoint of the quadratic model, including the Theta suffix recursion."""
    if c < -0.5:
        raise ValueError(f"quadratic curvature must be >= -0.5, got {c}")
    seed = np.asarray(seed, dtype=np.float64)
    n, alpha, emission = _unpack(samples)
    k0 = _k0(forward, n)
    tau_before = np.concatenate([[0.0], np.cumsum(alpha)[:-1]])
    _check_weights(forward, alpha * (1.0 + c * tau_before), k0, "quadratic")

    d_alpha = np.zeros(n)
    d_emission = np.zeros((n, 3))
    carry = AdjointCarry(0.0, 1.0, forward.theta0.copy(), forward.e_k.copy(),
                         forward.radiance.copy(), 1.0)
    for i in range(k0):
        if i >= 1:
            carry.theta -= (emission[i] - carry.e_k) * alpha[i]
        ramp = 1.0 + c * carry.tau_bar
        d_emission[i] = seed * (alpha[i] * ramp)
        d_alpha[i] = seed @ ((emission[i] - carry.e_k) * ramp + c * carry.theta)
        carry.tau_bar += alpha[i]
        carry.T_bar -= forward.weights[i]
        carry.exp_prod *= 1.0 - alpha[i]
    if k0 < n:
        d_emission[k0] = seed * forward.t_k
    grads = SplatGradients(d_alpha, d_emission)
    return (grads, carry) if return_carry else grads


def backward_exponential(samples, forward: CompositeResult, seed,
                         return_carry: bool = False):
    """Adjoint of the exponential model via radiance replay.

    Reconstructs L_{i+1} = (L_i - E_i a_i) / (1 - a_i) while sweeping, so
    nothing but the forward radiance needs to be stored.
    """
    seed = np.asarray(seed, dtype=np.float64)
    n, alpha, emission = _unpack(samples)
    if np.any(alpha >= ALPHA_MAX):
        raise ValueError("replay singularity: splat opacity at or above the cap")
    if forward.k is not None:
        raise ValueError("forward result was not produced by the exponential model")

    d_alpha = np.zeros(n)
    d_emission = np.zeros((n, 3))
    carry = AdjointCarry(0.0, 1.0, forward.theta0.copy(), forward.e_k.copy(),
                         forward.radiance.copy(), 1.0)
    L = forward.radiance.copy()
    trans = 1.0
    for i in range(n):
        d_emission[i] = seed * (trans * alpha[i])
        L_next = (L - emission[i] * alpha[i]) / (1.0 - alpha[i])
        d_alpha[i] = seed @ (trans * (emission[i] - L_next))
        L = L_next
        trans *= 1.0 - alpha[i]
        carry.tau_bar += alpha[i]
        carry.T_bar = trans
        carry.exp_prod = trans
        carry.L_next = L
    grads = SplatGradients(d_alpha, d_emission)
    return (grads, carry) if return_carry else grads


def analytic_backward(model: TransmittanceModel, samples, forward: CompositeResult,
                      seed) -> SplatGradients:
    """Dispatch to the analytic adjoint for the model, if one exists."""
    if model.variant == "linear":
        return backward_linear(samples, forward, seed)
    if model.variant == "quadratic":
        return backward_quadratic(model.param, samples, forward, seed)
    if model.variant == "exponential":
        return backward_exponential(samples, forward, seed)
    raise UnsupportedModelError(
        f"no analytic backward pass for {model.describe()}; use finite differences")


def finite_diff_gradients(model: TransmittanceModel, samples, background,
                          eps: float = 1e-5, seed=(1.0, 1.0, 1.0)) -> SplatGradients:
    """Central differences of the forward composite; the verification oracle.

    Compositing is channel-diagonal, so each splat needs one batched
    emission perturbation and one opacity perturbation (each two-sided).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    seed = np.asarray(seed, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    n, alpha, emission = _unpack(samples)
    if n == 0:
        return SplatGradients(np.zeros(0), np.zeros((0, 3)))

    rows = 4 * n  # [alpha+, alpha-, emission+, emission-] per splat
    alphas = np.tile(alpha, (rows, 1))
    emissions = np.tile(emission, (rows, 1, 1))
    r = np.arange(n)
    alphas[r, r] += eps
    alphas[n + r, r] -= eps
    emissions[2 * n + r, r, :] += eps
    emissions[3 * n + r, r, :] -= eps

    radiance = composite_batch(model, alphas, emissions, background)["radiance"]
    d_alpha_rgb = (radiance[:n] - radiance[n:2 * n]) / (2 * eps)
    d_em_diag = (radiance[2 * n:3 * n] - radiance[3 * n:]) / (2 * eps)
    return SplatGradients(d_alpha_rgb @ seed, d_em_diag * seed[None, :])


def _near_saturation_boundary(model, alpha, margin):
    """True when any unclamped partial weight sum sits within ``margin`` of 1."""
    tau_before = np.concatenate([[0.0], np.cumsum(alpha)[:-1]])
    prod_before = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    raw = np.asarray(discrete_extinction(model, alpha, tau_before, prod_before))
    partial = np.cumsum(raw)
    return bool(np.any(np.abs(partial - 1.0) < margin))


def gradient_check(model: TransmittanceModel, n_rays: int = 100, rng_seed: int = 0,
                   eps: float = 1e-5, boundary_margin: float = 1e-3):
    """Compare the analytic adjoint against finite differences on random rays.

    Rays with a splat within ``boundary_margin`` of the saturation clamp are
    skipped (the clamp is a kink).  For models without an analytic adjoint,
    the check degrades to finite-difference self-consistency at eps and
    eps/2.  Returns a dict with ``max_rel_err``, ``n_checked``, ``n_skipped``
    and ``mode``.
    """
    rng = np.random.default_rng(rng_seed)
    mode = "analytic-vs-fd" if model.variant in _ANALYTIC_VARIANTS else "fd-self-consistency"

    max_rel = 0.0
    checked = skipped = 0
    while checked < n_rays:
        n = int(rng.integers(2, 31))
        alpha = rng.uniform(0.01, 0.9, n)
        emission = rng.uniform(0.0, 1.0, (n, 3))
        background = rng.uniform(0.0, 1.0, 3)
        seed = rng.uniform(0.5, 1.5, 3)
        if _near_saturation_boundary(model, alpha, boundary_margin):
            skipped += 1
            if skipped > 50 * n_rays:
                raise RuntimeError("could not sample enough boundary-free rays")
            continue
        samples = [SplatSample(float(i), float(a), tuple(e))
                   for i, (a, e) in enumerate(zip(alpha, emission))]
        fd = finite_diff_gradients(model, samples, background, eps=eps, seed=seed)
        if mode == "analytic-vs-fd":
            fwd = composite_forward(model, samples, background)
            other = analytic_backward(model, samples, fwd, seed)
        else:
            other = finite_diff_gradients(model, samples, background, eps=eps / 2, seed=seed)
        for got, ref in ((other.d_alpha, fd.d_alpha), (other.d_emission, fd.d_emission)):
            scale = np.maximum(np.maximum(np.abs(got), np.abs(ref)), 1e-3)
            max_rel = max(max_rel, float(np.max(np.abs(got - ref) / scale)))
        checked += 1
    return {"max_rel_err": max_rel, "n_checked": checked, "n_skipped": skipped,
            "mode": mode, "model": model.describe()}
