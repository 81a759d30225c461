"""Front-to-back compositing of sorted splat samples.

The forward model accumulates per-splat extinction weights under a chosen
transmittance model, clamps the weight of the splat that saturates the
cumulative extinction to one (stopping there), and adds the background
through the residual transmittance.  A classic multiplicative blender and
a stochastic roulette estimator are provided as independent references.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .transmittance import TransmittanceModel, discrete_extinction

__all__ = [
    "ALPHA_EPS",
    "ALPHA_MAX",
    "SplatSample",
    "CompositeResult",
    "composite_forward",
    "composite_classic",
    "composite_batch",
    "russian_roulette_estimate",
    "overdraw_map",
]

# Opacity headroom below one; keeps the exponential replay division finite.
ALPHA_EPS = 1e-6
ALPHA_MAX = 1.0 - ALPHA_EPS

DEFAULT_MAX_SAMPLES = 128


@dataclass(frozen=True)
class SplatSample:
    """One sorted per-ray contribution: depth, opacity, emitted radiance."""

    depth: float
    alpha: float
    emission: tuple[float, float, float]

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= ALPHA_MAX:
            raise ValueError(f"alpha must be in [0, {ALPHA_MAX}], got {self.alpha}")
        if any(e < 0.0 for e in self.emission):
            raise ValueError(f"emission must be nonnegative, got {self.emission}")


@dataclass
class CompositeResult:
    """Per-ray compositing output plus the state the backward pass replays.

    ``k`` is the 1-based index of the saturating splat, or None if the ray
    never saturated.  ``theta0`` and ``e_k`` seed the quadratic adjoint:
    theta0 sums (E_j - E_k) * alpha_j over splats after the first and ahead
    of saturation, and e_k is the saturating splat's emission (the
    background when nothing saturated).
    """

    radiance: np.ndarray
    residual_T: float
    overdraw: int
    k: int | None
    theta0: np.ndarray
    e_k: np.ndarray
    weights: np.ndarray = field(repr=False)
    t_k: float = 0.0  # clamped weight of the saturating splat (residual if none)


def _samples_to_arrays(samples):
    n = len(samples)
    t = np.empty(n)
    alpha = np.empty(n)
    emission = np.empty((n, 3))
    for i, s in enumerate(samples):
        t[i] = s.depth
        alpha[i] = s.alpha
        emission[i] = s.emission
    return t, alpha, emission


def composite_batch(
    model: TransmittanceModel,
    alpha: np.ndarray,
    emission: np.ndarray,
    background: np.ndarray,
    valid: np.ndarray | None = None,
):
    """Composite many rays at once.

    Args:
        alpha: (R, N) per-splat opacities, front to back.
        emission: (R, N, 3) emitted radiance.
        background: (3,) radiance behind the last splat.
        valid: (R, N) mask for rays shorter than N (padding must be False).

    Returns a dict of arrays: ``weights`` (R, N) clamped extinction weights,
    ``radiance`` (R, 3), ``residual`` (R,), ``k0`` (R,) 0-based saturation
    index (N when none), ``overdraw`` (R,), ``e_k`` (R, 3), ``theta0``
    (R, 3), ``t_k`` (R,).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    emission = np.asarray(emission, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    R, N = alpha.shape
    if N == 0:
        return {
            "weights": np.zeros((R, 0)),
            "radiance": np.broadcast_to(background, (R, 3)).copy(),
            "residual": np.ones(R),
            "k0": np.zeros(R, dtype=np.int64),
            "overdraw": np.zeros(R, dtype=np.int64),
            "e_k": np.broadcast_to(background, (R, 3)).copy(),
            "theta0": np.zeros((R, 3)),
            "t_k": np.ones(R),
        }
    if valid is None:
        valid = np.ones((R, N), dtype=bool)
    a = np.where(valid, alpha, 0.0)

    zeros = np.zeros((R, 1))
    cum_a = np.cumsum(a, axis=1)
    tau_before = np.concatenate([zeros, cum_a[:, :-1]], axis=1)
    prod = np.cumprod(1.0 - a, axis=1)
    prod_before = np.concatenate([np.ones((R, 1)), prod[:, :-1]], axis=1)

    raw = np.asarray(discrete_extinction(model, a, tau_before, prod_before))
    raw = np.where(valid, raw, 0.0)

    cum = np.cumsum(raw, axis=1)
    cum_before = np.concatenate([zeros, cum[:, :-1]], axis=1)
    sat = cum >= 1.0
    any_sat = sat.any(axis=1)
    k0 = np.where(any_sat, np.argmax(sat, axis=1), N)

    idx = np.arange(N)[None, :]
    pre = idx < k0[:, None]
    at = idx == k0[:, None]
    weights = np.where(pre, raw, np.where(at, 1.0 - cum_before, 0.0))

    residual = np.where(any_sat, 0.0, 1.0 - cum[:, -1])
    n_valid = valid.sum(axis=1)
    overdraw = np.where(any_sat, k0 + 1, n_valid)

    radiance = np.einsum("rn,rnc->rc", weights, emission)
    radiance += background[None, :] * residual[:, None]

    e_k = np.where(any_sat[:, None],
                   emission[np.arange(R), np.minimum(k0, N - 1)],
                   background[None, :])
    t_k = np.where(any_sat, np.take_along_axis(weights, np.minimum(k0, N - 1)[:, None], 1)[:, 0],
                   residual)

    tail = pre & (idx >= 1) & valid
    wa = np.where(tail, a, 0.0)
    sum_alpha = wa.sum(axis=1)
    sum_ea = np.einsum("rn,rnc->rc", wa, emission)
    theta0 = sum_ea - e_k * sum_alpha[:, None]

    return {
        "weights": weights,
        "radiance": radiance,
        "residual": residual,
        "k0": k0,
        "overdraw": overdraw,
        "e_k": e_k,
        "theta0": theta0,
        "t_k": t_k,
    }


def composite_forward(
    model: TransmittanceModel,
    samples,
    background,
    max_n: int = DEFAULT_MAX_SAMPLES,
) -> CompositeResult:
    """Composite one ray of depth-sorted samples under ``model``.

    The first splat whose cumulative extinction would reach or exceed one
    has its weight clamped to the remaining budget; later splats are never
    evaluated (early termination) and the residual transmittance is exactly
    zero.  Without saturation the background enters through the residual.
    """
    background = np.asarray(background, dtype=np.float64)
    n = len(samples)
    if n > max_n:
        raise ValueError(f"ray carries {n} samples, more than the configured {max_n}")
    if n == 0:
        return CompositeResult(
            radiance=background.copy(),
            residual_T=1.0,
            overdraw=0,
            k=None,
            theta0=np.zeros(3),
            e_k=background.copy(),
            weights=np.zeros(0),
            t_k=1.0,
        )
    t, alpha, emission = _samples_to_arrays(samples)
    if __debug__ and np.any(np.diff(t) < 0):
        raise ValueError("samples must be sorted by nondecreasing depth")

    out = composite_batch(model, alpha[None, :], emission[None, :, :], background)
    k0 = int(out["k0"][0])
    return CompositeResult(
        radiance=out["radiance"][0],
        residual_T=float(out["residual"][0]),
        overdraw=int(out["overdraw"][0]),
        k=(k0 + 1) if k0 < n else None,
        theta0=out["theta0"][0],
        e_k=out["e_k"][0],
        weights=out["weights"][0],
        t_k=float(out["t_k"][0]),
    )


def composite_classic(samples, background) -> np.ndarray:
    """Multiplicative alpha blending; the reference the exponential model
    must reproduce exactly."""
    background = np.asarray(background, dtype=np.float64)
    r = g = b = 0.0
    trans = 1.0
    for s in samples:
        w = s.alpha * trans
        er, eg, eb = s.emission
        r += er * w
        g += eg * w
        b += eb * w
        trans *= 1.0 - s.alpha
    return np.array([r, g, b]) + background * trans


def russian_roulette_estimate(
    model: TransmittanceModel,
    samples,
    rng_seed: int,
    n_trials: int,
    background=(0.0, 0.0, 0.0),
):
    """Stochastic estimate of the composited radiance.

    Each trial walks the sorted splats front to back, stopping at splat i
    with the roulette probability (weight_i / residual transmittance before
    i) and falling through to the background otherwise.  The walk stops
    deterministically at a saturating splat, where that ratio reaches one.
    Sampling draws one uniform per trial and inverts the stop distribution
    the walk induces, which is the same process without the per-step coin
    flips.

    Returns (mean, standard_error), both (3,) arrays.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    background = np.asarray(background, dtype=np.float64)
    fwd = composite_forward(model, samples, background)
    n = len(samples)
    values = np.empty((n + 1, 3))
    for i, s in enumerate(samples):
        values[i] = s.emission
    values[n] = background
    cum = np.concatenate([np.cumsum(fwd.weights), [1.0]]) if n else np.array([1.0])

    rng = np.random.default_rng(rng_seed)
    u = rng.random(n_trials)
    stops = np.searchsorted(cum, u, side="right")
    counts = np.bincount(stops, minlength=n + 1).astype(np.float64)

    mean = counts @ values / n_trials
    second = counts @ (values * values) / n_trials
    var = np.maximum(second - mean * mean, 0.0)
    if n_trials > 1:
        var *= n_trials / (n_trials - 1)
    se = np.sqrt(var / n_trials)
    return mean, se


def overdraw_map(results) -> np.ndarray:
    """Per-pixel overdraw counts from a 2D grid of CompositeResults."""
    return np.array([[c.overdraw for c in row] for row in results], dtype=np.int64)
