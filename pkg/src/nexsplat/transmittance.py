"""Transmittance decay models for generalized splat compositing.

Each model is a mother transmittance function T(tau) over nonnegative
optical depth, together with its path-length density p(tau) = -dT/dtau
and the per-splat discrete extinction probability used when blending
sorted splats front to back.  All evaluators accept scalars or numpy
arrays and broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "TransmittanceModel",
    "eval_T",
    "eval_p",
    "discrete_extinction",
    "model_from_config",
    "model_to_config",
]

# Below |v| the power-law forms are evaluated as their exponential limit;
# the direct formula divides by v and loses all precision there.
_POWER_LAW_V_EPS = 1e-4
# Minimum softplus sharpness: below this the smooth ramp misses T(0)=1 and
# p(0)=1 by more than ~1e-4 and stops being a usable linear surrogate.
_MIN_KAPPA = 10.0

_VARIANTS = (
    "exponential",
    "linear",
    "quadratic",
    "blended",
    "vicini",
    "power_law",
    "softplus",
)

# JSON parameter key per variant (empty string = parameterless).
_PARAM_KEY = {
    "exponential": "",
    "linear": "",
    "quadratic": "c",
    "blended": "gamma",
    "vicini": "gamma",
    "power_law": "v",
    "softplus": "kappa",
}


@dataclass(frozen=True)
class TransmittanceModel:
    """A tagged transmittance variant plus its single shape parameter.

    Use the classmethod constructors; they validate the parameter domain
    once at construction so the evaluators can stay validation-free in
    hot loops.
    """

    variant: str
    param: float = 0.0

    def __post_init__(self) -> None:
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown transmittance variant: {self.variant!r}")
        p = self.param
        if not np.isfinite(p):
            raise ValueError(f"{self.variant}: parameter must be finite, got {p!r}")
        if self.variant == "quadratic" and p < -0.5:
            raise ValueError(f"quadratic curvature must be >= -0.5, got {p}")
        if self.variant in ("blended", "vicini") and not (0.0 <= p <= 1.0):
            raise ValueError(f"{self.variant} mix weight must be in [0, 1], got {p}")
        if self.variant == "power_law" and p < -1.0:
            raise ValueError(f"power-law exponent must be >= -1, got {p}")
        if self.variant == "softplus" and p < _MIN_KAPPA:
            raise ValueError(f"softplus sharpness must be >= {_MIN_KAPPA}, got {p}")

    @classmethod
    def exponential(cls) -> "TransmittanceModel":
        return cls("exponential")

    @classmethod
    def linear(cls) -> "TransmittanceModel":
        return cls("linear")

    @classmethod
    def quadratic(cls, c: float) -> "TransmittanceModel":
        return cls("quadratic", float(c))

    @classmethod
    def blended(cls, gamma: float) -> "TransmittanceModel":
        """Lerp of linear and exponential decay, clamped after mixing."""
        return cls("blended", float(gamma))

    @classmethod
    def vicini(cls, gamma: float) -> "TransmittanceModel":
        """Lerp of linear and exponential decay, linear branch clamped first."""
        return cls("vicini", float(gamma))

    @classmethod
    def power_law(cls, v: float) -> "TransmittanceModel":
        return cls("power_law", float(v))

    @classmethod
    def softplus(cls, kappa: float) -> "TransmittanceModel":
        return cls("softplus", float(kappa))

    def describe(self) -> str:
        key = _PARAM_KEY[self.variant]
        if not key:
            return self.variant
        return f"{self.variant}({key}={self.param:g})"


def _softplus_fn(x):
    # log(1 + e^x), stable for both signs of x
    return np.logaddexp(0.0, x)


def _quadratic_tau_sat(c: float) -> float:
    # first root of 1 - t - (c/2) t^2, written without dividing by c
    return 2.0 / (1.0 + np.sqrt(1.0 + 2.0 * c))


def _ret(tau, out):
    if np.ndim(tau) == 0:
        return float(out)
    return out


def eval_T(model: TransmittanceModel, tau) -> float | np.ndarray:
    """Mother transmittance T(tau) with clamping at zero where it saturates.

    T(0) = 1 exactly for every variant; values stay in [0, 1].
    """
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("optical depth must be nonnegative")
    v = model.variant
    if v == "exponential":
        out = np.exp(-t)
    elif v == "linear":
        out = np.maximum(1.0 - t, 0.0)
    elif v == "quadratic":
        # zero from the first root onward: for c < 0 the parabola rises
        # again past it, which is not a transmittance
        out = np.where(t < _quadratic_tau_sat(model.param),
                       np.maximum(1.0 - t - 0.5 * model.param * t * t, 0.0),
                       0.0)
    elif v == "blended":
        g = model.param
        # 1 - [(1-g)*t + g*(1-e^-t)]; this form keeps T(0) = 1 exact.
        out = np.maximum(1.0 - ((1.0 - g) * t + g * (-np.expm1(-t))), 0.0)
    elif v == "vicini":
        g = model.param
        pre = 1.0 - ((1.0 - g) * t + g * (-np.expm1(-t)))
        post = g * np.exp(-t)
        out = np.maximum(np.where(t < 1.0, pre, post), 0.0)
    elif v == "power_law":
        w = model.param
        if w == -1.0:
            out = np.maximum(1.0 - t, 0.0)
        elif abs(w) < _POWER_LAW_V_EPS:
            out = np.exp(-t)
        else:
            base = 1.0 + t * w
            safe = np.where(base > 0.0, base, 1.0)
            out = np.where(base > 0.0, safe ** (-1.0 / w), 0.0)
    else:  # softplus
        k = model.param
        out = _softplus_fn(k * (1.0 - t)) / _softplus_fn(k)
    return _ret(tau, out)


def eval_p(model: TransmittanceModel, tau) -> float | np.ndarray:
    """Path-length density p(tau) = -dT/dtau; zero once T has saturated."""
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("optical depth must be nonnegative")
    v = model.variant
    if v == "exponential":
        out = np.exp(-t)
    elif v == "linear":
        out = np.where(t < 1.0, 1.0, 0.0)
    elif v == "quadratic":
        c = model.param
        out = np.where(t < _quadratic_tau_sat(c), 1.0 + c * t, 0.0)
    elif v == "blended":
        g = model.param
        alive = (1.0 - ((1.0 - g) * t + g * (-np.expm1(-t)))) > 0.0
        # 1 - g*(1 - e^-t) keeps p(0) = 1 exact.
        out = np.where(alive, 1.0 - g * (-np.expm1(-t)), 0.0)
    elif v == "vicini":
        g = model.param
        out = np.where(t < 1.0, 1.0 - g * (-np.expm1(-t)), g * np.exp(-t))
    elif v == "power_law":
        w = model.param
        if w == -1.0:
            out = np.where(t < 1.0, 1.0, 0.0)
        elif abs(w) < _POWER_LAW_V_EPS:
            out = np.exp(-t)
        else:
            base = 1.0 + t * w
            safe = np.where(base > 0.0, base, 1.0)
            out = np.where(base > 0.0, safe ** (-(1.0 + w) / w), 0.0)
    else:  # softplus
        k = model.param
        out = (k / _softplus_fn(k)) * expit(k * (1.0 - t))
    return _ret(tau, out)


def discrete_extinction(
    model: TransmittanceModel,
    alpha,
    tau_bar,
    exp_prod=1.0,
) -> float | np.ndarray:
    """Unclamped extinction probability of one splat ahead of saturation.

    Args:
        alpha: splat opacity at the pixel.
        tau_bar: accumulated opacity of the splats in front (sum of alphas).
        exp_prod: accumulated product of (1 - alpha) over the splats in
            front; only the exponential-flavoured variants consume it.

    The saturation clamp is the compositor's job; callers stream tau_bar
    and exp_prod so each evaluation stays O(1).
    """
    a = np.asarray(alpha, dtype=np.float64)
    tb = np.asarray(tau_bar, dtype=np.float64)
    v = model.variant
    if v == "exponential":
        out = a * exp_prod
    elif v == "linear":
        out = a * np.ones_like(tb)
    elif v == "quadratic":
        out = a * (1.0 + model.param * tb)
    elif v == "blended":
        g = model.param
        # a * (1 - g + g*exp_prod) written so the first splat yields exactly a.
        out = a * (1.0 - g * (1.0 - np.asarray(exp_prod, dtype=np.float64)))
    elif v == "vicini":
        g = model.param
        lin = a
        exp = a * np.asarray(exp_prod, dtype=np.float64)
        out = lin + g * (exp - lin)
    elif v == "power_law":
        w = model.param
        if w == -1.0:
            out = a * np.ones_like(tb)
        elif abs(w) < _POWER_LAW_V_EPS:
            out = a * np.exp(-tb)
        else:
            base = 1.0 + tb * w
            safe = np.where(base > 0.0, base, 1.0)
            out = a * np.where(base > 0.0, safe ** (-(1.0 + w) / w), 0.0)
    else:  # softplus
        k = model.param
        out = a * (k / _softplus_fn(k)) * expit(k * (1.0 - tb))
    if np.ndim(alpha) == 0 and np.ndim(tau_bar) == 0 and np.ndim(exp_prod) == 0:
        return float(out)
    return out


def model_from_config(cfg: dict) -> TransmittanceModel:
    """Build a model from a ``{"model": tag, <param>: value}`` mapping."""
    if "model" not in cfg:
        raise ValueError("model config requires a 'model' tag")
    tag = str(cfg["model"]).lower().replace("-", "_")
    aliases = {"powerlaw": "power_law", "vicini_blend": "vicini", "exp": "exponential"}
    tag = aliases.get(tag, tag)
    if tag not in _VARIANTS:
        raise ValueError(f"unknown transmittance model tag: {cfg['model']!r}")
    key = _PARAM_KEY[tag]
    if not key:
        return TransmittanceModel(tag)
    if key not in cfg:
        raise ValueError(f"model {tag!r} requires parameter {key!r}")
    return TransmittanceModel(tag, float(cfg[key]))


def model_to_config(model: TransmittanceModel) -> dict:
    cfg: dict = {"model": model.variant}
    key = _PARAM_KEY[model.variant]
    if key:
        cfg[key] = model.param
    return cfg
