"""Gaussian splatting with a family of transmittance decay models.

Forward compositing generalizes multiplicative alpha blending to
arbitrary mother transmittance functions (linear, quadratic, blended,
power-law, softplus, and the exponential baseline), with saturation-aware
early termination, analytic path-replay adjoints for the linear,
quadratic, and exponential models, and a desk-scale inverse renderer.
"""
from .adjoint import (
    AdjointCarry,
    SplatGradients,
    UnsupportedModelError,
    analytic_backward,
    backward_exponential,
    backward_linear,
    backward_quadratic,
    finite_diff_gradients,
    gradient_check,
)
from .compositor import (
    ALPHA_EPS,
    ALPHA_MAX,
    CompositeResult,
    SplatSample,
    composite_classic,
    composite_forward,
    overdraw_map,
    russian_roulette_estimate,
)
from .optimizer import (
    TrainConfig,
    TrainReport,
    bounded_adam_step,
    densify_and_prune,
    loss,
    mse,
    psnr,
    ssim,
    train,
)
from .primitives import (
    Camera,
    GaussianPrimitive,
    Ray,
    eval_sh,
    gather_sorted,
    load_camera,
    load_scene,
    peak_along_ray,
    save_camera,
    save_scene,
)
from .render import RenderResult, SceneArrays, render, render_with_gradients
from .transmittance import (
    TransmittanceModel,
    discrete_extinction,
    eval_T,
    eval_p,
    model_from_config,
    model_to_config,
)

__version__ = "0.1.0"
