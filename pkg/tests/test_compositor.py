"""Compositing tests: worked two-splat cases, conservation, convergence to
the continuous transmittance, and the stochastic estimator."""
import numpy as np
import pytest

from nexsplat.compositor import (
    ALPHA_MAX,
    SplatSample,
    composite_classic,
    composite_forward,
    overdraw_map,
    russian_roulette_estimate,
)
from nexsplat.transmittance import TransmittanceModel, eval_T

EXP = TransmittanceModel.exponential()
LIN = TransmittanceModel.linear()

MODELS = [
    EXP,
    LIN,
    TransmittanceModel.quadratic(-0.5),
    TransmittanceModel.quadratic(1.0),
    TransmittanceModel.blended(0.5),
    TransmittanceModel.vicini(0.5),
    TransmittanceModel.power_law(-1.0),
    TransmittanceModel.power_law(2.0),
    TransmittanceModel.softplus(10.0),
]
MODEL_IDS = [m.describe() for m in MODELS]

BLACK = np.zeros(3)


def ray(alphas, emissions=None):
    if emissions is None:
        emissions = [(1.0, 1.0, 1.0)] * len(alphas)
    return [SplatSample(float(i + 1), a, tuple(e)) for i, (a, e) in enumerate(zip(alphas, emissions))]


def random_ray(rng, n, alpha_max=0.95):
    alphas = rng.uniform(0.0, alpha_max, n)
    emissions = rng.uniform(0.0, 1.0, (n, 3))
    return ray(alphas, emissions)


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


def test_two_splats_exponential():
    res = composite_forward(EXP, ray([0.5, 0.5]), BLACK)
    np.testing.assert_allclose(res.radiance, 0.75, atol=1e-15)
    assert res.residual_T == 0.25
    assert res.overdraw == 2
    assert res.k is None


def test_two_splats_linear_saturates():
    res = composite_forward(LIN, ray([0.5, 0.5]), BLACK)
    np.testing.assert_allclose(res.radiance, 1.0, atol=1e-15)
    assert res.residual_T == 0.0
    assert res.overdraw == 2
    assert res.k == 2


def test_empty_ray_returns_background():
    bg = np.array([0.2, 0.3, 0.4])
    res = composite_forward(LIN, [], bg)
    np.testing.assert_array_equal(res.radiance, bg)
    assert res.residual_T == 1.0
    assert res.overdraw == 0
    assert res.k is None


def test_four_splats_linear_clamps_third():
    res = composite_forward(LIN, ray([0.4] * 4, [(1, 0, 0)] * 4), BLACK)
    np.testing.assert_allclose(res.weights, [0.4, 0.4, 0.2, 0.0], atol=1e-15)
    np.testing.assert_allclose(res.radiance, [1.0, 0.0, 0.0], atol=1e-15)
    assert res.k == 3
    assert res.overdraw == 3
    assert res.residual_T == 0.0
    # the adjoint cache: saturating splat keeps its clamped weight
    assert res.t_k == pytest.approx(0.2, abs=1e-15)
    np.testing.assert_allclose(res.e_k, [1, 0, 0])


def test_unsorted_ray_rejected():
    samples = [SplatSample(2.0, 0.1, (1, 1, 1)), SplatSample(1.0, 0.1, (1, 1, 1))]
    with pytest.raises(ValueError):
        composite_forward(LIN, samples, BLACK)


def test_too_many_samples_rejected():
    with pytest.raises(ValueError):
        composite_forward(LIN, ray([0.001] * 129), BLACK)


def test_sample_validation():
    with pytest.raises(ValueError):
        SplatSample(1.0, 1.0, (1, 1, 1))  # above the opacity cap
    with pytest.raises(ValueError):
        SplatSample(1.0, -0.1, (1, 1, 1))
    with pytest.raises(ValueError):
        SplatSample(1.0, 0.5, (1, -1, 1))


# ---------------------------------------------------------------------------
# classic blender as oracle for the exponential model
# ---------------------------------------------------------------------------


def test_classic_two_splats():
    np.testing.assert_allclose(composite_classic(ray([0.5, 0.5]), BLACK), 0.75, atol=1e-15)


def test_classic_opaque_splat():
    got = composite_classic([SplatSample(1.0, ALPHA_MAX, (1, 1, 1))], BLACK)
    np.testing.assert_allclose(got, 1.0, atol=1e-5)


def test_forward_exponential_matches_classic():
    rng = np.random.default_rng(11)
    for _ in range(50):
        samples = random_ray(rng, int(rng.integers(1, 11)))
        bg = rng.uniform(0, 1, 3)
        res = composite_forward(EXP, samples, bg)
        np.testing.assert_allclose(res.radiance, composite_classic(samples, bg), atol=1e-12)
        assert res.k is None  # exponential never saturates below full opacity


# ---------------------------------------------------------------------------
# conservation and convergence
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("model", MODELS, ids=MODEL_IDS)
def test_weights_plus_residual_is_one(model):
    rng = np.random.default_rng(5)
    for _ in range(40):
        samples = random_ray(rng, int(rng.integers(1, 65)))
        res = composite_forward(model, samples, BLACK)
        assert abs(res.weights.sum() + res.residual_T - 1.0) <= 1e-12
        assert np.all(res.weights >= 0.0)
        if res.k is not None:
            assert res.residual_T == 0.0
            assert np.all(res.weights[res.k:] == 0.0)


@pytest.mark.parametrize("model", MODELS, ids=MODEL_IDS)
def test_discrete_transmittance_converges(model):
    # M equal splats of opacity tau*/M reproduce T(tau*) to first order
    tau_star = 0.8
    for m in (10, 100, 1000):
        samples = ray([tau_star / m] * m)
        res = composite_forward(model, samples, BLACK, max_n=m)
        assert abs(res.residual_T - eval_T(model, tau_star)) <= 5.0 / m


# ---------------------------------------------------------------------------
# stochastic roulette estimator
# ---------------------------------------------------------------------------


def test_roulette_matches_forward_exponential():
    samples = ray([0.5, 0.5])
    mean, se = russian_roulette_estimate(EXP, samples, rng_seed=42, n_trials=100_000)
    assert np.all(np.abs(mean - 0.75) <= 3 * se)
    assert np.all(se > 0)


def test_roulette_matches_forward_linear():
    samples = ray([0.4] * 4, [(1, 0, 0)] * 4)
    mean, se = russian_roulette_estimate(LIN, samples, rng_seed=42, n_trials=100_000)
    assert abs(mean[0] - 1.0) <= max(3 * se[0], 1e-12)
    # green/blue emissions are all zero, so those channels are exact
    np.testing.assert_allclose(mean[1:], 0.0, atol=1e-15)


def test_roulette_opaque_splat_zero_variance():
    # a splat at the opacity cap stops the walk with probability 1 - 1e-6;
    # the pinned seed never lands in that sliver over 100k trials
    samples = [SplatSample(1.0, ALPHA_MAX, (0.3, 0.6, 0.9))]
    mean, se = russian_roulette_estimate(LIN, samples, rng_seed=0, n_trials=100_000)
    np.testing.assert_array_equal(mean, [0.3, 0.6, 0.9])
    np.testing.assert_array_equal(se, 0.0)


@pytest.mark.parametrize("model", MODELS, ids=MODEL_IDS)
def test_roulette_unbiased(model):
    rng = np.random.default_rng(9)
    samples = random_ray(rng, 12)
    bg = np.array([0.1, 0.2, 0.3])
    det = composite_forward(model, samples, bg).radiance
    mean, se = russian_roulette_estimate(model, samples, rng_seed=7, n_trials=50_000, background=bg)
    assert np.all(np.abs(mean - det) <= 3 * np.maximum(se, 1e-12))


def test_roulette_ratio_depends_on_order_except_exponential():
    # the per-splat stop ratio weight_i / transmittance_before_i is local
    # (= alpha_i) only for the exponential model; any other model needs the
    # sorted prefix, so reordering the same splats changes the ratios
    alphas = [0.3, 0.2, 0.4]

    def stop_ratios(model, a):
        res = composite_forward(model, ray(a), BLACK)
        before = 1.0 - np.concatenate([[0.0], np.cumsum(res.weights)[:-1]])
        return res.weights / before

    fwd = stop_ratios(EXP, alphas)
    rev = stop_ratios(EXP, alphas[::-1])
    np.testing.assert_allclose(fwd, alphas, atol=1e-12)
    np.testing.assert_allclose(rev, alphas[::-1], atol=1e-12)

    lin_fwd = stop_ratios(LIN, alphas)
    lin_rev = stop_ratios(LIN, alphas[::-1])
    assert not np.allclose(lin_fwd, alphas, atol=1e-3)
    assert not np.allclose(np.sort(lin_fwd), np.sort(lin_rev), atol=1e-3)


# ---------------------------------------------------------------------------
# overdraw accounting
# ---------------------------------------------------------------------------


def test_overdraw_map_counts():
    empty = composite_forward(LIN, [], BLACK)
    two = composite_forward(LIN, ray([0.5, 0.5]), BLACK)
    grid = [[empty, two], [two, empty]]
    np.testing.assert_array_equal(overdraw_map(grid), [[0, 2], [2, 0]])


def test_tiny_weights_still_count_as_overdraw():
    res = composite_forward(EXP, ray([1e-14, 1e-14, 0.5]), BLACK)
    assert res.overdraw == 3
