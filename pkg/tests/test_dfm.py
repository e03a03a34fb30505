import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densecast.dfm import (
    AGG_WEIGHTS,
    BridgeSpec,
    DfmSpec,
    WindowingError,
    aggregate_monthly,
    bridge_to_json,
    density_nowcast_dfm,
    dfm_to_json,
    filtered_factor,
    fit_bridge,
    fit_dfm,
    nowcast_mean,
    nowcast_variance,
)


def simulate_factor_panel(rng, T=600, loadings=(1.0, 0.8, 0.6, 0.4), a1=0.7,
                          idio_ar=0.3, idio_share=0.3):
    f = np.zeros(T)
    for t in range(1, T):
        f[t] = a1 * f[t - 1] + rng.normal()
    lam = np.asarray(loadings)
    u = np.zeros((T, lam.size))
    inn_sd = np.sqrt(idio_share * (1 - idio_ar**2))
    for t in range(1, T):
        u[t] = idio_ar * u[t - 1] + rng.normal(size=lam.size) * inn_sd
    x = np.outer(f, lam) + u
    x = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)
    return f, x


def test_fit_dfm_recovers_common_factor():
    rng = np.random.default_rng(0)
    f_true, panel = simulate_factor_panel(rng)
    spec = fit_dfm(panel)
    corr = np.corrcoef(spec.factor_scores, f_true)[0, 1]
    assert corr >= 0.95
    assert abs(spec.factor_ar[1]) < 0.3  # true process is AR(1)


def test_fit_dfm_sign_normalization():
    rng = np.random.default_rng(1)
    f_true, panel = simulate_factor_panel(rng, loadings=(-1.0, 0.8, 0.6, 0.4))
    spec = fit_dfm(panel)
    corr0 = np.corrcoef(spec.factor_scores, panel[:, 0])[0, 1]
    assert corr0 > 0
    assert spec.loadings[0] > 0


def test_fit_dfm_rejects_interior_gaps_allows_ragged_tail():
    rng = np.random.default_rng(2)
    _, panel = simulate_factor_panel(rng, T=200)
    ragged = panel.copy()
    ragged[-2:, 1] = np.nan
    spec = fit_dfm(ragged)
    assert spec.factor_scores.shape == (200,)
    bad = panel.copy()
    bad[50, 1] = np.nan
    with pytest.raises(ValueError, match="interior"):
        fit_dfm(bad)


def test_filtered_factor_extends_through_missing_tail():
    rng = np.random.default_rng(3)
    _, panel = simulate_factor_panel(rng, T=300)
    spec = fit_dfm(panel)
    padded = np.vstack([panel, np.full((3, panel.shape[1]), np.nan)])
    scores = filtered_factor(spec, padded)
    assert scores.shape == (303,)
    assert np.allclose(scores[:300], spec.factor_scores, atol=1e-10)
    # beyond the cutoff the factor follows its own AR recursion
    far = np.zeros(2)
    far[: spec.factor_order] = spec.factor_ar
    expected = far[0] * scores[300] + far[1] * scores[299]
    assert scores[301] == pytest.approx(expected, abs=1e-12)


def test_aggregate_monthly_constant_growth():
    assert aggregate_monthly(np.full(5, 2.0)) == pytest.approx(6.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5))
def test_aggregation_identity(latent):
    latent = np.asarray(latent)
    expected = (latent[0] + 2 * latent[1] + 3 * latent[2]
                + 2 * latent[3] + latent[4]) / 3.0
    assert aggregate_monthly(latent) == pytest.approx(expected, rel=1e-14, abs=1e-12)


def simulate_bridge_data(rng, T=900, c=0.25, phi=0.35, sigma2=0.2, a1=0.7):
    f = np.zeros(T)
    for t in range(1, T):
        f[t] = a1 * f[t - 1] + rng.normal()
    f = f / f.std()
    ym = c + phi * f + rng.normal(size=T) * np.sqrt(sigma2)
    y = np.full(T, np.nan)
    for t in range(5, T, 3):
        y[t] = AGG_WEIGHTS @ ym[t - 4:t + 1][::-1]
    return f, y


def test_fit_bridge_recovers_parameters():
    rng = np.random.default_rng(4)
    f, y = simulate_bridge_data(rng)
    spec = fit_bridge(f, y)
    assert spec.c == pytest.approx(0.25, abs=0.05)
    assert spec.phi == pytest.approx(0.35, abs=0.07)
    assert spec.sigma2_eps == pytest.approx(0.2, abs=0.07)


def test_fit_bridge_requires_enough_quarters():
    f = np.zeros(12)
    y = np.full(12, np.nan)
    y[5] = 1.0
    with pytest.raises(ValueError):
        fit_bridge(f, y)


def test_nowcast_mean_hand_value():
    bridge = BridgeSpec(c=0.228, phi=0.372, sigma2_eps=0.211)
    factor = np.ones(6)
    # q=2: months 2..6 all have f=1 -> 3c + phi/3 * 9
    assert nowcast_mean(bridge, factor, 2) == pytest.approx(1.800, abs=1e-12)
    assert nowcast_mean(bridge, np.zeros(6), 2) == pytest.approx(3 * 0.228, abs=1e-15)


def test_nowcast_mean_windowing_errors():
    bridge = BridgeSpec(c=0.0, phi=1.0, sigma2_eps=1.0)
    with pytest.raises(WindowingError):
        nowcast_mean(bridge, np.ones(10), 1)  # month 3q-4 < 1
    with pytest.raises(WindowingError):
        nowcast_mean(bridge, np.ones(5), 2)  # history ends before month 6


def test_nowcast_mean_is_affine_in_factor():
    bridge = BridgeSpec(c=0.1, phi=0.5, sigma2_eps=0.3)
    rng = np.random.default_rng(5)
    factor = rng.normal(size=9)
    base = nowcast_mean(bridge, factor, 3)
    weights = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 3.0
    for j in range(5):
        bumped = factor.copy()
        bumped[8 - j] += 0.7  # month 3q - j
        moved = nowcast_mean(bridge, bumped, 3)
        assert moved - base == pytest.approx(weights[j] * bridge.phi * 0.7, abs=1e-12)


def unit_variance_dfm():
    return DfmSpec(loadings=np.ones(4), idio_ar=np.zeros(4), idio_var=np.ones(4),
                   factor_ar=np.array([0.0]), factor_scores=np.zeros(10))


def test_nowcast_variance_hand_value():
    dfm = unit_variance_dfm()
    assert dfm.factor_variance() == pytest.approx(1.0)
    bridge = BridgeSpec(c=0.228, phi=0.372, sigma2_eps=0.211)
    v = nowcast_variance(bridge, dfm)
    assert v == pytest.approx((19 / 9) * (0.372**2 + 0.211), abs=1e-12)
    assert v == pytest.approx(0.7376, abs=2e-4)


def test_nowcast_variance_zero_phi_and_linearity():
    dfm = unit_variance_dfm()
    b0 = BridgeSpec(c=0.0, phi=0.0, sigma2_eps=0.3)
    assert nowcast_variance(b0, dfm) == pytest.approx((19 / 9) * 0.3, abs=1e-14)
    b1 = BridgeSpec(c=0.0, phi=0.4, sigma2_eps=0.3)
    b2 = BridgeSpec(c=0.0, phi=0.4, sigma2_eps=0.6)
    assert nowcast_variance(b2, dfm) - nowcast_variance(b1, dfm) == pytest.approx(
        (19 / 9) * 0.3, abs=1e-12)


def test_variance_constant_across_quarters_bitwise():
    dfm = unit_variance_dfm()
    bridge = BridgeSpec(c=0.1, phi=0.3, sigma2_eps=0.25)
    factor = np.random.default_rng(6).normal(size=30)
    densities = [density_nowcast_dfm(bridge, dfm, factor, q) for q in range(2, 10)]
    variances = {d.variance for d in densities}
    assert len(variances) == 1


def test_density_nowcast_is_symmetric_gaussian():
    dfm = unit_variance_dfm()
    bridge = BridgeSpec(c=0.1, phi=0.3, sigma2_eps=0.25)
    d = density_nowcast_dfm(bridge, dfm, np.zeros(9), 2)
    grid = np.linspace(d.mean - 12 * d.std, d.mean + 12 * d.std, 4001)
    pdf = d.pdf(grid)
    assert np.trapezoid(pdf, grid) == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(pdf, pdf[::-1], atol=1e-12)  # zero skew


def test_two_step_separation_refitting_dfm_leaves_bridge_unchanged():
    rng = np.random.default_rng(7)
    f, y = simulate_bridge_data(rng, T=300)
    bridge = fit_bridge(f, y)
    frozen = (bridge.c, bridge.phi, bridge.sigma2_eps)
    _, panel = simulate_factor_panel(rng, T=200)
    fit_dfm(panel)
    assert (bridge.c, bridge.phi, bridge.sigma2_eps) == frozen


def test_json_serialization_discriminators():
    import json

    rng = np.random.default_rng(8)
    _, panel = simulate_factor_panel(rng, T=200)
    spec = fit_dfm(panel)
    doc = json.loads(dfm_to_json(spec))
    assert doc["model_kind"] == "dfm"
    assert "load_0" in doc["params"]
    bdoc = json.loads(bridge_to_json(BridgeSpec(c=0.1, phi=0.2, sigma2_eps=0.3)))
    assert bdoc["model_kind"] == "bridge"
    assert bdoc["params"]["phi"] == 0.2
