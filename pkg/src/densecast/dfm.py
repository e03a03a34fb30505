"""Two-step nowcasting with a dynamic factor model.

Step one extracts a single common factor from a small standardized monthly
panel (factor AR(2) by default, AR(1) idiosyncratic components, factor
innovation variance pinned at one for identification). Step two bridges the
filtered factor to quarterly GDP growth through a monthly state-space model
whose measurement is the (1,2,3,2,1)/3 temporal aggregation of latent monthly
growth, yielding analytic Gaussian density nowcasts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .density import GaussianDensity
from .statespace import (
    FreeParam,
    ModelTemplate,
    OptimizerConfig,
    StateSpaceModel,
    ar2_unconditional_variance,
    ar_to_pacf,
    fit_mle,
    kalman_filter,
    model_to_json,
    pacf_to_ar,
    stationary_covariance,
)

__all__ = [
    "AGG_WEIGHTS",
    "DfmSpec",
    "BridgeSpec",
    "WindowingError",
    "fit_dfm",
    "filtered_factor",
    "fit_bridge",
    "aggregate_monthly",
    "nowcast_mean",
    "nowcast_variance",
    "density_nowcast_dfm",
    "dfm_to_json",
    "bridge_to_json",
]

# quarterly growth ~= (1/3) * (y_t + 2 y_{t-1} + 3 y_{t-2} + 2 y_{t-3} + y_{t-4})
AGG_WEIGHTS = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 3.0


class WindowingError(ValueError):
    """Not enough history to evaluate an operation."""


@dataclass(frozen=True)
class DfmSpec:
    """Fitted one-factor model: loadings, AR dynamics, and filtered scores."""

    loadings: np.ndarray        # per-series loading on the factor
    idio_ar: np.ndarray         # AR(1) coefficient of each idiosyncratic term
    idio_var: np.ndarray        # innovation variance of each idiosyncratic term
    factor_ar: np.ndarray       # (a1,) or (a1, a2); innovation variance = 1
    factor_scores: np.ndarray   # filtered factor estimates over the fit sample
    loglik: float = float("nan")
    trace: tuple = ()

    @property
    def factor_order(self) -> int:
        return len(self.factor_ar)

    def factor_variance(self) -> float:
        a = np.zeros(2)
        a[: self.factor_order] = self.factor_ar
        return ar2_unconditional_variance(a[0], a[1], 1.0)


@dataclass(frozen=True)
class BridgeSpec:
    """Monthly-growth bridge: intercept, factor loading, innovation variance."""

    c: float
    phi: float
    sigma2_eps: float
    loglik: float = float("nan")
    trace: tuple = ()

    def __post_init__(self):
        if not self.sigma2_eps > 0.0:
            raise ValueError("sigma2_eps must be strictly positive")


def dfm_state_space(loadings, idio_ar, idio_var, factor_ar) -> StateSpaceModel:
    """Cast the one-factor model to state-space form.

    State = (f_t, [f_{t-1} if AR(2)], u_1..u_N); measurement x_j = L_j f + u_j
    with H = 0 (all noise lives in the state).
    """
    lam = np.asarray(loadings, float)
    car = np.asarray(idio_ar, float)
    cvar = np.asarray(idio_var, float)
    far = np.asarray(factor_ar, float)
    N = lam.size
    p = far.size
    if p not in (1, 2):
        raise ValueError("factor AR order must be 1 or 2")
    m = p + N
    T = np.zeros((m, m))
    T[0, :p] = far
    if p == 2:
        T[1, 0] = 1.0
    T[p:, p:] = np.diag(car)
    R = np.zeros((m, 1 + N))
    R[0, 0] = 1.0
    R[p:, 1:] = np.eye(N)
    Q = np.diag(np.concatenate([[1.0], cvar]))
    Z = np.zeros((N, m))
    Z[:, 0] = lam
    Z[:, p:] = np.eye(N)
    H = np.zeros((N, N))
    P1 = stationary_covariance(T, R @ Q @ R.T)
    return StateSpaceModel(Z=Z, H=H, T=T, R=R, Q=Q, a1=np.zeros(m), P1=P1)


def _validate_trailing_missing(panel: np.ndarray) -> None:
    for j in range(panel.shape[1]):
        col = panel[:, j]
        missing = np.isnan(col)
        if missing.any():
            first = int(np.argmax(missing))
            if not missing[first:].all():
                raise ValueError(f"column {j} has interior missing values")


def _pca_starts(panel: np.ndarray):
    complete = panel[~np.isnan(panel).any(axis=1)]
    if complete.shape[0] < 24:
        raise ValueError("need at least 24 complete rows to initialize the factor")
    u, s, _ = np.linalg.svd(complete - complete.mean(axis=0), full_matrices=False)
    pc = u[:, 0] * s[0]
    pc = pc / np.std(pc)
    if np.corrcoef(pc, complete[:, 0])[0, 1] < 0:
        pc = -pc
    lam = np.array([np.cov(pc, complete[:, j])[0, 1] for j in range(panel.shape[1])])
    resid = complete - np.outer(pc, lam)
    idio_ar = np.clip(
        [np.corrcoef(resid[:-1, j], resid[1:, j])[0, 1] for j in range(panel.shape[1])],
        -0.9, 0.9)
    idio_var = np.maximum((1.0 - idio_ar**2) * resid.var(axis=0), 0.05)
    rho1 = float(np.clip(np.corrcoef(pc[:-1], pc[1:])[0, 1], -0.9, 0.9))
    return lam, np.asarray(idio_ar), idio_var, rho1


def fit_dfm(panel, factor_order: int = 2, start: DfmSpec | None = None,
            optimizer_config: OptimizerConfig | None = None) -> DfmSpec:
    """Fit the one-factor model by maximum likelihood on a standardized panel.

    Trailing missing values are allowed (the filter predicts through them);
    interior gaps are rejected. The loading sign is normalized so the filtered
    factor correlates positively with the first series.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim != 2:
        raise ValueError("panel must be months x series")
    _validate_trailing_missing(panel)
    N = panel.shape[1]

    if start is not None:
        lam0 = np.asarray(start.loadings, float)
        ar0 = np.asarray(start.idio_ar, float)
        var0 = np.asarray(start.idio_var, float)
        fpacf0 = ar_to_pacf(start.factor_ar)
        fpacf0 = np.clip(fpacf0, -0.95, 0.95)
        if fpacf0.size < factor_order:
            fpacf0 = np.concatenate([fpacf0, np.zeros(factor_order - fpacf0.size)])
        fpacf0 = fpacf0[:factor_order]
    else:
        lam0, ar0, var0, rho1 = _pca_starts(panel)
        fpacf0 = np.array([rho1, 0.0])[:factor_order]
        vf0 = ar2_unconditional_variance(*pacf_to_ar(np.append(fpacf0, 0.0)[:2]), 1.0) \
            if factor_order == 2 else 1.0 / (1.0 - fpacf0[0] ** 2)
        lam0 = lam0 / np.sqrt(vf0)

    params = []
    for j in range(N):
        params.append(FreeParam(f"load_{j}", float(lam0[j])))
        params.append(FreeParam(f"idio_pacf_{j}", float(np.clip(ar0[j], -0.95, 0.95)), "corr"))
        params.append(FreeParam(f"idio_var_{j}", float(var0[j]), "positive"))
    for k in range(factor_order):
        params.append(FreeParam(f"factor_pacf_{k + 1}", float(np.clip(fpacf0[k], -0.95, 0.95)), "corr"))

    def build(p):
        lam = np.array([p[f"load_{j}"] for j in range(N)])
        car = np.array([p[f"idio_pacf_{j}"] for j in range(N)])
        cvar = np.array([p[f"idio_var_{j}"] for j in range(N)])
        fpacf = [p[f"factor_pacf_{k + 1}"] for k in range(factor_order)]
        return dfm_state_space(lam, car, cvar, pacf_to_ar(fpacf))

    fit = fit_mle(ModelTemplate(params=tuple(params), build=build), panel,
                  optimizer_config)
    lam = np.array([fit.params[f"load_{j}"] for j in range(N)])
    car = np.array([fit.params[f"idio_pacf_{j}"] for j in range(N)])
    cvar = np.array([fit.params[f"idio_var_{j}"] for j in range(N)])
    far = pacf_to_ar([fit.params[f"factor_pacf_{k + 1}"] for k in range(factor_order)])

    scores = kalman_filter(fit.model, panel).filtered_means[:, 0]
    # identification: factor is only defined up to sign
    obs0 = ~np.isnan(panel[:, 0])
    if np.corrcoef(scores[obs0], panel[obs0, 0])[0, 1] < 0:
        lam = -lam
        scores = -scores
    spec = DfmSpec(loadings=lam, idio_ar=car, idio_var=cvar, factor_ar=far,
                   factor_scores=scores, loglik=fit.loglik, trace=tuple(fit.trace))
    return spec


def filtered_factor(spec: DfmSpec, panel) -> np.ndarray:
    """Filtered factor estimates for a (possibly NaN-padded) panel.

    Rows past the data cutoff should be NaN; there the filter's own AR
    prediction supplies the factor value.
    """
    panel = np.asarray(panel, dtype=float)
    model = dfm_state_space(spec.loadings, spec.idio_ar, spec.idio_var, spec.factor_ar)
    scores = kalman_filter(model, panel).filtered_means[:, 0]
    return scores


def aggregate_monthly(latent: np.ndarray) -> float:
    """Quarterly growth implied by (y_t, y_{t-1}, ..., y_{t-4})."""
    latent = np.asarray(latent, dtype=float)
    if latent.shape != (5,):
        raise ValueError("aggregation needs exactly 5 stacked monthly values")
    return float(AGG_WEIGHTS @ latent)


def bridge_state_space(c: float, phi: float, sigma2: float,
                       factor: np.ndarray, var_f_hint: float) -> StateSpaceModel:
    """Monthly bridge model: state stacks 5 lags of latent monthly growth."""
    Tn = factor.shape[0]
    T = np.zeros((5, 5))
    for i in range(1, 5):
        T[i, i - 1] = 1.0
    R = np.zeros((5, 1))
    R[0, 0] = 1.0
    Q = np.array([[sigma2]])
    Z = AGG_WEIGHTS[None, :]
    H = np.zeros((1, 1))
    ct = np.zeros((Tn, 5))
    ct[:, 0] = c + phi * factor
    a1 = np.full(5, c)
    P1 = (phi * phi * var_f_hint + sigma2) * np.eye(5)
    return StateSpaceModel(Z=Z, H=H, T=T, R=R, Q=Q, a1=a1, P1=P1, c=ct)


def fit_bridge(factor, quarterly_target,
               optimizer_config: OptimizerConfig | None = None) -> BridgeSpec:
    """MLE of (c, phi, sigma2) on a monthly grid with every-third-month targets.

    `quarterly_target` is a monthly-length vector, NaN except in months where
    quarterly growth is observed; `factor` enters as an exogenous input.
    """
    factor = np.asarray(factor, dtype=float)
    y = np.asarray(quarterly_target, dtype=float)
    if y.shape != factor.shape:
        raise ValueError("factor and target grids must align month-by-month")
    obs = ~np.isnan(y)
    if obs.sum() < 8:
        raise ValueError("need at least 8 quarterly observations")
    var_f = float(np.var(factor))

    # OLS starting values through the aggregated-factor regression
    rows = np.flatnonzero(obs)
    rows = rows[rows >= 4]
    agg = np.array([AGG_WEIGHTS @ factor[t - 4:t + 1][::-1] for t in rows])
    yy = y[rows]
    phi0, c3 = np.polyfit(agg, yy, 1)
    resid = yy - (c3 + phi0 * agg)
    s0 = max(float(np.var(resid)) * 9.0 / 19.0, 1e-4)

    def build(p):
        return bridge_state_space(p["c"], p["phi"], p["sigma2"], factor, var_f)

    template = ModelTemplate(
        params=(FreeParam("c", float(c3) / 3.0),
                FreeParam("phi", float(phi0)),
                FreeParam("sigma2", s0, "positive")),
        build=build)
    fit = fit_mle(template, y[:, None], optimizer_config)
    return BridgeSpec(c=fit.params["c"], phi=fit.params["phi"],
                      sigma2_eps=fit.params["sigma2"], loglik=fit.loglik,
                      trace=tuple(fit.trace))


def nowcast_mean(bridge: BridgeSpec, factor, q: int) -> float:
    """Conditional mean of quarterly growth for quarter q (1-based).

    mu = 3c + (phi/3) (f_{3q} + 2 f_{3q-1} + 3 f_{3q-2} + 2 f_{3q-3} + f_{3q-4})
    with factor values filtered/extrapolated through month 3q.
    """
    factor = np.asarray(factor, dtype=float)
    t = 3 * q - 1  # 0-based row of month 3q
    if q < 1 or t - 4 < 0:
        raise WindowingError(f"quarter {q} needs factor history back to month 3q-4")
    if t >= factor.shape[0]:
        raise WindowingError(
            f"factor history ends before month {3 * q} of quarter {q}")
    window = factor[t - 4:t + 1][::-1]  # (f_{3q}, f_{3q-1}, ..., f_{3q-4})
    return float(3.0 * bridge.c + AGG_WEIGHTS @ window * bridge.phi)


def nowcast_variance(bridge: BridgeSpec, dfm: DfmSpec) -> float:
    """Conditional variance (19/9) (phi^2 Var(f)) + (19/9) sigma2_eps.

    Var(f) is the unconditional variance of the fitted factor process, so the
    value is constant across quarters for fixed parameters.
    """
    var_f = dfm.factor_variance()
    if not (bridge.sigma2_eps > 0.0):
        raise ValueError("sigma2_eps must be positive")
    return (19.0 / 9.0) * (bridge.phi ** 2 * var_f) + (19.0 / 9.0) * bridge.sigma2_eps


def density_nowcast_dfm(bridge: BridgeSpec, dfm: DfmSpec, factor, q: int) -> GaussianDensity:
    """Analytic Gaussian density nowcast for quarter q; the point nowcast is
    its mean."""
    return GaussianDensity(mean=nowcast_mean(bridge, factor, q),
                           variance=nowcast_variance(bridge, dfm))


def dfm_to_json(spec: DfmSpec) -> str:
    model = dfm_state_space(spec.loadings, spec.idio_ar, spec.idio_var, spec.factor_ar)
    params = {f"load_{j}": float(v) for j, v in enumerate(spec.loadings)}
    params.update({f"idio_ar_{j}": float(v) for j, v in enumerate(spec.idio_ar)})
    params.update({f"idio_var_{j}": float(v) for j, v in enumerate(spec.idio_var)})
    params.update({f"factor_ar_{k + 1}": float(v) for k, v in enumerate(spec.factor_ar)})
    return model_to_json(model, params=params, loglik=spec.loglik,
                         trace=spec.trace, model_kind="dfm")


def bridge_to_json(spec: BridgeSpec) -> str:
    doc = {"model_kind": "bridge",
           "params": {"c": spec.c, "phi": spec.phi, "sigma2_eps": spec.sigma2_eps},
           "measurement_weights": [float(w) for w in AGG_WEIGHTS],
           "loglik": spec.loglik if np.isfinite(spec.loglik) else None,
           "trace": [float(x) for x in spec.trace]}
    return json.dumps(doc, sort_keys=True)
