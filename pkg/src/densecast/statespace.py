"""Linear-Gaussian state-space models: Kalman filtering with missing
observations, prediction-error-decomposition log-likelihood, and maximum
likelihood parameter estimation.

Model convention (0-based time t = 0..Tn-1):

    y_t     = Z a_t + d_t + e_t,          e_t ~ N(0, H)
    a_t     = T a_{t-1} + c_t + R eta_t,  eta_t ~ N(0, Q)
    a_0     ~ N(a1, P1)

`d` and `c` may be constant vectors or (Tn, .) matrices (exogenous hooks);
`c[0]` is unused because the initial state distribution is given directly.
Missing observations are flagged with NaN; the filter skips the update for
fully missing rows and conditions on the observed subvector otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg as sla
from scipy import optimize

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap

__all__ = [
    "StateSpaceModel",
    "FilterOutput",
    "FreeParam",
    "ModelTemplate",
    "OptimizerConfig",
    "FitResult",
    "NumericError",
    "ConditioningError",
    "EstimationError",
    "kalman_filter",
    "loglikelihood",
    "fit_mle",
    "model_to_json",
    "model_from_json",
    "pacf_to_ar",
    "ar_to_pacf",
    "ar2_unconditional_variance",
    "stationary_covariance",
]

_LOG_2PI = math.log(2.0 * math.pi)


class NumericError(ValueError):
    """Non-finite values where finite numbers are required."""


class ConditioningError(RuntimeError):
    """Innovation covariance singular or not positive definite."""


class EstimationError(RuntimeError):
    """Likelihood maximization diverged."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = list(trace) if trace is not None else []


def _check_symmetric_psd(name: str, M: np.ndarray) -> None:
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    if M.size:
        w = np.linalg.eigvalsh(0.5 * (M + M.T))
        if w.min() < -1e-8 * max(1.0, abs(w.max())):
            raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class StateSpaceModel:
    """System matrices of a linear-Gaussian state-space model.

    Shapes: Z (N,m), d (N,) or (Tn,N), H (N,N), T (m,m), c (m,) or (Tn,m),
    R (m,r), Q (r,r), a1 (m,), P1 (m,m).
    """

    Z: np.ndarray
    H: np.ndarray
    T: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    a1: np.ndarray
    P1: np.ndarray
    d: np.ndarray | None = None
    c: np.ndarray | None = None

    def __post_init__(self):
        conv = lambda M: np.ascontiguousarray(np.asarray(M, dtype=float))
        for name in ("Z", "H", "T", "R", "Q", "a1", "P1"):
            object.__setattr__(self, name, conv(getattr(self, name)))
        for name in ("d", "c"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, conv(v))
        N, m = self.Z.shape
        r = self.R.shape[1]
        if self.H.shape != (N, N) or self.T.shape != (m, m):
            raise ValueError("inconsistent H/T dimensions")
        if self.R.shape != (m, r) or self.Q.shape != (r, r):
            raise ValueError("inconsistent R/Q dimensions")
        if self.a1.shape != (m,) or self.P1.shape != (m, m):
            raise ValueError("inconsistent initial-state dimensions")
        for name in ("Z", "H", "T", "R", "Q", "a1", "P1"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"{name} contains non-finite entries")
        _check_symmetric_psd("H", self.H)
        _check_symmetric_psd("Q", self.Q)
        _check_symmetric_psd("P1", self.P1)

    @property
    def n_obs(self) -> int:
        return self.Z.shape[0]

    @property
    def n_states(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class FilterOutput:
    """Kalman recursion results; entries for missing observations are NaN."""

    innovations: np.ndarray       # (Tn, N)
    innovation_covs: np.ndarray   # (Tn, N, N)
    predicted_means: np.ndarray   # (Tn, m), a_{t|t-1}
    predicted_covs: np.ndarray    # (Tn, m, m)
    filtered_means: np.ndarray    # (Tn, m), a_{t|t}
    filtered_covs: np.ndarray     # (Tn, m, m)
    loglik: float


def _expand_intercept(vec, Tn, width, name):
    if vec is None:
        return np.zeros((Tn, width))
    v = np.asarray(vec, dtype=float)
    if v.ndim == 1:
        if v.shape != (width,):
            raise ValueError(f"{name} has wrong length")
        return np.broadcast_to(v, (Tn, width)).copy()
    if v.shape != (Tn, width):
        raise ValueError(f"{name} has wrong shape {v.shape}")
    return v.copy()


@njit(cache=True)
def _filter_core(y, obs, Z, d, H, T, c, R, Q, a1, P1,
                 v_out, F_out, apred, Ppred, afilt, Pfilt):
    Tn, N = y.shape
    m = a1.shape[0]
    RQR = R @ Q @ R.T
    Im = np.eye(m)
    a = a1.copy()
    P = P1.copy()
    loglik = 0.0
    for t in range(Tn):
        apred[t] = a
        Ppred[t] = P
        idx = np.where(obs[t])[0]
        k = idx.size
        if k == 0:
            afilt[t] = a
            Pfilt[t] = P
        else:
            Zt = Z[idx, :]
            Ht = H[idx, :][:, idx]
            v = y[t][idx] - Zt @ a - d[t][idx]
            F = Zt @ P @ Zt.T + Ht
            sign, logdet = np.linalg.slogdet(F)
            if sign <= 0 or not np.isfinite(logdet):
                return loglik, 1, t
            Fi = np.linalg.inv(F)
            quad = v @ Fi @ v
            if not np.isfinite(quad):
                return loglik, 1, t
            loglik += -0.5 * (k * _LOG_2PI + logdet + quad)
            K = P @ Zt.T @ Fi
            a = a + K @ v
            # Joseph form for numerical stability, then explicit symmetrization
            IKZ = Im - K @ Zt
            P = IKZ @ P @ IKZ.T + K @ Ht @ K.T
            P = 0.5 * (P + P.T)
            afilt[t] = a
            Pfilt[t] = P
            for j in range(k):
                v_out[t, idx[j]] = v[j]
                for j2 in range(k):
                    F_out[t, idx[j], idx[j2]] = F[j, j2]
        if t + 1 < Tn:
            a = T @ a + c[t + 1]
            P = T @ P @ T.T + RQR
            P = 0.5 * (P + P.T)
    return loglik, 0, -1


@njit(cache=True)
def _loglik_core(y, obs, Z, d, H, T, c, R, Q, a1, P1):
    Tn, N = y.shape
    m = a1.shape[0]
    RQR = R @ Q @ R.T
    Im = np.eye(m)
    a = a1.copy()
    P = P1.copy()
    loglik = 0.0
    for t in range(Tn):
        idx = np.where(obs[t])[0]
        k = idx.size
        if k > 0:
            Zt = Z[idx, :]
            Ht = H[idx, :][:, idx]
            v = y[t][idx] - Zt @ a - d[t][idx]
            F = Zt @ P @ Zt.T + Ht
            sign, logdet = np.linalg.slogdet(F)
            if sign <= 0 or not np.isfinite(logdet):
                return loglik, 1, t
            Fi = np.linalg.inv(F)
            quad = v @ Fi @ v
            if not np.isfinite(quad):
                return loglik, 1, t
            loglik += -0.5 * (k * _LOG_2PI + logdet + quad)
            K = P @ Zt.T @ Fi
            a = a + K @ v
            IKZ = Im - K @ Zt
            P = IKZ @ P @ IKZ.T + K @ Ht @ K.T
            P = 0.5 * (P + P.T)
        if t + 1 < Tn:
            a = T @ a + c[t + 1]
            P = T @ P @ T.T + RQR
            P = 0.5 * (P + P.T)
    return loglik, 0, -1


def _prepare_inputs(model: StateSpaceModel, y) -> tuple:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    Tn, N = y.shape
    if N != model.n_obs:
        raise ValueError(f"observation width {N} != model N {model.n_obs}")
    if np.any(np.isinf(y)):
        raise NumericError("observations contain infinite values")
    obs = ~np.isnan(y)
    y_clean = np.where(obs, y, 0.0)
    d = _expand_intercept(model.d, Tn, N, "d")
    c = _expand_intercept(model.c, Tn, model.n_states, "c")
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(c))):
        raise NumericError("intercepts contain non-finite entries")
    return np.ascontiguousarray(y_clean), np.ascontiguousarray(obs), d, c


def kalman_filter(model: StateSpaceModel, observations) -> FilterOutput:
    """Run the Kalman filter over observations with NaN-flagged missing values.

    For a fully missing row the filtered state equals the one-step prediction
    exactly; partially missing rows condition on the observed subvector. The
    log-likelihood is the prediction error decomposition summed over observed
    components only.
    """
    y, obs, d, c = _prepare_inputs(model, observations)
    Tn, N = y.shape
    m = model.n_states
    v_out = np.full((Tn, N), np.nan)
    F_out = np.full((Tn, N, N), np.nan)
    apred = np.empty((Tn, m))
    Ppred = np.empty((Tn, m, m))
    afilt = np.empty((Tn, m))
    Pfilt = np.empty((Tn, m, m))
    loglik, status, bad_t = _filter_core(
        y, obs, model.Z, d, model.H, model.T, c, model.R, model.Q,
        model.a1, model.P1, v_out, F_out, apred, Ppred, afilt, Pfilt)
    if status != 0:
        raise ConditioningError(
            f"innovation covariance singular or indefinite at t={bad_t}")
    return FilterOutput(v_out, F_out, apred, Ppred, afilt, Pfilt, float(loglik))


def loglikelihood(model: StateSpaceModel, observations) -> float:
    """Prediction-error-decomposition log-likelihood (observed components only)."""
    y, obs, d, c = _prepare_inputs(model, observations)
    loglik, status, bad_t = _loglik_core(
        y, obs, model.Z, d, model.H, model.T, c, model.R, model.Q,
        model.a1, model.P1)
    if status != 0:
        raise ConditioningError(
            f"innovation covariance singular or indefinite at t={bad_t}")
    return float(loglik)


# ---------------------------------------------------------------------------
# Maximum likelihood estimation
# ---------------------------------------------------------------------------

_TRANSFORMS = {
    # natural -> unconstrained, unconstrained -> natural
    "identity": (lambda v: v, lambda u: u),
    "positive": (lambda v: math.log(v), lambda u: math.exp(u)),
    "corr": (lambda v: math.atanh(v), lambda u: math.tanh(u)),
}


@dataclass(frozen=True)
class FreeParam:
    """A free scalar parameter with its positivity/stationarity map."""

    name: str
    init: float
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in _TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class ModelTemplate:
    """Free parameters plus a builder mapping them to a StateSpaceModel."""

    params: tuple
    build: Callable[[dict], StateSpaceModel]

    def build_model(self, values: dict) -> StateSpaceModel:
        return self.build(values)


@dataclass(frozen=True)
class OptimizerConfig:
    max_iter: int = 500
    rel_tol: float = 1e-8


@dataclass
class FitResult:
    model: StateSpaceModel
    params: dict
    loglik: float
    trace: list
    converged: bool
    n_iter: int


_DIVERGED = 1e12


def fit_mle(template: ModelTemplate, observations,
            config: OptimizerConfig | None = None) -> FitResult:
    """Maximize the Kalman log-likelihood over the template's free parameters.

    Variances travel through a log map and autoregressive coefficients through
    a tanh map, so every optimizer step stays inside the admissible region.
    Quasi-Newton (L-BFGS-B) with relative tolerance `rel_tol` on the
    log-likelihood, at most `max_iter` iterations.
    """
    config = config or OptimizerConfig()
    params = list(template.params)
    if not params:
        model = template.build_model({})
        ll = loglikelihood(model, observations)
        return FitResult(model, {}, ll, [ll], True, 0)

    to_u = [_TRANSFORMS[p.transform][0] for p in params]
    to_v = [_TRANSFORMS[p.transform][1] for p in params]
    names = [p.name for p in params]
    u0 = np.array([f(p.init) for f, p in zip(to_u, params)])

    cache: dict[bytes, float] = {}

    def unpack(u):
        return {n: f(ui) for n, f, ui in zip(names, to_v, u)}

    def objective(u):
        try:
            ll = loglikelihood(template.build_model(unpack(u)), observations)
        except (ConditioningError, NumericError, ValueError):
            ll = -_DIVERGED
        if not np.isfinite(ll):
            ll = -_DIVERGED
        cache[u.tobytes()] = ll
        return -ll

    trace: list[float] = [-objective(u0)]

    def callback(uk):
        trace.append(cache.get(np.asarray(uk).tobytes(), -objective(uk)))

    res = optimize.minimize(
        objective, u0, method="L-BFGS-B", callback=callback,
        options={"maxiter": config.max_iter, "ftol": config.rel_tol,
                 "maxfun": 200 * config.max_iter})
    final_ll = -res.fun
    if not np.isfinite(final_ll) or final_ll <= -_DIVERGED / 2:
        raise EstimationError("likelihood maximization diverged", trace=trace)
    values = unpack(res.x)
    model = template.build_model(values)
    return FitResult(model, values, float(final_ll), trace,
                     bool(res.success), int(res.nit))


# ---------------------------------------------------------------------------
# AR parameterization helpers
# ---------------------------------------------------------------------------

def pacf_to_ar(pacfs) -> np.ndarray:
    """Map partial autocorrelations in (-1, 1) to stationary AR coefficients."""
    r = np.asarray(pacfs, dtype=float)
    if np.any(np.abs(r) >= 1.0):
        raise ValueError("partial autocorrelations must lie in (-1, 1)")
    a = np.array([r[0]])
    for k in range(1, r.size):
        a = np.concatenate([a - r[k] * a[::-1], [r[k]]])
    return a


def ar_to_pacf(coeffs) -> np.ndarray:
    """Inverse of pacf_to_ar (Durbin-Levinson downdating)."""
    a = np.asarray(coeffs, dtype=float).copy()
    r = np.empty(a.size)
    for k in range(a.size - 1, 0, -1):
        r[k] = a[-1]
        if abs(r[k]) >= 1.0:
            raise ValueError("non-stationary AR coefficients")
        a = (a[:-1] + r[k] * a[-2::-1]) / (1.0 - r[k] * r[k])
    r[0] = a[0]
    if abs(r[0]) >= 1.0:
        raise ValueError("non-stationary AR coefficients")
    return r


def ar2_unconditional_variance(a1: float, a2: float, sigma2: float) -> float:
    """Stationary variance of an AR(2) process with innovation variance sigma2."""
    denom = (1.0 + a2) * ((1.0 - a2) ** 2 - a1 ** 2)
    if denom <= 0.0:
        raise ValueError("AR(2) coefficients outside the stationary region")
    return sigma2 * (1.0 - a2) / denom


def stationary_covariance(T: np.ndarray, RQR: np.ndarray) -> np.ndarray:
    """Solve P = T P T' + RQR for the unconditional state covariance."""
    P = sla.solve_discrete_lyapunov(np.asarray(T, float), np.asarray(RQR, float))
    return 0.5 * (P + P.T)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _matrix_doc(M: np.ndarray) -> dict:
    return {"shape": list(M.shape), "data": [float(x) for x in M.ravel()]}


def _matrix_undoc(doc: dict) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def model_to_json(model: StateSpaceModel, params: dict | None = None,
                  loglik: float | None = None, trace=None,
                  model_kind: str = "statespace") -> str:
    """Serialize a fitted model: row-major matrices, parameter names, loglik,
    and the iteration trace."""
    doc = {"model_kind": model_kind,
           "matrices": {name: _matrix_doc(getattr(model, name))
                        for name in ("Z", "H", "T", "R", "Q", "a1", "P1")}}
    for name in ("d", "c"):
        v = getattr(model, name)
        if v is not None:
            doc["matrices"][name] = _matrix_doc(v)
    if params is not None:
        doc["params"] = {k: float(v) for k, v in params.items()}
    if loglik is not None:
        doc["loglik"] = float(loglik)
    if trace is not None:
        doc["trace"] = [float(x) for x in trace]
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> tuple[StateSpaceModel, dict]:
    doc = json.loads(text)
    mats = {name: _matrix_undoc(m) for name, m in doc["matrices"].items()}
    model = StateSpaceModel(
        Z=mats["Z"], H=mats["H"], T=mats["T"], R=mats["R"], Q=mats["Q"],
        a1=mats["a1"], P1=mats["P1"], d=mats.get("d"), c=mats.get("c"))
    return model, doc
