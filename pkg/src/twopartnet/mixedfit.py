"""REML and restricted pseudo-likelihood fitting of the two-part model.

Both parts share one computational core: a Gaussian mixed model with a
diagonal random-effects covariance, estimated by restricted maximum
likelihood.  The per-subject block structure of the random design is
exploited throughout -- each subject contributes cross-products of size
q x q, so the marginal covariance V_i = sigma^2 W_i^{-1} + Z_i D Z_i' is
inverted through the Woodbury identity on a q x q capacitance matrix and
the full N x N covariance is never materialized.

The presence model wraps the Gaussian core in the Wolfinger-O'Connell
linearization: a working variate and working weights are refreshed from the
current fitted probabilities and a weighted REML fit is run to convergence
of both the fixed effects and the variance components, with the residual
pseudo-dispersion estimated rather than fixed at 1.

Optimization is quasi-Newton (L-BFGS-B) on log variances with analytic
gradients, restarted from three deterministic seeds; components driven to
the boundary are pinned to exactly zero and the remainder refit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from scipy.special import expit, logit

from .dyaddesign import DesignMatrices, ModelSpec
from .netdata import DataError

LOG_2PI = math.log(2.0 * math.pi)

REML_FTOL = 1e-12       # relative objective change, inner quasi-Newton
REML_GTOL = 1e-9
REML_MAXITER = 200
PQL_TOL = 1e-6          # relative parameter change, outer linearization
PQL_MAX_OUTER = 50
PIN_RATIO = 1e-10       # tau below PIN_RATIO * sigma2 is pinned to zero
ETA_LIMIT = 30.0        # quasi-separation guard on the linear predictor

_THREADS = 1


def set_threads(n: int) -> None:
    """Upper bound on worker threads for per-subject computations.

    Results are bitwise independent of this setting: per-subject
    contributions are computed independently and reduced in subject order.
    """
    global _THREADS
    _THREADS = max(1, int(n))


class ConvergenceError(RuntimeError):
    """Optimizer failed to converge; carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SeparationError(RuntimeError):
    """Binary response is (quasi-)separable or constant."""


@dataclass(frozen=True)
class VarianceComponents:
    """Variance parameter estimates with boundary flags."""

    names: tuple[str, ...]
    tau: np.ndarray
    sigma2: float
    at_bound: np.ndarray

    def to_dict(self) -> dict:
        return {
            "tau": {n: float(v) for n, v in zip(self.names, self.tau)},
            "sigma2": float(self.sigma2),
            "at_bound": [n for n, b in zip(self.names, self.at_bound) if b],
        }


@dataclass
class LmmFit:
    """A converged Gaussian mixed-model fit."""

    beta: np.ndarray
    beta_names: tuple[str, ...]
    beta_cov: np.ndarray
    vc: VarianceComponents
    blups: np.ndarray              # (n_subjects, q) per-subject predictions
    subjects: tuple[str, ...]
    reml_loglik: float
    n_rows: int
    residual_df: int
    converged: bool
    trace: list = field(default_factory=list, repr=False)
    z_names: tuple[str, ...] = ()
    vc_map: np.ndarray = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_cov))


@dataclass
class GlmmFit(LmmFit):
    """Presence-model fit; the Gaussian fields describe the final working fit."""

    working_weights: np.ndarray = None
    fitted_probs: np.ndarray = None
    outer_iterations: int = 0


@dataclass
class TwoPartFit:
    """Joint container for the presence and strength fits."""

    presence: GlmmFit
    strength: LmmFit
    spec: ModelSpec
    centering: object
    n_nodes: int


# ---------------------------------------------------------------------------
# Per-subject sufficient statistics
# ---------------------------------------------------------------------------


@dataclass
class _SuffStats:
    Szz: np.ndarray        # (S, q, q)
    Szx: np.ndarray        # (S, q, p)
    Szy: np.ndarray        # (S, q)
    Sxx: np.ndarray        # (p, p) summed
    Sxy: np.ndarray        # (p,) summed
    Syy: float
    n_rows: int
    n_per_subject: np.ndarray
    sum_log_w: float
    vc_map: np.ndarray
    n_params: int          # variance parameters (excluding sigma2)
    p: int
    q: int


def _subject_slices(subject_index: np.ndarray, n_subjects: int):
    return [np.flatnonzero(subject_index == s) for s in range(n_subjects)]


def _build_suffstats(design: DesignMatrices, y: np.ndarray, weights=None) -> _SuffStats:
    X, Z = design.X, design.Z
    n, p = X.shape
    q = Z.shape[1]
    y = np.asarray(y, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise DataError("prior weights must be positive")
    slices = _subject_slices(design.subject_index, len(design.subjects))
    S = len(slices)

    def one(idx):
        Xi, Zi, yi, wi = X[idx], Z[idx], y[idx], w[idx]
        Zw = Zi * wi[:, None]
        return (
            Zw.T @ Zi,
            Zw.T @ Xi,
            Zw.T @ yi,
            (Xi * wi[:, None]).T @ Xi,
            (Xi * wi[:, None]).T @ yi,
            float(yi @ (wi * yi)),
            float(np.log(wi).sum()),
        )

    if _THREADS > 1 and S > 1:
        with ThreadPoolExecutor(max_workers=_THREADS) as pool:
            parts = list(pool.map(one, slices))
    else:
        parts = [one(idx) for idx in slices]

    Szz = np.stack([pt[0] for pt in parts]) if q else np.zeros((S, 0, 0))
    Szx = np.stack([pt[1] for pt in parts]) if q else np.zeros((S, 0, p))
    Szy = np.stack([pt[2] for pt in parts]) if q else np.zeros((S, 0))
    Sxx = sum(pt[3] for pt in parts)
    Sxy = sum(pt[4] for pt in parts)
    Syy = float(sum(pt[5] for pt in parts))
    sum_log_w = float(sum(pt[6] for pt in parts))
    n_params = int(design.vc_map.max()) + 1 if q else 0
    return _SuffStats(
        Szz=Szz, Szx=Szx, Szy=Szy, Sxx=Sxx, Sxy=Sxy, Syy=Syy,
        n_rows=n, n_per_subject=np.array([len(ix) for ix in slices]),
        sum_log_w=sum_log_w, vc_map=design.vc_map, n_params=n_params, p=p, q=q,
    )


# ---------------------------------------------------------------------------
# REML objective, gradient, and fitted quantities
# ---------------------------------------------------------------------------


def _core_eval(tau: np.ndarray, sigma2: float, ss: _SuffStats, want_grad: bool, want_fit: bool):
    """Evaluate -2 * restricted log-likelihood and optionally its gradient
    (w.r.t. tau and sigma2 on the natural scale) or the fitted quantities."""
    p, q, S = ss.p, ss.q, ss.Szz.shape[0]
    N = ss.n_rows
    d = tau[ss.vc_map] if q else np.zeros(0)
    sd = np.sqrt(d)

    if q:
        C = sd[None, :, None] * ss.Szz * sd[None, None, :]
        M = C / sigma2
        M[:, np.arange(q), np.arange(q)] += 1.0
        if not np.all(np.isfinite(M)):
            return {"objective": np.inf}
        try:
            cholM = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            return {"objective": np.inf}
        logdetM = float(2.0 * np.log(np.einsum("sqq->sq", cholM)).sum())
        Pzx = sd[None, :, None] * ss.Szx
        Pzy = sd[None, :] * ss.Szy
        rhs = np.concatenate([Pzx, Pzy[:, :, None]], axis=2)
        sol = np.linalg.solve(M, rhs)
        Wzx, Wzy = sol[:, :, :p], sol[:, :, p]
        H = (ss.Sxx - np.einsum("sqa,sqb->ab", Pzx, Wzx) / sigma2) / sigma2
        g = (ss.Sxy - np.einsum("sqa,sq->a", Pzx, Wzy) / sigma2) / sigma2
        s_yy = (ss.Syy - np.einsum("sq,sq->", Pzy, Wzy) / sigma2) / sigma2
    else:
        logdetM = 0.0
        H = ss.Sxx / sigma2
        g = ss.Sxy / sigma2
        s_yy = ss.Syy / sigma2

    try:
        cholH = scipy.linalg.cholesky(H, lower=True)
    except scipy.linalg.LinAlgError:
        return {"objective": np.inf}
    beta = scipy.linalg.cho_solve((cholH, True), g)
    logdetH = float(2.0 * np.log(np.diag(cholH)).sum())
    ypy = s_yy - float(g @ beta)
    objective = (
        (N - p) * LOG_2PI + logdetM + N * math.log(sigma2) - ss.sum_log_w
        + logdetH + ypy
    )
    out = {"objective": float(objective)}
    if not (want_grad or want_fit):
        return out

    if q:
        # per-subject compressed pieces of Z'V^{-1}{Z diag, X, y}
        Q = sd[None, :, None] * ss.Szz          # rows scaled: D^{1/2} Szz
        Ksol = np.linalg.solve(M, Q)
        zvz_diag = (ss.Szz[:, np.arange(q), np.arange(q)] / sigma2
                    - np.einsum("sac,sac->sc", Q, Ksol) / sigma2**2)
        zvx = ss.Szx / sigma2 - np.einsum("sac,saj->scj", Q, Wzx) / sigma2**2
        zvy = ss.Szy / sigma2 - np.einsum("sac,sa->sc", Q, Wzy) / sigma2**2
        resid_z = zvy - np.einsum("scj,j->sc", zvx, beta)   # Z'V^{-1}(y - X beta)
    else:
        zvz_diag = np.zeros((S, 0))
        zvx = np.zeros((S, 0, p))
        zvy = np.zeros((S, 0))
        resid_z = np.zeros((S, 0))

    if want_fit:
        # C order so downstream products match archives round-tripped
        # through lists bit for bit
        Hinv = np.ascontiguousarray(scipy.linalg.cho_solve((cholH, True), np.eye(p)))
        blups = d[None, :] * resid_z if q else np.zeros((S, 0))
        out.update(
            beta=beta, beta_cov=Hinv, blups=blups, ypy=ypy,
            zvx=zvx, resid_z=resid_z,
        )
        return out

    # gradient w.r.t. each tau parameter: sum over its Z columns of
    #   [Z'V^{-1}Z]_cc - a_c' H^{-1} a_c - t_c^2
    grad_tau = np.zeros(ss.n_params)
    if q:
        hinv_a = scipy.linalg.cho_solve(
            (cholH, True), zvx.reshape(S * q, p).T
        ).T.reshape(S, q, p)
        quad = np.einsum("scj,scj->sc", zvx, hinv_a)
        per_col = (zvz_diag - quad - resid_z**2).sum(axis=0)
        np.add.at(grad_tau, ss.vc_map, per_col)

    # sigma2 direction: d V / d sigma2 = W^{-1}
    if q:
        trMinv = np.trace(np.linalg.solve(M, np.broadcast_to(np.eye(q), M.shape).copy()),
                          axis1=1, axis2=2)
        tr_vw = float(((ss.n_per_subject - q + trMinv) / sigma2).sum())
        dH = -H / sigma2 + np.einsum("sqa,sqb->ab", Wzx, Wzx) / sigma2**3
        dg = -g / sigma2 + np.einsum("sqa,sq->a", Wzx, Wzy) / sigma2**3
        ds = -s_yy / sigma2 + np.einsum("sq,sq->", Wzy, Wzy) / sigma2**3
    else:
        tr_vw = N / sigma2
        dH = -H / sigma2
        dg = -g / sigma2
        ds = -s_yy / sigma2
    Hinv_dH = scipy.linalg.cho_solve((cholH, True), dH)
    d_logdetH = float(np.trace(Hinv_dH))
    d_ypy = float(ds - 2.0 * beta @ dg + beta @ dH @ beta)
    grad_sigma2 = tr_vw + d_logdetH + d_ypy
    out["grad_tau"] = grad_tau
    out["grad_sigma2"] = float(grad_sigma2)
    return out


def _unpack_theta(theta: np.ndarray, n_params: int):
    with np.errstate(over="ignore"):
        tau = np.exp(np.asarray(theta[:n_params], dtype=float))
        sigma2 = float(np.exp(theta[n_params]))
    return tau, sigma2


def reml_objective(theta, design: DesignMatrices, response, prior_weights=None) -> float:
    """-2 x restricted log-likelihood at log-scale variance parameters.

    ``theta`` holds the log variance parameters followed by log sigma^2.
    The fixed effects are profiled out; evaluation is per subject via the
    Woodbury identity.  Non-finite values signal the optimizer to halve its
    step.
    """
    ss = _build_suffstats(design, response, prior_weights)
    tau, sigma2 = _unpack_theta(np.asarray(theta, dtype=float), ss.n_params)
    return _core_eval(tau, sigma2, ss, want_grad=False, want_fit=False)["objective"]


def reml_objective_grad(theta, design: DesignMatrices, response, prior_weights=None) -> np.ndarray:
    """Gradient of :func:`reml_objective` with respect to ``theta``."""
    ss = _build_suffstats(design, response, prior_weights)
    theta = np.asarray(theta, dtype=float)
    tau, sigma2 = _unpack_theta(theta, ss.n_params)
    res = _core_eval(tau, sigma2, ss, want_grad=True, want_fit=False)
    grad = np.empty(ss.n_params + 1)
    grad[: ss.n_params] = res["grad_tau"] * tau
    grad[ss.n_params] = res["grad_sigma2"] * sigma2
    return grad


def _check_full_rank(X: np.ndarray, names) -> None:
    if X.shape[1] > X.shape[0]:
        raise DataError(f"more fixed-effect columns ({X.shape[1]}) than rows ({X.shape[0]})")
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        aliased = [names[j] for j in piv[rank:]]
        raise DataError(f"fixed-effect matrix is rank deficient; aliased columns: {aliased}")


def _moment_start(ss: _SuffStats) -> np.ndarray:
    """Deterministic moment-based starting point on the log scale."""
    XtX = ss.Sxx
    beta0 = scipy.linalg.lstsq(XtX, ss.Sxy)[0]
    rss = max(ss.Syy - 2 * beta0 @ ss.Sxy + beta0 @ XtX @ beta0, 1e-12)
    sigma2_0 = rss / max(ss.n_rows - ss.p, 1)
    theta = np.empty(ss.n_params + 1)
    if ss.n_params:
        # mean squared Z entry per variance parameter, from the Szz diagonals
        col_ms = ss.Szz[:, np.arange(ss.q), np.arange(ss.q)].sum(axis=0) / ss.n_rows
        group_ms = np.zeros(ss.n_params)
        counts = np.zeros(ss.n_params)
        np.add.at(group_ms, ss.vc_map, col_ms)
        np.add.at(counts, ss.vc_map, 1.0)
        group_ms = group_ms / np.maximum(counts, 1.0)
        theta[: ss.n_params] = np.log(0.1 * sigma2_0 / np.maximum(group_ms, 1e-8))
    theta[ss.n_params] = math.log(sigma2_0)
    return theta


def _optimize_reml(ss: _SuffStats, theta0_list, scale: float, maxiter=REML_MAXITER):
    """Multi-start exploration plus restart-chain polish.

    L-BFGS-B can stall on the flat ridges this objective develops in the
    nodal-variance directions, reporting premature relative-reduction stops;
    restarting from the stop point with fresh curvature memory recovers.
    The polish loop reruns until a restart no longer improves the objective
    beyond numerical noise.
    """
    n_par = ss.n_params
    lo_tau = math.log(max(scale, 1e-300)) + math.log(1e-14)
    bounds = [(lo_tau, None)] * n_par + [(math.log(scale * 1e-10), math.log(scale * 1e8))]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])

    def fun(theta):
        with np.errstate(over="ignore"):
            tau, sigma2 = _unpack_theta(theta, n_par)
        if not np.all(np.isfinite(tau)) or not np.isfinite(sigma2):
            return np.inf, np.zeros(n_par + 1)
        res = _core_eval(tau, sigma2, ss, want_grad=True, want_fit=False)
        if not np.isfinite(res["objective"]):
            return np.inf, np.zeros(n_par + 1)
        grad = np.empty(n_par + 1)
        grad[:n_par] = res["grad_tau"] * tau
        grad[n_par] = res["grad_sigma2"] * sigma2
        return res["objective"], grad

    def run(x0, iters):
        return minimize(
            fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"ftol": REML_FTOL, "gtol": REML_GTOL, "maxiter": iters},
        )

    trace = []
    best = None
    for k, t0 in enumerate(theta0_list):
        res = run(np.clip(t0, lo, hi), maxiter)
        trace.append(
            {"stage": f"start{k}", "iterations": int(res.nit), "objective": float(res.fun),
             "converged": bool(res.success), "message": str(res.message)}
        )
        if best is None or res.fun < best.fun:
            best = res

    converged = False
    for chain in range(8):
        prev_f = best.fun
        res = run(best.x, maxiter)
        trace.append(
            {"stage": f"polish{chain}", "iterations": int(res.nit),
             "objective": float(res.fun), "converged": bool(res.success),
             "message": str(res.message)}
        )
        if res.fun <= best.fun:
            best = res
        gain = prev_f - best.fun
        if gain < 1e-7 * max(1.0, abs(best.fun)) and res.success:
            converged = True
            break
        if gain < 1e-9 * max(1.0, abs(best.fun)):
            # no meaningful progress even without a clean stop flag
            converged = res.nit <= 2 or res.success
            break
    trace[-1]["accepted"] = converged
    return best, converged, trace


def reml_fit(design: DesignMatrices, response, prior_weights=None, *,
             warm_start=None, multi_start=True, maxiter=REML_MAXITER) -> LmmFit:
    """Restricted-maximum-likelihood fit of the Gaussian mixed model.

    Maximizes the restricted likelihood over nonnegative variance components
    and sigma^2 > 0 by quasi-Newton iteration on log variances; components
    driven below ``PIN_RATIO * sigma2`` are pinned to exactly zero and the
    rest refit.  Returns GLS fixed effects, their covariance
    (X'V^{-1}X)^{-1}, and per-subject random-effect predictions.
    Deterministic given inputs.
    """
    y = np.asarray(response, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DataError("response contains non-finite values")
    _check_full_rank(design.X, design.x_names)
    ss = _build_suffstats(design, y, prior_weights)
    if ss.n_rows <= ss.p:
        raise DataError("fewer rows than fixed-effect columns")
    scale = max(float(np.var(y)), 1e-12)

    t_moment = _moment_start(ss)
    if warm_start is not None:
        starts = [np.asarray(warm_start, dtype=float)]
        if multi_start:
            starts.append(t_moment)
    else:
        starts = [t_moment]
        if multi_start and ss.n_params:
            up = t_moment.copy(); up[: ss.n_params] += math.log(10.0)
            dn = t_moment.copy(); dn[: ss.n_params] += math.log(0.1)
            starts += [dn, up]

    pinned = np.zeros(ss.n_params, dtype=bool)
    trace_all = []
    best = None
    converged = False
    for _round in range(ss.n_params + 1):
        if pinned.any():
            ss_round = _mask_suffstats(ss, pinned)
            starts_round = [_mask_theta(t, pinned) for t in starts]
        else:
            ss_round, starts_round = ss, starts
        best, converged, trace = _optimize_reml(ss_round, starts_round, scale, maxiter=maxiter)
        trace_all.extend(trace)
        tau_act, sigma2 = _unpack_theta(best.x, ss_round.n_params)
        tau = np.zeros(ss.n_params)
        tau[~pinned] = tau_act
        newly = (~pinned) & (tau < PIN_RATIO * sigma2)
        if not newly.any():
            break
        pinned |= newly
        tau[pinned] = 0.0
        full_theta = np.empty(ss.n_params + 1)
        with np.errstate(divide="ignore"):
            full_theta[: ss.n_params] = np.log(np.maximum(tau, 1e-300))
        full_theta[ss.n_params] = math.log(sigma2)
        starts = [full_theta]

    if not converged:
        raise ConvergenceError("restricted likelihood optimization did not converge", trace_all)

    tau_full = np.zeros(ss.n_params)
    tau_act, sigma2 = _unpack_theta(best.x, int((~pinned).sum()))
    tau_full[~pinned] = tau_act
    tau_full[pinned] = 0.0
    fit_eval = _core_eval(tau_full, sigma2, ss, want_grad=False, want_fit=True)
    vc = VarianceComponents(
        names=_param_names(design), tau=tau_full, sigma2=sigma2, at_bound=pinned.copy()
    )
    return LmmFit(
        beta=fit_eval["beta"],
        beta_names=design.x_names,
        beta_cov=fit_eval["beta_cov"],
        vc=vc,
        blups=fit_eval["blups"],
        subjects=design.subjects,
        reml_loglik=-0.5 * fit_eval["objective"] if np.isfinite(fit_eval["objective"]) else float("nan"),
        n_rows=ss.n_rows,
        residual_df=ss.n_rows - ss.p,
        converged=converged,
        trace=trace_all,
        z_names=design.z_names,
        vc_map=design.vc_map.copy(),
    )


def _param_names(design: DesignMatrices) -> tuple[str, ...]:
    return design.vc_names


def _mask_suffstats(ss: _SuffStats, pinned: np.ndarray) -> _SuffStats:
    """Drop Z columns whose variance parameter is pinned to zero."""
    keep_param = ~pinned
    keep_col = keep_param[ss.vc_map]
    new_param_idx = np.cumsum(keep_param) - 1
    return _SuffStats(
        Szz=ss.Szz[:, keep_col][:, :, keep_col],
        Szx=ss.Szx[:, keep_col],
        Szy=ss.Szy[:, keep_col],
        Sxx=ss.Sxx, Sxy=ss.Sxy, Syy=ss.Syy,
        n_rows=ss.n_rows, n_per_subject=ss.n_per_subject,
        sum_log_w=ss.sum_log_w,
        vc_map=new_param_idx[ss.vc_map[keep_col]],
        n_params=int(keep_param.sum()),
        p=ss.p, q=int(keep_col.sum()),
    )


def _mask_theta(theta: np.ndarray, pinned: np.ndarray) -> np.ndarray:
    n_par = pinned.shape[0]
    return np.concatenate([theta[:n_par][~pinned], theta[n_par:]])


# ---------------------------------------------------------------------------
# Presence model: restricted pseudo-likelihood
# ---------------------------------------------------------------------------


def _separation_check(design: DesignMatrices, y: np.ndarray) -> None:
    for j, name in enumerate(design.x_names):
        col = design.X[:, j]
        if col.min() == col.max():
            continue
        hi0, lo0 = col[y == 0].max(), col[y == 0].min()
        hi1, lo1 = col[y == 1].max(), col[y == 1].min()
        if hi0 < lo1 or hi1 < lo0:
            raise SeparationError(f"column {name!r} perfectly separates the response")


def pql_fit(design: DesignMatrices, response, *, max_outer=PQL_MAX_OUTER,
            tol=PQL_TOL, verbose=False) -> GlmmFit:
    """Logistic mixed-model fit by iterated weighted REML linearization.

    Each outer iteration refreshes the working variate
    ``eta + (y - p) / (p(1-p))`` and weights ``p(1-p)`` and refits the
    Gaussian core; the pseudo-dispersion is estimated.  Converges when the
    relative change of the fixed effects and the variance parameters both
    drop below ``tol``.
    """
    y = np.asarray(response, dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise DataError("presence response must be binary 0/1")
    if y.min() == y.max():
        raise SeparationError("binary response is constant")
    _separation_check(design, y)

    mu = (y + 0.5) / 2.0
    eta = logit(mu)
    beta_prev = None
    theta_prev = None
    inner = None
    outer_used = 0
    d_tau_history = []
    for outer in range(1, max_outer + 1):
        outer_used = outer
        mu = np.clip(expit(eta), 1e-10, 1 - 1e-10)
        w = mu * (1.0 - mu)
        ystar = eta + (y - mu) / w
        inner = reml_fit(
            design, ystar, prior_weights=w,
            warm_start=theta_prev, multi_start=(outer == 1),
        )
        theta_prev = _theta_of(inner)
        b_rows = inner.blups[design.subject_index]
        eta = design.X @ inner.beta + np.einsum("nq,nq->n", design.Z, b_rows) \
            if design.Z.shape[1] else design.X @ inner.beta
        if np.mean(np.abs(eta) > ETA_LIMIT) > 0.01:
            raise SeparationError(
                f"quasi-separation: |linear predictor| > {ETA_LIMIT:g} on more than 1% of rows"
            )
        if beta_prev is not None:
            d_beta = np.max(np.abs(inner.beta - beta_prev) / (1.0 + np.abs(beta_prev)))
            params = np.concatenate([inner.vc.tau, [inner.vc.sigma2]])
            d_tau = np.max(np.abs(params - params_prev) / (1.0 + np.abs(params_prev)))
            d_tau_history.append(d_tau)
            if verbose:
                print(f"  outer {outer}: d_beta={d_beta:.2e} d_tau={d_tau:.2e}")
            if d_beta < tol and d_tau < tol:
                break
            # weakly identified variance directions can approach the fixed
            # point geometrically with a contraction ratio near 1; accept a
            # monotone vanishing tail once the fixed effects have settled
            tail = d_tau_history[-4:]
            if (d_beta < tol and d_tau < 100 * tol and len(tail) == 4
                    and all(a > b for a, b in zip(tail, tail[1:]))):
                inner.trace.append({"stage": "outer-tail", "d_tau": float(d_tau),
                                    "d_beta": float(d_beta), "accepted": True})
                break
        beta_prev = inner.beta.copy()
        params_prev = np.concatenate([inner.vc.tau, [inner.vc.sigma2]])
    else:
        raise ConvergenceError(
            f"pseudo-likelihood outer loop did not converge in {max_outer} iterations",
            inner.trace if inner else [],
        )

    mu = np.clip(expit(eta), 1e-10, 1 - 1e-10)
    return GlmmFit(
        beta=inner.beta, beta_names=inner.beta_names, beta_cov=inner.beta_cov,
        vc=inner.vc, blups=inner.blups, subjects=inner.subjects,
        reml_loglik=inner.reml_loglik, n_rows=inner.n_rows,
        residual_df=inner.residual_df, converged=True, trace=inner.trace,
        z_names=inner.z_names, vc_map=inner.vc_map,
        working_weights=mu * (1 - mu), fitted_probs=mu, outer_iterations=outer_used,
    )


def _theta_of(fit: LmmFit) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_tau = np.log(np.maximum(fit.vc.tau, 1e-300))
    return np.concatenate([log_tau, [math.log(fit.vc.sigma2)]])


# ---------------------------------------------------------------------------
# Zero-variance pruning and the two-part driver
# ---------------------------------------------------------------------------


def drop_zero_variance(fit: LmmFit, spec: ModelSpec) -> ModelSpec:
    """Reduced spec without random terms whose variance is pinned at zero.

    Scalar terms are removed from the random list; individually pinned node
    indicators are added to the exclusion set.  Callers refit with the
    returned spec for explanation, comparison, and thresholding workflows;
    prediction and simulation keep the full model.
    """
    dropped_terms = []
    dropped_nodes = []
    for name, bound in zip(fit.vc.names, fit.vc.at_bound):
        if not bound:
            continue
        if name.startswith("node_"):
            dropped_nodes.append(int(name.split("_", 1)[1]))
        else:
            dropped_terms.append(name)
    return spec.without_random(dropped_terms, dropped_nodes)


def _infer_n_nodes(table) -> int:
    return int(table["node_k"].max()) + 1


def fit_presence(table, spec: ModelSpec, n_nodes: int | None = None,
                 tol: float = PQL_TOL, max_outer: int = PQL_MAX_OUTER) -> GlmmFit:
    from .dyaddesign import build_design

    n_nodes = n_nodes or _infer_n_nodes(table)
    design = build_design(table, spec, n_nodes)
    y = table["R"].to_numpy(dtype=float)
    if y.min() == y.max():
        raise DataError("presence response constant")
    return pql_fit(design, y, tol=tol, max_outer=max_outer)


def fit_strength(table, spec: ModelSpec, n_nodes: int | None = None) -> LmmFit:
    from .dyaddesign import build_design

    n_nodes = n_nodes or _infer_n_nodes(table)
    present = table[table["R"] == 1]
    if not len(present):
        raise DataError("no rows with a present edge; strength model is empty")
    design = build_design(present, spec, n_nodes)
    return reml_fit(design, present["S"].to_numpy(dtype=float))


def fit_two_part(table, spec: ModelSpec, n_nodes: int | None = None,
                 centering=None, pql_tol: float = PQL_TOL,
                 pql_max_outer: int = PQL_MAX_OUTER) -> TwoPartFit:
    """Fit part I (presence, all rows) and part II (strength, present rows).

    ``table`` must already be centered; pass the matching CenteringRecord so
    downstream prediction can translate raw covariate values.  When
    ``centering`` is omitted the table is centered here.
    """
    from .dyaddesign import center_covariates

    n_nodes = n_nodes or _infer_n_nodes(table)
    if centering is None:
        table, centering = center_covariates(table)
    try:
        presence = fit_presence(table, spec, n_nodes, tol=pql_tol,
                                max_outer=pql_max_outer)
    except (DataError, SeparationError, ConvergenceError) as e:
        raise type(e)(f"presence part: {e}") from e
    try:
        strength = fit_strength(table, spec, n_nodes)
    except (DataError, ConvergenceError) as e:
        raise type(e)(f"strength part: {e}") from e
    return TwoPartFit(
        presence=presence, strength=strength, spec=spec,
        centering=centering, n_nodes=n_nodes,
    )
