"""Prediction curves, two-part network simulation, and goodness of fit.

Prediction intervals target a single new subject's dyad: on top of the
fixed-effect estimation variance they include the random-effect variance of
the relevant design row and, on the strength scale, the residual variance.
Simulation draws fresh subject-level random effects per network (optionally
reusing fitted per-subject predictions), samples edge presence from the
logistic part, and samples transformed strengths from the Gaussian part with
rejection to the positive-weight support.

Per-network random streams are counter-based, derived from (seed, network
index), so ensembles are bitwise reproducible regardless of scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import t as t_dist

from .dyaddesign import build_design, inv_fisher_z
from .graphmetrics import NetworkMetrics, metric_suite
from .mixedfit import TwoPartFit
from .netdata import DataError, SubjectNetwork

RANGE_WARN_FACTOR = 3.0   # warn when the grid leaves a window 3x the observed span
MAX_REJECTION_ROUNDS = 1000


@dataclass
class PredictionCurve:
    """Point predictions and 95% prediction bounds over a covariate grid."""

    vary: str
    grid: np.ndarray                  # raw (uncentered) covariate values
    scale: str                        # "probability" | "strength"
    groups: dict                      # level -> dict(point=, lo=, hi=)
    warnings: list[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for level, cols in self.groups.items():
            frames.append(
                pd.DataFrame(
                    {
                        "group": level,
                        self.vary: self.grid,
                        "point": cols["point"],
                        "lo": cols["lo"],
                        "hi": cols["hi"],
                    }
                )
            )
        return pd.concat(frames, ignore_index=True)


@dataclass
class SimulatedEnsemble:
    """Simulated networks plus per-network metric summaries."""

    networks: tuple
    metrics: tuple
    seed: int
    settings: dict
    rejection_fallbacks: int = 0

    @property
    def n_sims(self) -> int:
        return len(self.networks)


@dataclass
class GofTable:
    """Observed-versus-simulated network metric summary."""

    rows: list        # (label, obs_mean, obs_se, sim_mean, sim_se)
    n_observed: int
    n_simulated: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "metric": [r[0] for r in self.rows],
                f"observed_n{self.n_observed}": [_mean_se_cell(r[1], r[2]) for r in self.rows],
                f"simulated_n{self.n_simulated}": [_mean_se_cell(r[3], r[4]) for r in self.rows],
                "observed_mean": [r[1] for r in self.rows],
                "observed_se": [r[2] for r in self.rows],
                "simulated_mean": [r[3] for r in self.rows],
                "simulated_se": [r[4] for r in self.rows],
            }
        )


def _mean_se_cell(mean: float, se: float) -> str:
    return f"{mean:.3f} ({se:.3f})"


def _vc_lookup(vc) -> dict:
    return dict(zip(vc.names, vc.tau))


def _nodal_variance(vc, dyad, shared: bool) -> float:
    taus = _vc_lookup(vc)
    if shared:
        tau_nodes = taus.get("nodes", 0.0)
        return 2.0 * tau_nodes
    node_taus = [v for n, v in taus.items() if n.startswith("node_")]
    if not node_taus:
        return 0.0
    if dyad is not None:
        j, k = dyad
        return taus.get(f"node_{j}", 0.0) + taus.get(f"node_{k}", 0.0)
    return 2.0 * float(np.mean(node_taus))


def _design_row(fit: TwoPartFit, vary: str, value_raw: float, group_level, others_at):
    """Centered fixed-effect row x and scalar random-variance design pieces."""
    means = fit.centering.means
    values = {}
    for name in means:
        raw = (others_at or {}).get(name)
        values[name] = (raw - means[name]) if raw is not None else 0.0
    values["dist2"] = 0.0
    values["group"] = float(group_level)
    values["sex"] = float((others_at or {}).get("sex", 0.0))
    if vary == "dist":
        cd = value_raw - means["dist"]
        values["dist"] = cd
        values["dist2"] = cd * cd - fit.centering.dist2_mean
    elif vary in means:
        values[vary] = value_raw - means[vary]
    elif vary in ("group", "sex"):
        values[vary] = float(value_raw)
    else:
        raise DataError(f"cannot vary unknown covariate {vary!r}")

    def term_value(term: str) -> float:
        if term == "intercept":
            return 1.0
        if ":" in term:
            a, b = term.split(":", 1)
            return term_value(a) * term_value(b)
        if term not in values:
            raise DataError(f"fixed term {term!r} has no value for prediction")
        return values[term]

    x = np.array([term_value(t) for t in fit.spec.fixed])
    z_scalar = {t: term_value(t) for t in fit.spec.random if t != "nodes"}
    return x, z_scalar


def _random_variance(part_fit, z_scalar: dict, dyad, shared_nodes) -> float:
    taus = _vc_lookup(part_fit.vc)
    var = 0.0
    for term, zval in z_scalar.items():
        var += zval * zval * taus.get(term, 0.0)
    var += _nodal_variance(part_fit.vc, dyad, shared_nodes)
    return var


def predict_curve(fit: TwoPartFit, vary: str, grid, group_levels=(0, 1),
                  scale: str = "probability", others_at: dict | None = None,
                  dyad: tuple | None = None, level: float = 0.95) -> PredictionCurve:
    """Prediction curve with pointwise prediction bounds for a new subject.

    ``grid`` is in raw covariate units; all other covariates sit at their
    centered means (binary covariates at 0) unless overridden via
    ``others_at``.  On the probability scale the linear-predictor interval
    adds the random-effect variance of the design row; on the strength scale
    it also adds the residual variance, and bounds are mapped back to the
    correlation scale.  Nodal random effects contribute the given dyad's two
    variances, or twice the average nodal variance for a generic dyad.
    """
    if scale not in ("probability", "strength"):
        raise DataError(f"unknown prediction scale {scale!r}")
    grid = np.asarray(grid, dtype=float)
    part_fit = fit.presence if scale == "probability" else fit.strength
    crit = float(t_dist.ppf(0.5 + level / 2.0, part_fit.residual_df))
    warnings = []
    rng_lo, rng_hi = fit.centering.ranges.get(vary, (-math.inf, math.inf))
    span = rng_hi - rng_lo
    if math.isfinite(span) and span > 0:
        mid = (rng_hi + rng_lo) / 2.0
        lo_ok = mid - RANGE_WARN_FACTOR * span / 2.0
        hi_ok = mid + RANGE_WARN_FACTOR * span / 2.0
        outside = grid[(grid < lo_ok) | (grid > hi_ok)]
        if outside.size:
            warnings.append(
                f"{vary}: {outside.size} grid values lie outside 3x the observed "
                f"span [{rng_lo:g}, {rng_hi:g}]"
            )

    groups = {}
    for level_g in group_levels:
        point = np.empty(len(grid))
        lo = np.empty(len(grid))
        hi = np.empty(len(grid))
        for i, v in enumerate(grid):
            x, z_scalar = _design_row(fit, vary, float(v), level_g, others_at)
            eta = float(x @ part_fit.beta)
            var = float(x @ part_fit.beta_cov @ x)
            var += _random_variance(part_fit, z_scalar, dyad, fit.spec.shared_node_variance)
            if scale == "strength":
                var += part_fit.vc.sigma2
            half = crit * math.sqrt(max(var, 0.0))
            point[i], lo[i], hi[i] = eta, eta - half, eta + half
        if scale == "probability":
            point, lo, hi = expit(point), expit(lo), expit(hi)
        else:
            point, lo, hi = inv_fisher_z(point), inv_fisher_z(lo), inv_fisher_z(hi)
        groups[level_g] = {"point": point, "lo": lo, "hi": hi}
    return PredictionCurve(vary=vary, grid=grid, scale=scale, groups=groups,
                           warnings=warnings)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def _sim_templates(fit: TwoPartFit, table: pd.DataFrame, source: str):
    """Per-network covariate templates: (label, X, Z, node_pairs, subject)."""
    subjects = list(dict.fromkeys(table["subject_id"].astype(str)))
    by_subject = {}
    for sid in subjects:
        rows = table[table["subject_id"].astype(str) == sid]
        rows = rows.sort_values(["node_j", "node_k"], kind="stable")
        d = build_design(rows, fit.spec, fit.n_nodes)
        by_subject[sid] = (d.X, d.Z, d.node_pairs)

    if source == "cycle":
        return [(sid, *by_subject[sid], sid) for sid in subjects]
    if source.startswith("subject:"):
        sid = source.split(":", 1)[1]
        if sid not in by_subject:
            raise DataError(f"unknown subject {sid!r} in covariate source")
        return [(sid, *by_subject[sid], sid)]
    if source.startswith("group-mean:"):
        g = int(source.split(":", 1)[1])
        members = [sid for sid in subjects
                   if int(table.loc[table["subject_id"].astype(str) == sid, "group"].iloc[0]) == g]
        if not members:
            raise DataError(f"no subjects with group={g}")
        X = np.mean([by_subject[sid][0] for sid in members], axis=0)
        Z = np.mean([by_subject[sid][1] for sid in members], axis=0)
        pairs = by_subject[members[0]][2]
        return [(f"group{g}-mean", X, Z, pairs, None)]
    raise DataError(f"unknown covariate source {source!r} "
                    "(use cycle, subject:<id>, or group-mean:<level>)")


def _draw_network(X, Z, pairs, n_nodes, beta_r, d_r, beta_s, d_s, sigma2, rng,
                  b_r=None, b_s=None):
    """Sample one network's weight matrix; returns (weights, n_fallback)."""
    q = Z.shape[1]
    if b_r is None:
        b_r = rng.standard_normal(q) * np.sqrt(d_r)
    if b_s is None:
        b_s = rng.standard_normal(q) * np.sqrt(d_s)
    eta_r = X @ beta_r + (Z @ b_r if q else 0.0)
    p = expit(eta_r)
    present = rng.uniform(size=len(p)) < p
    eta_s = X @ beta_s + (Z @ b_s if q else 0.0)
    sd = math.sqrt(sigma2)
    weights = np.zeros((n_nodes, n_nodes))
    strengths = np.zeros(len(p))
    remaining = np.flatnonzero(present)
    n_fallback = 0
    if sd > 0:
        rounds = 0
        while remaining.size and rounds < MAX_REJECTION_ROUNDS:
            draw = eta_s[remaining] + sd * rng.standard_normal(remaining.size)
            ok = draw > 0
            strengths[remaining[ok]] = draw[ok]
            remaining = remaining[~ok]
            rounds += 1
        if remaining.size:
            n_fallback = int(remaining.size)
            strengths[remaining] = np.nextafter(0.0, 1.0)
    else:
        vals = eta_s[remaining]
        good = vals > 0
        strengths[remaining[good]] = vals[good]
        bad = remaining[~good]
        n_fallback = int(bad.size)
        strengths[bad] = np.nextafter(0.0, 1.0)
    w_vals = np.where(present, inv_fisher_z(strengths), 0.0)
    weights[pairs[:, 0], pairs[:, 1]] = w_vals
    weights[pairs[:, 1], pairs[:, 0]] = w_vals
    return weights, n_fallback


def simulate_networks(fit: TwoPartFit, table: pd.DataFrame, n_sims: int, seed: int,
                      source: str = "cycle", use_blups: bool = False,
                      louvain_seed: int = 0, leverage_degree: str = "weighted",
                      compute_metrics: bool = True) -> SimulatedEnsemble:
    """Simulate networks from the fitted joint presence/strength distribution.

    ``table`` is the centered dyad table the model was fitted on; ``source``
    selects the per-dyad covariate rows (cycling over observed subjects, one
    subject, or a group-mean template).  Each simulated network draws fresh
    random effects; ``use_blups`` substitutes the source subject's predicted
    effects instead (requires a subject-backed source).
    """
    if n_sims < 1:
        raise DataError("n_sims must be at least 1")
    templates = _sim_templates(fit, table, source)
    pres, stre = fit.presence, fit.strength
    d_r = pres.vc.tau[pres.vc_map] if pres.vc_map is not None and len(pres.vc_map) else np.zeros(0)
    d_s = stre.vc.tau[stre.vc_map] if stre.vc_map is not None and len(stre.vc_map) else np.zeros(0)
    q_template = templates[0][2].shape[1]
    if len(d_r) != q_template or len(d_s) != q_template:
        raise DataError(
            "fit random design does not match the spec's columns; simulate from "
            "the full-model fit, not a per-part reduced fit"
        )
    subj_pos_r = {s: i for i, s in enumerate(pres.subjects)}
    subj_pos_s = {s: i for i, s in enumerate(stre.subjects)}

    networks = []
    metrics = []
    fallbacks = 0
    for s in range(n_sims):
        label, X, Z, pairs, sid = templates[s % len(templates)]
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(s,)))
        )
        b_r = b_s = None
        if use_blups:
            if sid is None:
                raise DataError("use_blups requires a subject-backed covariate source")
            b_r = pres.blups[subj_pos_r[sid]]
            b_s = stre.blups[subj_pos_s[sid]] if sid in subj_pos_s else np.zeros(Z.shape[1])
        w, nfb = _draw_network(
            X, Z, pairs, fit.n_nodes, pres.beta, d_r, stre.beta, d_s,
            stre.vc.sigma2, rng, b_r=b_r, b_s=b_s,
        )
        fallbacks += nfb
        net = SubjectNetwork(subject_id=f"sim{s:04d}_{label}", weights=w)
        networks.append(net)
        if compute_metrics:
            _, netm = metric_suite(net, louvain_seed=louvain_seed,
                                   leverage_degree=leverage_degree)
            metrics.append(netm)
    return SimulatedEnsemble(
        networks=tuple(networks), metrics=tuple(metrics), seed=seed,
        settings={"source": source, "use_blups": use_blups,
                  "louvain_seed": louvain_seed, "leverage_degree": leverage_degree},
        rejection_fallbacks=fallbacks,
    )


# ---------------------------------------------------------------------------
# Goodness of fit
# ---------------------------------------------------------------------------

GOF_METRICS = (
    ("Clustering coefficient (C)", "clustering"),
    ("Global Efficiency (E_glob)", "efficiency"),
    ("Characteristic path length (L)", "path_length"),
    ("Mean Nodal Degree (K)", "degree"),
    ("Leverage Centrality (l)", "leverage"),
    ("Modularity (Q)", "modularity"),
)


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return mean, se


def gof_compare(observed, ensemble: SimulatedEnsemble, louvain_seed: int = 0,
                leverage_degree: str = "weighted") -> GofTable:
    """Observed-versus-simulated means (SE) of the network metric summary.

    ``observed`` is a sequence of SubjectNetwork or precomputed
    NetworkMetrics; simulated metrics come from the ensemble, computed with
    the same settings.
    """
    if not len(observed):
        raise DataError("observed arm is empty")
    if not len(ensemble.metrics):
        raise DataError("ensemble carries no metrics (compute_metrics=False?)")
    obs_metrics = []
    for item in observed:
        if isinstance(item, NetworkMetrics):
            obs_metrics.append(item)
        else:
            _, netm = metric_suite(item, louvain_seed=louvain_seed,
                                   leverage_degree=leverage_degree)
            obs_metrics.append(netm)
    rows = []
    for label, attr in GOF_METRICS:
        obs_mean, obs_se = _mean_se([getattr(m, attr) for m in obs_metrics])
        sim_mean, sim_se = _mean_se([getattr(m, attr) for m in ensemble.metrics])
        rows.append((label, obs_mean, obs_se, sim_mean, sim_se))
    return GofTable(rows=rows, n_observed=len(obs_metrics), n_simulated=len(ensemble.metrics))
