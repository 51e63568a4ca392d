"""Long-format dyad table and fixed/random design realization.

One table row per (subject, node pair j<k) carries the presence indicator R,
the transformed strength S (only when R=1), dyad-level network covariates
(averages of nodal metrics, absolute degree difference, whole-network
modularity replicated), spatial distance in decimeters, and the replicated
subject covariates.

Continuous covariates are grand-mean centered before model fitting; the
squared-distance column is formed from centered distance and then centered
itself.  ``build_design`` turns a centered table plus a ModelSpec into the
fixed matrix X and the per-subject random matrix Z with its
variance-component map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .netdata import DataError, DistanceMatrix

NET_TERMS = ("C_avg", "E_avg", "k_diff", "Q_net", "l_avg")
CONTINUOUS_TERMS = NET_TERMS + ("dist", "education")

DEFAULT_FIXED = (
    ("intercept",)
    + NET_TERMS
    + ("group",)
    + tuple(f"group:{t}" for t in NET_TERMS)
    + ("group:sex", "sex", "education", "dist", "dist2")
)
DEFAULT_RANDOM = ("intercept",) + NET_TERMS + ("dist", "dist2", "nodes")


class SpecError(ValueError):
    """Model specification names an unknown term or is internally inconsistent."""


def fisher_z(r):
    """atanh of a correlation; maps (-1, 1) onto the real line."""
    r = np.asarray(r, dtype=float)
    if np.any(np.abs(r) >= 1.0):
        raise DataError("fisher_z requires |r| < 1")
    out = np.arctanh(r)
    return float(out) if out.ndim == 0 else out


def inv_fisher_z(z):
    """tanh; inverse of :func:`fisher_z` to floating-point precision."""
    z = np.asarray(z, dtype=float)
    if np.any(np.isnan(z)):
        raise DataError("inv_fisher_z requires finite input")
    out = np.tanh(z)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ModelSpec:
    """Declared fixed-effect and random-effect structure.

    Fixed terms are column names of the dyad table, "intercept", or
    products "a:b".  Random terms are covariate names granted per-subject
    random slopes, "intercept", or "nodes" for the per-node indicator block.
    ``excluded_random_nodes`` removes individual node indicators (used when
    zero-variance components are pruned); ``shared_node_variance`` makes all
    node indicators share a single variance parameter instead of one each.
    """

    fixed: tuple[str, ...] = DEFAULT_FIXED
    random: tuple[str, ...] = DEFAULT_RANDOM
    grouping: str = "subject_id"
    shared_node_variance: bool = False
    excluded_random_nodes: tuple[int, ...] = ()
    response: str = "both"  # presence | strength | both

    def validate(self, columns) -> None:
        cols = set(columns)
        for term in self.fixed:
            parts = term.split(":") if term != "intercept" else []
            for p in parts:
                if p not in cols:
                    raise SpecError(f"fixed term {term!r} references unknown covariate {p!r}")
        for term in self.random:
            if term in ("intercept", "nodes"):
                continue
            if term not in cols:
                raise SpecError(f"random term {term!r} is not a table covariate")
        if self.grouping not in cols:
            raise SpecError(f"grouping column {self.grouping!r} missing from table")
        if self.response not in ("presence", "strength", "both"):
            raise SpecError(f"unknown response selector {self.response!r}")

    def without_random(self, dropped_terms=(), dropped_nodes=()) -> "ModelSpec":
        random = tuple(t for t in self.random if t not in set(dropped_terms))
        excluded = tuple(sorted(set(self.excluded_random_nodes) | set(int(v) for v in dropped_nodes)))
        return replace(self, random=random, excluded_random_nodes=excluded)

    def to_dict(self) -> dict:
        return {
            "fixed": list(self.fixed),
            "random": list(self.random),
            "grouping": self.grouping,
            "shared_node_variance": self.shared_node_variance,
            "excluded_random_nodes": list(self.excluded_random_nodes),
            "response": self.response,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            fixed=tuple(d.get("fixed", DEFAULT_FIXED)),
            random=tuple(d.get("random", DEFAULT_RANDOM)),
            grouping=d.get("grouping", "subject_id"),
            shared_node_variance=bool(d.get("shared_node_variance", False)),
            excluded_random_nodes=tuple(int(v) for v in d.get("excluded_random_nodes", ())),
            response=d.get("response", "both"),
        )

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "ModelSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class CenteringRecord:
    """Means subtracted during centering plus raw covariate ranges."""

    means: dict[str, float]
    dist2_mean: float
    ranges: dict[str, tuple[float, float]]
    leverage_fallback_dyads: int = 0

    def to_dict(self) -> dict:
        return {
            "means": dict(self.means),
            "dist2_mean": self.dist2_mean,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "leverage_fallback_dyads": self.leverage_fallback_dyads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CenteringRecord":
        return cls(
            means={k: float(v) for k, v in d["means"].items()},
            dist2_mean=float(d["dist2_mean"]),
            ranges={k: (float(v[0]), float(v[1])) for k, v in d["ranges"].items()},
            leverage_fallback_dyads=int(d.get("leverage_fallback_dyads", 0)),
        )


def assemble_covariate_rows(nodal_by_subject, network_by_subject, covs, dist: DistanceMatrix) -> pd.DataFrame:
    """Dyad-level covariate rows (no responses) for every subject and j<k pair.

    ``nodal_by_subject`` / ``network_by_subject`` map subject_id to the metric
    containers; ``covs`` is a sequence of SubjectCovariates fixing subject
    order.
    """
    n = dist.n
    ju, ku = np.triu_indices(n, k=1)
    d = dist.values_dm[ju, ku]
    frames = []
    for cov in covs:
        sid = cov.subject_id
        if sid not in nodal_by_subject:
            raise DataError(f"missing metrics for subject {sid}")
        nod = nodal_by_subject[sid]
        netm = network_by_subject[sid]
        if nod.degree.shape[0] != n:
            raise DataError(
                f"subject {sid}: metrics cover {nod.degree.shape[0]} nodes, expected {n}"
            )
        lev = nod.leverage
        frames.append(
            pd.DataFrame(
                {
                    "subject_id": sid,
                    "node_j": ju,
                    "node_k": ku,
                    "C_avg": (nod.clustering[ju] + nod.clustering[ku]) / 2.0,
                    "E_avg": (nod.efficiency[ju] + nod.efficiency[ku]) / 2.0,
                    "k_diff": np.abs(nod.degree[ju] - nod.degree[ku]),
                    "Q_net": netm.modularity,
                    "l_avg": (lev[ju] + lev[ku]) / 2.0,
                    "dist": d,
                    "dist2": d**2,
                    "group": cov.group,
                    "sex": cov.sex,
                    "education": cov.education_years,
                }
            )
        )
    table = pd.concat(frames, ignore_index=True)
    return table


def attach_responses(table: pd.DataFrame, networks) -> pd.DataFrame:
    """Add presence R and transformed strength S columns from the networks."""
    by_id = {net.subject_id: net for net in networks}
    r_col = np.empty(len(table), dtype=np.int8)
    s_col = np.full(len(table), np.nan)
    for sid, idx in table.groupby("subject_id", sort=False).indices.items():
        net = by_id.get(sid)
        if net is None:
            raise DataError(f"missing network for subject {sid}")
        sub = table.iloc[idx]
        w = net.weights[sub["node_j"].to_numpy(), sub["node_k"].to_numpy()]
        r = w > 0
        r_col[idx] = r
        s_col[idx[r]] = fisher_z(w[r])
    out = table.copy()
    out["R"] = r_col
    out["S"] = s_col
    return out


def build_dyad_table(networks, metrics_by_subject, covs, dist: DistanceMatrix) -> pd.DataFrame:
    """Full raw dyad table: covariates plus responses, one row per dyad.

    ``metrics_by_subject`` maps subject_id to ``(NodalMetrics, NetworkMetrics)``
    as returned by :func:`twopartnet.graphmetrics.metric_suite`.
    """
    ids = {net.subject_id for net in networks}
    cov_ids = {cov.subject_id for cov in covs}
    for cov in covs:
        if cov.subject_id not in ids:
            raise DataError(f"missing network for subject {cov.subject_id}")
    orphans = sorted(ids - cov_ids)
    if orphans:
        raise DataError(f"missing subject covariates for {orphans}")
    nodal = {sid: m[0] for sid, m in metrics_by_subject.items()}
    netm = {sid: m[1] for sid, m in metrics_by_subject.items()}
    table = assemble_covariate_rows(nodal, netm, covs, dist)
    return attach_responses(table, networks)


def center_covariates(table: pd.DataFrame):
    """Grand-mean center continuous covariates; binary covariates untouched.

    Returns ``(centered_table, CenteringRecord)``.  The squared-distance
    column is computed from centered distance and then centered itself.
    Dyads whose leverage average is undefined (an isolated endpoint) fall
    back to 0 after centering; the count is recorded.
    """
    out = table.copy()
    means: dict[str, float] = {}
    ranges: dict[str, tuple[float, float]] = {}
    n_fallback = 0
    for col in CONTINUOUS_TERMS:
        vals = out[col].to_numpy(dtype=float)
        finite = np.isfinite(vals)
        mean = float(vals[finite].mean())
        ranges[col] = (float(vals[finite].min()), float(vals[finite].max()))
        centered = vals - mean
        if col == "l_avg" and (~finite).any():
            n_fallback = int((~finite).sum())
            centered[~finite] = 0.0
        out[col] = centered
        means[col] = mean
    cd = out["dist"].to_numpy(dtype=float)
    d2 = cd**2
    d2_mean = float(d2.mean())
    out["dist2"] = d2 - d2_mean
    ranges["dist2"] = (float(d2.min() - d2_mean), float(d2.max() - d2_mean))
    record = CenteringRecord(
        means=means, dist2_mean=d2_mean, ranges=ranges,
        leverage_fallback_dyads=n_fallback,
    )
    return out, record


@dataclass
class DesignMatrices:
    """Realized fixed matrix X and per-subject random matrix Z.

    ``vc_map[c]`` gives the variance-parameter index of Z column ``c``;
    ``vc_names`` names each variance parameter.  Rows are grouped by
    ``subject_index`` (codes into ``subjects``), which makes the implied
    overall random design block-diagonal by subject.
    """

    X: np.ndarray
    Z: np.ndarray
    x_names: tuple[str, ...]
    z_names: tuple[str, ...]
    vc_map: np.ndarray
    vc_names: tuple[str, ...]
    subjects: tuple[str, ...]
    subject_index: np.ndarray
    node_pairs: np.ndarray = field(repr=False, default=None)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]


def _term_column(rows: pd.DataFrame, term: str) -> np.ndarray:
    if term == "intercept":
        return np.ones(len(rows))
    if ":" in term:
        a, b = term.split(":", 1)
        return _term_column(rows, a) * _term_column(rows, b)
    if term not in rows.columns:
        raise SpecError(f"term {term!r} references unknown covariate")
    return rows[term].to_numpy(dtype=float)


def build_design(rows: pd.DataFrame, spec: ModelSpec, n_nodes: int) -> DesignMatrices:
    """Realize X and Z from a centered dyad table.

    Z columns come in spec order: intercept, the random net/dist slopes, then
    one indicator column per (non-excluded) node, where a dyad row has 1 at
    its two member nodes.  With all default terms and n_nodes=90 this yields
    q = 1 + 5 + 2 + 90 = 98 variance parameters.
    """
    spec.validate(rows.columns)
    X = np.column_stack([_term_column(rows, t) for t in spec.fixed])
    z_cols, z_names = [], []
    vc_map, vc_names = [], []
    excluded = set(spec.excluded_random_nodes)
    for term in spec.random:
        if term == "nodes":
            shared_idx = None
            if spec.shared_node_variance:
                vc_names.append("nodes")
                shared_idx = len(vc_names) - 1
            nj = rows["node_j"].to_numpy()
            nk = rows["node_k"].to_numpy()
            for v in range(n_nodes):
                if v in excluded:
                    continue
                z_cols.append(((nj == v) | (nk == v)).astype(float))
                z_names.append(f"node_{v}")
                if shared_idx is None:
                    vc_names.append(f"node_{v}")
                    vc_map.append(len(vc_names) - 1)
                else:
                    vc_map.append(shared_idx)
        else:
            z_cols.append(_term_column(rows, term))
            z_names.append(term)
            vc_names.append(term)
            vc_map.append(len(vc_names) - 1)
    Z = np.column_stack(z_cols) if z_cols else np.empty((len(rows), 0))
    subjects = tuple(dict.fromkeys(rows[spec.grouping].astype(str)))
    code = {s: i for i, s in enumerate(subjects)}
    subject_index = rows[spec.grouping].astype(str).map(code).to_numpy(dtype=np.int64)
    node_pairs = rows[["node_j", "node_k"]].to_numpy(dtype=np.int64) if "node_j" in rows else None
    return DesignMatrices(
        X=X,
        Z=Z,
        x_names=tuple(spec.fixed),
        z_names=tuple(z_names),
        vc_map=np.asarray(vc_map, dtype=np.int64),
        vc_names=tuple(vc_names),
        subjects=subjects,
        subject_index=subject_index,
        node_pairs=node_pairs,
    )
