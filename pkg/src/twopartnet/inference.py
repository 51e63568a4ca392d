"""Wald inference, parameter reports, group classification, and thresholding.

All tests use the residual approximation for the denominator degrees of
freedom (rows minus fixed-effect columns of the relevant part); with dyad
tables in the 10^5-row range the choice is numerically immaterial.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.stats import f as f_dist

from .dyaddesign import ModelSpec, build_design, center_covariates
from .mixedfit import LmmFit, TwoPartFit, reml_fit, _theta_of
from .netdata import DataError

_SHORT = {
    "intercept": "0",
    "C_avg": "C",
    "E_avg": "Eglob",
    "k_diff": "k",
    "Q_net": "Q",
    "l_avg": "l",
    "sex": "sex",
    "education": "educ",
    "dist": "dist",
    "dist2": "dist^2",
}


@dataclass(frozen=True)
class TestResult:
    """A Wald test with the residual F approximation."""

    estimate: float
    se: float
    f_stat: float
    num_df: int
    den_df: int
    p_value: float


@dataclass
class ReportRow:
    part: str          # "presence" | "strength"
    label: str         # display name, e.g. "β_r,dist"
    term: str          # design column name
    estimate: float
    se: float
    p_value: float
    interpretation: str


@dataclass
class ComparisonReport:
    rows: list[ReportRow]
    notes: list[str] = field(default_factory=list)
    coi_label: str = "age"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "parameter": [r.label for r in self.rows],
                "estimate": [r.estimate for r in self.rows],
                "se": [r.se for r in self.rows],
                "p_value": [r.p_value for r in self.rows],
            }
        )


def wald_f_test(fit: LmmFit, contrast) -> TestResult:
    """F test of C beta = 0 with denominator df = rows - fixed columns.

    ``contrast`` is a length-p vector or a (k, p) matrix over the fixed
    effects.  For 1-df tests F equals (estimate/SE)^2 exactly.
    """
    C = np.atleast_2d(np.asarray(contrast, dtype=float))
    p = fit.beta.shape[0]
    if C.shape[1] != p:
        raise DataError(f"contrast has {C.shape[1]} columns, fit has {p} fixed effects")
    mid = C @ fit.beta_cov @ C.T
    k = C.shape[0]
    eigvals = scipy.linalg.eigvalsh(mid)
    tol = max(eigvals.max(), 0.0) * k * np.finfo(float).eps
    rank = int((eigvals > tol).sum())
    if rank < k:
        _, _, piv = scipy.linalg.qr(mid, pivoting=True)
        redundant = sorted(int(i) for i in piv[rank:])
        raise DataError(f"singular contrast covariance; redundant contrast rows: {redundant}")
    cb = C @ fit.beta
    f_stat = float(cb @ scipy.linalg.solve(mid, cb, assume_a="pos")) / k
    den_df = fit.residual_df
    p_value = float(f_dist.sf(f_stat, k, den_df))
    if k == 1:
        est = float(cb[0])
        se = float(np.sqrt(mid[0, 0]))
    else:
        est, se = float("nan"), float("nan")
    return TestResult(estimate=est, se=se, f_stat=f_stat, num_df=k,
                      den_df=den_df, p_value=p_value)


def _coef_test(fit: LmmFit, term: str) -> TestResult:
    j = fit.beta_names.index(term)
    c = np.zeros(len(fit.beta_names))
    c[j] = 1.0
    return wald_f_test(fit, c)


def term_label(part: str, term: str, coi_label: str = "age") -> str:
    """Display label for a fixed-effect term, e.g. beta_r,age x C."""
    letter = "r" if part == "presence" else "s"
    if ":" in term:
        a, b = term.split(":", 1)
        sa = coi_label if a == "group" else _SHORT.get(a, a)
        sb = coi_label if b == "group" else _SHORT.get(b, b)
        short = f"{sa}×{sb}"
    elif term == "group":
        short = coi_label
    else:
        short = _SHORT.get(term, term)
    return f"β_{letter},{short}"


def _interpret(part: str, term: str, coi_label: str) -> str:
    what = "log odds of an edge being present" if part == "presence" else \
        "mean transformed strength of a present edge"
    if term == "intercept":
        return (f"Baseline {what} for a reference-level dyad "
                "(binary covariates 0, continuous covariates at their means).")
    if term == "group":
        return f"Difference in the {what} between {coi_label} groups, at covariate means."
    if term == "sex":
        return f"Difference in the {what} associated with sex=1, reference group."
    if term == "education":
        return f"Change in the {what} per additional year of education."
    if term == "dist":
        return f"Linear component of the change in the {what} per decimeter of inter-node distance."
    if term == "dist2":
        return f"Quadratic component of the change in the {what} in inter-node distance (dm^2)."
    if term in ("group:sex", "sex:group"):
        return (f"Additional difference in the {what} for sex=1 dyads in the "
                f"{coi_label}=1 group, beyond the main group and sex effects.")
    if ":" in term:
        a, b = term.split(":", 1)
        other = b if a == "group" else a
        return (f"Additional change in the {what} per unit increase in "
                f"{other} for the {coi_label}=1 group, relative to the reference group.")
    return f"Change in the {what} per unit increase in {term}, reference group."


def _report_order(fixed: tuple[str, ...]) -> list[str]:
    """Main effects first (intercept, net, group, confounders), then
    group interactions; mirrors the conventional parameter-table layout."""
    mains = [t for t in fixed if ":" not in t]
    inters = [t for t in fixed if ":" in t]
    return mains + inters


def explain_report(fit: TwoPartFit, coi_label: str = "age") -> ComparisonReport:
    """Per-parameter estimates, SEs, and Wald p-values for both parts.

    Rows follow the conventional layout: presence-model parameters, then
    strength-model parameters, main effects before interactions, each with a
    plain-language interpretation.
    """
    rows: list[ReportRow] = []
    notes: list[str] = []
    for part, part_fit in (("presence", fit.presence), ("strength", fit.strength)):
        terms = _report_order(part_fit.beta_names)
        for term in terms:
            t = _coef_test(part_fit, term)
            rows.append(
                ReportRow(
                    part=part,
                    label=term_label(part, term, coi_label),
                    term=term,
                    estimate=t.estimate,
                    se=t.se,
                    p_value=t.p_value,
                    interpretation=_interpret(part, term, coi_label),
                )
            )
        if not any(":" in t for t in terms):
            notes.append(f"{part}: no interaction terms in the fitted model; "
                         "group comparisons reduce to the main group effect.")
    return ComparisonReport(rows=rows, notes=notes, coi_label=coi_label)


_CLASS_LABELS = {
    (False, False): "no overall or topological differences",
    (False, True): "topological differences: group differences vary with network metric values",
    (True, False): "overall differences only",
    (True, True): "overall and topological differences",
}


def classify_group_difference(report: ComparisonReport, alpha: float = 0.05) -> dict:
    """Map the significance pattern of the group terms onto difference classes.

    Per part: "overall" means the group main effect (or its sex interaction)
    is significant, "topological" means any group-by-metric interaction is
    significant.
    """
    out = {}
    for part in ("presence", "strength"):
        part_rows = [r for r in report.rows if r.part == part]
        coi = [r for r in part_rows if r.term == "group"]
        if not coi:
            out[part] = "not classifiable (no group term in model)"
            continue
        coi_sex = [r for r in part_rows if r.term in ("group:sex", "sex:group")]
        coi_net = [r for r in part_rows
                   if ":" in r.term and r.term not in ("group:sex", "sex:group")
                   and "group" in r.term.split(":")]
        overall = coi[0].p_value < alpha or any(r.p_value < alpha for r in coi_sex)
        topo = any(r.p_value < alpha for r in coi_net)
        out[part] = _CLASS_LABELS[(overall, topo)]
    return out


# ---------------------------------------------------------------------------
# Group-informed dyad thresholding
# ---------------------------------------------------------------------------


@dataclass
class ThresholdReport:
    """Per-dyad indicator tests on the strength model."""

    table: pd.DataFrame
    correction: str
    alpha: float
    per_group: bool

    def removal_candidates(self) -> list[tuple[int, int]]:
        flagged = self.table[self.table["candidate_for_removal"]]
        return [(int(r.node_j), int(r.node_k)) for r in flagged.itertuples()]


def _bh_adjust(p: np.ndarray) -> np.ndarray:
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    prev = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        prev = min(prev, p[i] * m / rank)
        adj[i] = prev
    return adj


def adjust_pvalues(p: np.ndarray, method: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if method == "fdr":
        return _bh_adjust(p)
    if method == "bonferroni":
        return np.minimum(1.0, p * len(p))
    raise DataError(f"unknown correction {method!r} (use fdr or bonferroni)")


def dyad_threshold_test(table, spec: ModelSpec, dyads, per_group: bool = False,
                        correction: str = "fdr", alpha: float = 0.05,
                        batch_size: int = 50, n_nodes: int | None = None,
                        centering=None) -> ThresholdReport:
    """Test dyad-specific strength shifts and flag removal candidates.

    Indicator columns for the requested dyads (plus group interactions when
    ``per_group``) are appended to the strength-model fixed effects in
    batches of at most ``batch_size`` per refit; each dyad gets a Wald F test
    and the p-values receive the multiplicity correction across all tested
    dyads.  Dyads that are not significant after correction are flagged as
    candidates for removal.  Dyads with no strength rows are reported as
    untestable.

    Tested dyads outside the current batch contribute to that batch's
    baseline, so a strongly shifted dyad can bias other batches when the
    tested set is a large fraction of all dyads.  Testing a targeted subset,
    or raising ``batch_size`` to cover the set in one refit, avoids this.
    """
    dyads = list(dict.fromkeys(
        (int(j), int(k)) if j < k else (int(k), int(j)) for j, k in dyads
    ))
    if centering is None:
        table, centering = center_covariates(table)
    n_nodes = n_nodes or int(table["node_k"].max()) + 1
    present = table[table["R"] == 1].reset_index(drop=True)
    base_design = build_design(present, spec, n_nodes)
    y = present["S"].to_numpy(dtype=float)
    base_fit = reml_fit(base_design, y)
    warm = _theta_of(base_fit)

    nj = present["node_j"].to_numpy()
    nk = present["node_k"].to_numpy()
    grp = present["group"].to_numpy(dtype=float)
    records = []
    testable = []
    for j, k in dyads:
        mask = (nj == j) & (nk == k)
        n_rows = int(mask.sum())
        if n_rows == 0:
            records.append({"node_j": j, "node_k": k, "n_strength_rows": 0,
                            "testable": False, "estimate": np.nan, "se": np.nan,
                            "f_stat": np.nan, "num_df": 0, "den_df": 0,
                            "p_value": np.nan})
        else:
            testable.append(((j, k), mask, n_rows))

    p_base = base_design.X.shape[1]
    dyad_code = nj.astype(np.int64) * (n_nodes + 1) + nk.astype(np.int64)

    def batches(items, size):
        """Chunk the testable dyads, splitting any chunk whose indicators
        would cover every strength row (their sum would equal the intercept
        column and alias it)."""
        queue = [items[i:i + size] for i in range(0, len(items), size)]
        out = []
        while queue:
            chunk = queue.pop(0)
            codes = {j * (n_nodes + 1) + k for (j, k), _m, _n in chunk}
            if len(chunk) > 1 and set(dyad_code.tolist()) <= codes:
                half = len(chunk) // 2
                queue = [chunk[:half], chunk[half:]] + queue
            else:
                out.append(chunk)
        return out

    for batch in batches(testable, batch_size):
        cols, col_spans = [], []
        for (j, k), mask, _n in batch:
            ind = mask.astype(float)
            span = [len(cols)]
            cols.append(ind)
            if per_group and len(np.unique(grp[mask])) > 1:
                span.append(len(cols))
                cols.append(ind * grp)
            col_spans.append(span)
        X_aug = np.column_stack([base_design.X] + cols)
        names_aug = base_design.x_names + tuple(
            f"dyad_{i}" for i in range(len(cols)))
        design = replace(base_design, X=X_aug, x_names=names_aug)
        fit = reml_fit(design, y, warm_start=warm, multi_start=False)
        for ((j, k), mask, n_rows), span in zip(batch, col_spans):
            C = np.zeros((len(span), X_aug.shape[1]))
            for r, c in enumerate(span):
                C[r, p_base + c] = 1.0
            t = wald_f_test(fit, C)
            est = float(fit.beta[p_base + span[0]])
            se = float(np.sqrt(fit.beta_cov[p_base + span[0], p_base + span[0]]))
            records.append({"node_j": j, "node_k": k, "n_strength_rows": n_rows,
                            "testable": True, "estimate": est, "se": se,
                            "f_stat": t.f_stat, "num_df": t.num_df,
                            "den_df": t.den_df, "p_value": t.p_value})

    df = pd.DataFrame.from_records(records)
    if len(df):
        df = df.sort_values(["node_j", "node_k"], kind="stable").reset_index(drop=True)
        df["p_adjusted"] = np.nan
        ok = df["testable"].to_numpy()
        if ok.any():
            df.loc[ok, "p_adjusted"] = adjust_pvalues(df.loc[ok, "p_value"].to_numpy(), correction)
        df["candidate_for_removal"] = ok & (df["p_adjusted"].to_numpy() > alpha)
    else:
        df = pd.DataFrame(columns=["node_j", "node_k", "n_strength_rows", "testable",
                                   "estimate", "se", "f_stat", "num_df", "den_df",
                                   "p_value", "p_adjusted", "candidate_for_removal"])
    return ThresholdReport(table=df, correction=correction, alpha=alpha, per_group=per_group)


def apply_threshold_mask(networks, removal_dyads, weak_cutoff: float):
    """Zero flagged dyads, but only for participants whose weight there is weak.

    ``weak_cutoff`` is a required, user-chosen absolute weight below which a
    participant's connection in a flagged dyad counts as weak.
    """
    from .netdata import SubjectNetwork

    if weak_cutoff is None or weak_cutoff <= 0:
        raise DataError("weak_cutoff must be a positive weight threshold")
    out = []
    for net in networks:
        w = net.weights.copy()
        for j, k in removal_dyads:
            if 0 < w[j, k] < weak_cutoff:
                w[j, k] = 0.0
                w[k, j] = 0.0
        out.append(SubjectNetwork(subject_id=net.subject_id, weights=w))
    return out
