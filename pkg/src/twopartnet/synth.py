"""Synthetic study generation with known ground-truth parameters.

A synthetic study draws plausible dyad covariates (nodal metric values,
spatial coordinates, subject demographics), then samples edge presence and
strength from the two-part model at user-supplied true parameters.  The
realized networks are written in the standard input formats together with
the exact covariate table used for generation, so estimator-recovery checks
can condition on the same design the sampler saw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd

from .dyaddesign import (
    DEFAULT_FIXED,
    DEFAULT_RANDOM,
    ModelSpec,
    assemble_covariate_rows,
    build_design,
    center_covariates,
)
from .graphmetrics import NodalMetrics
from .netdata import DataError, NodeAtlas, SubjectCovariates, SubjectNetwork, compute_distances
from .predictsim import _draw_network

DEFAULT_BETA_R = {
    "intercept": 0.4, "C_avg": 2.0, "E_avg": 3.0, "k_diff": -0.12,
    "Q_net": -1.0, "l_avg": 0.8, "group": -0.3, "group:C_avg": 1.5,
    "group:E_avg": -2.0, "group:k_diff": 0.06, "group:Q_net": 1.2,
    "group:l_avg": -0.5, "group:sex": 0.2, "sex": -0.15,
    "education": 0.03, "dist": -0.7, "dist2": 0.25,
}
DEFAULT_BETA_S = {
    "intercept": 0.55, "C_avg": 0.5, "E_avg": 0.5, "k_diff": -0.012,
    "Q_net": -0.25, "l_avg": 0.1, "group": -0.04, "group:C_avg": 0.25,
    "group:E_avg": 0.2, "group:k_diff": 0.008, "group:Q_net": -0.15,
    "group:l_avg": 0.08, "group:sex": 0.03, "sex": -0.02,
    "education": 0.004, "dist": -0.08, "dist2": 0.025,
}
DEFAULT_TAU_R = {
    "intercept": 0.05, "C_avg": 0.4, "E_avg": 0.5, "k_diff": 0.003,
    "Q_net": 0.3, "l_avg": 0.05, "dist": 0.02, "dist2": 0.005, "nodes": 0.02,
}
DEFAULT_TAU_S = {
    "intercept": 0.003, "C_avg": 0.02, "E_avg": 0.02, "k_diff": 1e-5,
    "Q_net": 0.01, "l_avg": 0.003, "dist": 0.001, "dist2": 3e-4, "nodes": 8e-4,
}
DEFAULT_SIGMA2 = 0.01


@dataclass
class StudyTruth:
    """True parameter values driving a synthetic study."""

    beta_r: dict
    beta_s: dict
    tau_r: dict
    tau_s: dict
    sigma2: float
    spec: ModelSpec

    def validate(self) -> None:
        if self.sigma2 < 0:
            raise DataError("sigma2 must be nonnegative")
        for d in (self.tau_r, self.tau_s):
            for name, v in d.items():
                if v < 0:
                    raise DataError(f"variance {name} must be nonnegative")
        for term in self.spec.fixed:
            if term not in self.beta_r or term not in self.beta_s:
                raise DataError(f"truth is missing a coefficient for term {term!r}")

    def beta_vector(self, which: str, fixed_terms) -> np.ndarray:
        src = self.beta_r if which == "presence" else self.beta_s
        return np.array([src[t] for t in fixed_terms])

    def tau_vector(self, which: str, vc_names) -> np.ndarray:
        src = self.tau_r if which == "presence" else self.tau_s
        out = np.empty(len(vc_names))
        for i, name in enumerate(vc_names):
            key = "nodes" if name.startswith("node_") else name
            if key not in src:
                raise DataError(f"truth is missing a variance for component {name!r}")
            out[i] = src[key]
        return out

    def to_dict(self) -> dict:
        return {
            "beta_r": self.beta_r, "beta_s": self.beta_s,
            "tau_r": self.tau_r, "tau_s": self.tau_s,
            "sigma2": self.sigma2, "spec": self.spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyTruth":
        return cls(
            beta_r=dict(d["beta_r"]), beta_s=dict(d["beta_s"]),
            tau_r=dict(d["tau_r"]), tau_s=dict(d["tau_s"]),
            sigma2=float(d["sigma2"]), spec=ModelSpec.from_dict(d["spec"]),
        )

    @classmethod
    def from_file(cls, path) -> "StudyTruth":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_truth(spec: ModelSpec | None = None) -> StudyTruth:
    spec = spec or ModelSpec(fixed=DEFAULT_FIXED, random=DEFAULT_RANDOM)
    return StudyTruth(
        beta_r=dict(DEFAULT_BETA_R), beta_s=dict(DEFAULT_BETA_S),
        tau_r=dict(DEFAULT_TAU_R), tau_s=dict(DEFAULT_TAU_S),
        sigma2=DEFAULT_SIGMA2, spec=spec,
    )


@dataclass
class SyntheticStudy:
    """In-memory handle on a generated study."""

    directory: Path
    truth: StudyTruth
    seed: int
    networks: list
    atlas: NodeAtlas
    covariates: list
    dyads: pd.DataFrame            # raw (uncentered) covariates + R/S outcomes


def _draw_covariates(rng, n_subjects: int, n_nodes: int):
    atlas = NodeAtlas(
        labels=tuple(f"region_{v}" for v in range(n_nodes)),
        coords_mm=rng.uniform(-70.0, 70.0, size=(n_nodes, 3)),
    )
    covs = [
        SubjectCovariates(
            subject_id=f"sub{i:03d}",
            group=int(i >= n_subjects / 2),
            sex=i % 2,
            education_years=float(np.round(rng.normal(14.0, 2.0), 2)),
        )
        for i in range(n_subjects)
    ]
    nodal, network = {}, {}
    for cov in covs:
        nodal[cov.subject_id] = NodalMetrics(
            clustering=rng.uniform(0.05, 0.45, n_nodes),
            efficiency=rng.uniform(0.10, 0.35, n_nodes),
            degree=rng.uniform(5.0, 15.0, n_nodes),
            leverage=rng.uniform(-0.4, 0.4, n_nodes),
        )
        network[cov.subject_id] = SimpleNamespace(modularity=float(rng.uniform(0.2, 0.45)))
    return atlas, covs, nodal, network


def generate_synthetic_study(out_dir, n_subjects: int, n_nodes: int,
                             truth: StudyTruth | None = None, seed: int = 0) -> SyntheticStudy:
    """Simulate a study at known parameters and write it to disk.

    Outputs under ``out_dir``: networks/<subject>.csv, atlas.csv,
    subjects.csv, dyads.csv (the generation covariate table with outcomes),
    truth.json, and spec.json.  Identical seeds produce identical
    directories.
    """
    truth = truth or default_truth()
    truth.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    atlas, covs, nodal, network = _draw_covariates(rng, n_subjects, n_nodes)
    dist = compute_distances(atlas)
    raw = assemble_covariate_rows(nodal, network, covs, dist)
    centered, _record = center_covariates(raw)

    beta_r = truth.beta_vector("presence", truth.spec.fixed)
    beta_s = truth.beta_vector("strength", truth.spec.fixed)

    networks = []
    r_all = np.zeros(len(raw), dtype=np.int8)
    s_all = np.full(len(raw), np.nan)
    for i, cov in enumerate(covs):
        sid = cov.subject_id
        idx = np.flatnonzero((centered["subject_id"] == sid).to_numpy())
        rows = centered.iloc[idx]
        design = build_design(rows, truth.spec, n_nodes)
        d_r = truth.tau_vector("presence", design.vc_names)[design.vc_map] \
            if design.q else np.zeros(0)
        d_s = truth.tau_vector("strength", design.vc_names)[design.vc_map] \
            if design.q else np.zeros(0)
        sub_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(1, i)))
        )
        w, _nfb = _draw_network(
            design.X, design.Z, design.node_pairs, n_nodes,
            beta_r, d_r, beta_s, d_s, truth.sigma2, sub_rng,
        )
        net = SubjectNetwork(subject_id=sid, weights=w)
        networks.append(net)
        pj = design.node_pairs[:, 0]
        pk = design.node_pairs[:, 1]
        wv = w[pj, pk]
        r_all[idx] = wv > 0
        pos = wv > 0
        s_all[idx[pos]] = np.arctanh(wv[pos])

    dyads = raw.copy()
    dyads["R"] = r_all
    dyads["S"] = s_all

    nets_dir = out_dir / "networks"
    nets_dir.mkdir(parents=True, exist_ok=True)
    for net in networks:
        np.savetxt(nets_dir / f"{net.subject_id}.csv", net.weights,
                   delimiter=",", fmt="%.17g")
    pd.DataFrame(
        {
            "node": np.arange(n_nodes),
            "label": list(atlas.labels),
            "x_mm": atlas.coords_mm[:, 0],
            "y_mm": atlas.coords_mm[:, 1],
            "z_mm": atlas.coords_mm[:, 2],
        }
    ).to_csv(out_dir / "atlas.csv", index=False, lineterminator="\n")
    pd.DataFrame(
        {
            "subject_id": [c.subject_id for c in covs],
            "group": [c.group for c in covs],
            "sex": [c.sex for c in covs],
            "education_years": [c.education_years for c in covs],
        }
    ).to_csv(out_dir / "subjects.csv", index=False, lineterminator="\n")
    dyads.to_csv(out_dir / "dyads.csv", index=False, lineterminator="\n")
    with open(out_dir / "truth.json", "w") as fh:
        json.dump({"seed": seed, "n_subjects": n_subjects, "n_nodes": n_nodes,
                   **truth.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    truth.spec.to_file(out_dir / "spec.json")
    return SyntheticStudy(
        directory=out_dir, truth=truth, seed=seed, networks=networks,
        atlas=atlas, covariates=covs, dyads=dyads,
    )


def load_dyad_csv(path) -> pd.DataFrame:
    """Read back a dyads.csv written by :func:`generate_synthetic_study`."""
    df = pd.read_csv(path)
    required = {"subject_id", "node_j", "node_k", "R", "S"}
    missing = required - set(df.columns)
    if missing:
        raise DataError(f"{path}: dyad table missing columns {sorted(missing)}")
    df["subject_id"] = df["subject_id"].astype(str)
    return df
