"""Ingestion of connection matrices, node coordinates, and subject covariates.

All loaders are pure functions returning immutable containers (arrays are
marked read-only), so loaded studies can be shared freely across threads.
Connection weights follow the nonnegative convention: negative raw weights
mean "no connection" and are clamped to exactly zero, and weights must stay
strictly below 1 so that the inverse-hyperbolic-tangent strength transform
is finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

SYMMETRY_TOL = 1e-8

# Node coordinates are stored in millimeters; dyad distances are modeled in
# decimeters to keep quadratic distance terms near unit scale.
MM_PER_DM = 100.0


class DataError(ValueError):
    """Malformed or out-of-contract input data."""


@dataclass(frozen=True)
class SubjectNetwork:
    """One participant's symmetric nonnegative weighted connection matrix."""

    subject_id: str
    weights: np.ndarray

    def __post_init__(self):
        self.weights.flags.writeable = False

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def dyad_count(self) -> int:
        return self.n * (self.n - 1) // 2


@dataclass(frozen=True)
class SubjectCovariates:
    subject_id: str
    group: int
    sex: int
    education_years: float


@dataclass(frozen=True)
class NodeAtlas:
    """Node labels plus spatial coordinates in millimeters."""

    labels: tuple[str, ...]
    coords_mm: np.ndarray

    def __post_init__(self):
        self.coords_mm.flags.writeable = False

    @property
    def n(self) -> int:
        return self.coords_mm.shape[0]


@dataclass(frozen=True)
class DistanceMatrix:
    """Pairwise Euclidean node distances, stored in decimeters."""

    values_dm: np.ndarray

    def __post_init__(self):
        self.values_dm.flags.writeable = False

    @property
    def n(self) -> int:
        return self.values_dm.shape[0]


def _validate_square(raw: np.ndarray, origin: str) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise DataError(f"{origin}: expected a square matrix, got shape {raw.shape}")
    return raw

def _validate_entries(raw: np.ndarray, origin: str):
    bad = np.argwhere(np.isnan(raw))
    if bad.size:
        i, j = bad[0]
        raise DataError(f"{origin}: NaN weight at ({i},{j})")
    bad = np.argwhere(raw >= 1.0)
    if bad.size:
        i, j = bad[0]
        raise DataError(f"{origin}: weight ≥ 1 at ({i},{j})")
    bad = np.argwhere(raw <= -1.0)
    if bad.size:
        i, j = bad[0]
        raise DataError(f"{origin}: weight ≤ -1 at ({i},{j})")

def _symmetrize(raw: np.ndarray, origin: str) -> np.ndarray:
    asym = np.abs(raw - raw.T).max() if raw.size else 0.0
    if asym > SYMMETRY_TOL:
        i, j = np.unravel_index(np.abs(raw - raw.T).argmax(), raw.shape)
        raise DataError(
            f"{origin}: asymmetry {asym:.3g} at ({i},{j}) exceeds tolerance {SYMMETRY_TOL:g}"
        )
    out = (raw + raw.T) / 2.0
    np.fill_diagonal(out, 0.0)
    return out


def clamp_negative_weights(raw: np.ndarray, subject_id: str = "") -> SubjectNetwork:
    """Replace negative entries by exactly 0 and wrap as a SubjectNetwork.

    Nonnegative off-diagonal entries are returned unchanged.  The matrix must
    be square and symmetric (up to ``SYMMETRY_TOL``, averaged away) with all
    entries strictly inside (-1, 1); the diagonal is zeroed.  Idempotent.
    """
    origin = subject_id or "matrix"
    w = _validate_square(raw, origin)
    _validate_entries(w, origin)
    w = _symmetrize(w, origin)
    w[w < 0.0] = 0.0
    return SubjectNetwork(subject_id=subject_id, weights=w)


def apply_weak_cutoff(net: SubjectNetwork, cutoff: float) -> SubjectNetwork:
    """Zero connections with weight below an absolute cutoff.

    Optional; no default cutoff is endorsed, callers opt in explicitly.
    """
    if cutoff <= 0:
        return net
    w = net.weights.copy()
    w[w < cutoff] = 0.0
    return SubjectNetwork(subject_id=net.subject_id, weights=w)


def _read_matrix_file(path) -> np.ndarray:
    """Dense comma-separated numeric matrix, optional single header line."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty matrix file")
    rows = []
    for idx, line in enumerate(lines):
        fields = [f.strip() for f in line.split(",")]
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            if idx == 0:
                continue  # header line
            raise DataError(f"{path}: non-numeric value on line {idx + 1}")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.asarray(rows, dtype=float)


def load_connection_matrix(path, subject_id: str) -> SubjectNetwork:
    """Load one subject's connection matrix from comma-separated text.

    The matrix is validated (square, entries in (-1, 1), asymmetry at most
    ``SYMMETRY_TOL``), symmetrized by averaging, diagonal-zeroed, and negative
    weights are clamped to 0.
    """
    raw = _read_matrix_file(path)
    origin = f"{path}"
    raw = _validate_square(raw, origin)
    _validate_entries(raw, origin)
    net = clamp_negative_weights(raw, subject_id=subject_id)
    return net


def compute_distances(atlas: NodeAtlas) -> DistanceMatrix:
    """Euclidean inter-node distances in decimeters (mm / 100)."""
    xyz = np.asarray(atlas.coords_mm, dtype=float)
    if not np.all(np.isfinite(xyz)):
        bad = int(np.argwhere(~np.isfinite(xyz).all(axis=1))[0][0])
        raise DataError(f"atlas: non-finite coordinate for node {bad}")
    diff = xyz[:, None, :] - xyz[None, :, :]
    d = np.sqrt((diff**2).sum(axis=-1)) / MM_PER_DM
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(values_dm=d)


def load_atlas(path) -> NodeAtlas:
    """Atlas table with columns node,label,x_mm,y_mm,z_mm."""
    df = pd.read_csv(path)
    required = {"node", "label", "x_mm", "y_mm", "z_mm"}
    missing = required - set(df.columns)
    if missing:
        raise DataError(f"{path}: atlas missing columns {sorted(missing)}")
    df = df.sort_values("node").reset_index(drop=True)
    nodes = df["node"].to_numpy()
    if not np.array_equal(nodes, np.arange(len(df))):
        raise DataError(f"{path}: node column must enumerate 0..n-1")
    coords = df[["x_mm", "y_mm", "z_mm"]].to_numpy(dtype=float)
    if not np.all(np.isfinite(coords)):
        raise DataError(f"{path}: non-finite coordinates")
    return NodeAtlas(labels=tuple(str(s) for s in df["label"]), coords_mm=coords)


def load_subjects(path) -> list[SubjectCovariates]:
    """Subject table with columns subject_id,group,sex,education_years."""
    df = pd.read_csv(path)
    required = {"subject_id", "group", "sex", "education_years"}
    missing = required - set(df.columns)
    if missing:
        raise DataError(f"{path}: subject table missing columns {sorted(missing)}")
    out = []
    for _, row in df.iterrows():
        sid = str(row["subject_id"])
        for col in ("group", "sex"):
            if row[col] not in (0, 1):
                raise DataError(f"{path}: {col} must be 0/1 for subject {sid}")
        edu = float(row["education_years"])
        if not math.isfinite(edu):
            raise DataError(f"{path}: non-finite education_years for subject {sid}")
        out.append(
            SubjectCovariates(
                subject_id=sid, group=int(row["group"]), sex=int(row["sex"]),
                education_years=edu,
            )
        )
    ids = [s.subject_id for s in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate subject ids")
    return out


@dataclass(frozen=True)
class Study:
    """A loaded study: networks (subject order), covariates, atlas, distances."""

    networks: tuple[SubjectNetwork, ...]
    covariates: tuple[SubjectCovariates, ...]
    atlas: NodeAtlas
    distances: DistanceMatrix = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return self.atlas.n

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.subject_id for s in self.covariates)


def load_study(networks_dir, atlas_path, subjects_path, weak_cutoff: float | None = None) -> Study:
    """Load a whole study; network files are <subject_id>.csv in networks_dir."""
    networks_dir = Path(networks_dir)
    atlas = load_atlas(atlas_path)
    covs = load_subjects(subjects_path)
    nets = []
    for cov in covs:
        f = networks_dir / f"{cov.subject_id}.csv"
        if not f.exists():
            raise DataError(f"missing network file {f}")
        net = load_connection_matrix(f, cov.subject_id)
        if net.n != atlas.n:
            raise DataError(
                f"{f}: matrix is {net.n}x{net.n} but atlas has {atlas.n} nodes"
            )
        if weak_cutoff is not None:
            net = apply_weak_cutoff(net, weak_cutoff)
        nets.append(net)
    return Study(
        networks=tuple(nets),
        covariates=tuple(covs),
        atlas=atlas,
        distances=compute_distances(atlas),
    )
