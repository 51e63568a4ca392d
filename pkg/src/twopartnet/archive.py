"""Serialization of fitted models to a structured-text (JSON) archive.

The archive stores the full-model fit (used for prediction and simulation)
and the reduced-model fit obtained after pruning zero-variance random
components (used for reports, comparisons, and thresholding), together with
the model spec, the centering record, and metric settings.  Serialization is
deterministic: identical fits produce byte-identical archives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dyaddesign import CenteringRecord, ModelSpec
from .mixedfit import GlmmFit, LmmFit, TwoPartFit, VarianceComponents
from .netdata import DataError

FORMAT = "twopartnet-fit/1"


def _fit_to_dict(fit: LmmFit) -> dict:
    d = {
        "beta": [float(v) for v in fit.beta],
        "beta_names": list(fit.beta_names),
        "beta_cov": np.asarray(fit.beta_cov).tolist(),
        "vc": {
            "names": list(fit.vc.names),
            "tau": [float(v) for v in fit.vc.tau],
            "sigma2": float(fit.vc.sigma2),
            "at_bound": np.asarray(fit.vc.at_bound, dtype=bool).tolist(),
        },
        "blups": np.asarray(fit.blups).tolist(),
        "subjects": list(fit.subjects),
        "reml_loglik": float(fit.reml_loglik),
        "n_rows": int(fit.n_rows),
        "residual_df": int(fit.residual_df),
        "converged": bool(fit.converged),
        "trace": fit.trace,
        "z_names": list(fit.z_names),
        "vc_map": np.asarray(fit.vc_map).tolist() if fit.vc_map is not None else None,
    }
    if isinstance(fit, GlmmFit):
        d["outer_iterations"] = int(fit.outer_iterations)
    return d


def _fit_from_dict(d: dict, kind: str) -> LmmFit:
    vc = VarianceComponents(
        names=tuple(d["vc"]["names"]),
        tau=np.asarray(d["vc"]["tau"], dtype=float),
        sigma2=float(d["vc"]["sigma2"]),
        at_bound=np.asarray(d["vc"]["at_bound"], dtype=bool),
    )
    common = dict(
        beta=np.asarray(d["beta"], dtype=float),
        beta_names=tuple(d["beta_names"]),
        beta_cov=np.asarray(d["beta_cov"], dtype=float),
        vc=vc,
        blups=np.asarray(d["blups"], dtype=float),
        subjects=tuple(d["subjects"]),
        reml_loglik=float(d["reml_loglik"]),
        n_rows=int(d["n_rows"]),
        residual_df=int(d["residual_df"]),
        converged=bool(d["converged"]),
        trace=list(d.get("trace", [])),
        z_names=tuple(d.get("z_names", ())),
        vc_map=np.asarray(d["vc_map"], dtype=np.int64) if d.get("vc_map") is not None else None,
    )
    if kind == "presence":
        return GlmmFit(**common, outer_iterations=int(d.get("outer_iterations", 0)))
    return LmmFit(**common)


@dataclass
class FitArchive:
    """Everything downstream commands need from a fitting run."""

    full: TwoPartFit
    reduced: TwoPartFit
    reduced_specs: dict            # {"presence": ModelSpec, "strength": ModelSpec}
    louvain_seed: int
    leverage_degree: str

    @property
    def was_reduced(self) -> bool:
        return (self.reduced_specs["presence"].to_dict() != self.full.spec.to_dict()
                or self.reduced_specs["strength"].to_dict() != self.full.spec.to_dict())


def _two_part_to_dict(fit: TwoPartFit) -> dict:
    return {
        "presence": _fit_to_dict(fit.presence),
        "strength": _fit_to_dict(fit.strength),
        "spec": fit.spec.to_dict(),
        "n_nodes": int(fit.n_nodes),
    }


def _two_part_from_dict(d: dict, centering: CenteringRecord) -> TwoPartFit:
    return TwoPartFit(
        presence=_fit_from_dict(d["presence"], "presence"),
        strength=_fit_from_dict(d["strength"], "strength"),
        spec=ModelSpec.from_dict(d["spec"]),
        centering=centering,
        n_nodes=int(d["n_nodes"]),
    )


def save_archive(path, archive: FitArchive) -> None:
    payload = {
        "format": FORMAT,
        "centering": archive.full.centering.to_dict(),
        "full": _two_part_to_dict(archive.full),
        "reduced": _two_part_to_dict(archive.reduced),
        "reduced_specs": {k: v.to_dict() for k, v in archive.reduced_specs.items()},
        "louvain_seed": int(archive.louvain_seed),
        "leverage_degree": archive.leverage_degree,
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_archive(path) -> FitArchive:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != FORMAT:
        raise DataError(f"{path}: not a fit archive (format {payload.get('format')!r})")
    centering = CenteringRecord.from_dict(payload["centering"])
    return FitArchive(
        full=_two_part_from_dict(payload["full"], centering),
        reduced=_two_part_from_dict(payload["reduced"], centering),
        reduced_specs={k: ModelSpec.from_dict(v)
                       for k, v in payload["reduced_specs"].items()},
        louvain_seed=int(payload["louvain_seed"]),
        leverage_degree=payload["leverage_degree"],
    )
