"""Two-part mixed-effects modeling of weighted whole-brain networks.

The pipeline: load connection matrices and subject tables (:mod:`netdata`),
compute weighted graph metrics (:mod:`graphmetrics`), assemble the dyad
table and design matrices (:mod:`dyaddesign`), fit the logistic presence
model and the Gaussian strength model (:mod:`mixedfit`), run Wald inference,
reports, and dyad thresholding (:mod:`inference`), and produce prediction
curves, simulated network ensembles, and goodness-of-fit tables
(:mod:`predictsim`).  The command-line entry point lives in :mod:`cli`.
"""

from .netdata import (
    DataError,
    DistanceMatrix,
    NodeAtlas,
    Study,
    SubjectCovariates,
    SubjectNetwork,
    clamp_negative_weights,
    compute_distances,
    load_atlas,
    load_connection_matrix,
    load_study,
    load_subjects,
)
from .graphmetrics import (
    NetworkMetrics,
    NodalMetrics,
    characteristic_path_length,
    leverage_centrality,
    metric_suite,
    modularity,
    nodal_efficiency,
    shortest_path_lengths,
    weighted_clustering,
    weighted_degree,
)
from .dyaddesign import (
    CenteringRecord,
    DesignMatrices,
    ModelSpec,
    SpecError,
    build_design,
    build_dyad_table,
    center_covariates,
    fisher_z,
    inv_fisher_z,
)
from .mixedfit import (
    ConvergenceError,
    GlmmFit,
    LmmFit,
    SeparationError,
    TwoPartFit,
    VarianceComponents,
    drop_zero_variance,
    fit_two_part,
    pql_fit,
    reml_fit,
    reml_objective,
    set_threads,
)

__version__ = "0.1.0"
