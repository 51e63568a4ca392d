import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from twopartnet.dyaddesign import DEFAULT_FIXED, ModelSpec, center_covariates
from twopartnet.mixedfit import fit_two_part
from twopartnet.synth import StudyTruth, default_truth, generate_synthetic_study

# Small reduced-random spec used where full nodal variance structure would
# make module tests needlessly slow.
SMALL_RANDOM = ("intercept", "C_avg", "dist", "nodes")


def small_truth(spec=None) -> StudyTruth:
    truth = default_truth(spec or ModelSpec(fixed=DEFAULT_FIXED, random=SMALL_RANDOM))
    return truth


@pytest.fixture(scope="session")
def small_study(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_study")
    return generate_synthetic_study(out, n_subjects=8, n_nodes=10,
                                    truth=small_truth(), seed=42)


@pytest.fixture(scope="session")
def small_tables(small_study):
    table, record = center_covariates(small_study.dyads)
    return table, record


@pytest.fixture(scope="session")
def small_fit(small_study, small_tables):
    table, record = small_tables
    return fit_two_part(table, small_study.truth.spec, n_nodes=10, centering=record)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
