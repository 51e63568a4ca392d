import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twopartnet.netdata import (
    DataError,
    NodeAtlas,
    apply_weak_cutoff,
    clamp_negative_weights,
    compute_distances,
    load_atlas,
    load_connection_matrix,
    load_study,
    load_subjects,
)


def write_matrix(path, w, header=None):
    lines = []
    if header is not None:
        lines.append(header)
    for row in w:
        lines.append(",".join(f"{v:.17g}" for v in row))
    path.write_text("\n".join(lines) + "\n")


class TestLoadConnectionMatrix:
    def test_smallest_symmetric_case(self, tmp_path):
        f = tmp_path / "m.csv"
        write_matrix(f, np.array([[0.0, 0.3], [0.3, 0.0]]))
        net = load_connection_matrix(f, "s1")
        assert net.weights[0][1] == pytest.approx(0.3)
        assert net.n == 2
        assert net.subject_id == "s1"

    def test_weight_at_fisher_pole_rejected(self, tmp_path):
        w = np.zeros((3, 3))
        w[0, 2] = w[2, 0] = 1.0
        f = tmp_path / "m.csv"
        write_matrix(f, w)
        with pytest.raises(DataError, match=r"weight ≥ 1 at \(0,2\)"):
            load_connection_matrix(f, "s1")

    def test_synthetic_90_node_file(self, tmp_path, rng):
        n = 90
        raw = rng.uniform(-0.2, 0.9, size=(n, n))
        raw = (raw + raw.T) / 2
        np.fill_diagonal(raw, 0.0)
        f = tmp_path / "big.csv"
        write_matrix(f, raw)
        net = load_connection_matrix(f, "s1")
        assert net.n == 90
        assert net.dyad_count() == 4005

    def test_presence_absence_partition(self, tmp_path, rng):
        n = 12
        raw = rng.uniform(-0.5, 0.9, size=(n, n))
        raw = (raw + raw.T) / 2
        np.fill_diagonal(raw, 0.0)
        f = tmp_path / "m.csv"
        write_matrix(f, raw)
        net = load_connection_matrix(f, "s1")
        iu = np.triu_indices(n, k=1)
        vals = net.weights[iu]
        assert (vals > 0).sum() + (vals == 0).sum() == n * (n - 1) // 2

    def test_optional_header_line(self, tmp_path):
        f = tmp_path / "m.csv"
        write_matrix(f, np.array([[0.0, 0.25], [0.25, 0.0]]), header="n0,n1")
        net = load_connection_matrix(f, "s1")
        assert net.weights[0, 1] == pytest.approx(0.25)

    def test_non_square_rejected(self, tmp_path):
        f = tmp_path / "m.csv"
        f.write_text("0,0.5,0.1\n0.5,0,0.2\n")
        with pytest.raises(DataError, match="square"):
            load_connection_matrix(f, "s1")

    def test_nan_rejected_with_location(self, tmp_path):
        f = tmp_path / "m.csv"
        f.write_text("0,nan\nnan,0\n")
        with pytest.raises(DataError, match=r"NaN weight at \(0,1\)"):
            load_connection_matrix(f, "s1")

    def test_asymmetry_beyond_tolerance_rejected(self, tmp_path):
        f = tmp_path / "m.csv"
        f.write_text("0,0.30001\n0.3,0\n")
        with pytest.raises(DataError, match="asymmetry"):
            load_connection_matrix(f, "s1")

    def test_tiny_asymmetry_averaged(self, tmp_path):
        f = tmp_path / "m.csv"
        f.write_text("0,0.300000000002\n0.3,0\n")
        net = load_connection_matrix(f, "s1")
        assert net.weights[0, 1] == pytest.approx(0.300000000001, abs=1e-14)
        assert net.weights[0, 1] == net.weights[1, 0]

    def test_ragged_rows_rejected(self, tmp_path):
        f = tmp_path / "m.csv"
        f.write_text("0,0.5\n0.5,0,0.2\n")
        with pytest.raises(DataError, match="ragged|square"):
            load_connection_matrix(f, "s1")


class TestClampNegativeWeights:
    def test_negative_pair_clamped_to_zero(self):
        net = clamp_negative_weights(np.array([[0.0, -0.2], [-0.2, 0.0]]))
        assert net.weights[0][1] == 0.0

    def test_nonnegative_matrix_unchanged(self, rng):
        raw = rng.uniform(0.0, 0.9, size=(5, 5))
        raw = (raw + raw.T) / 2
        np.fill_diagonal(raw, 0.0)
        net = clamp_negative_weights(raw)
        np.testing.assert_array_equal(net.weights, raw)

    def test_mixed_matrix_flips_exactly_the_negatives(self, rng):
        raw = np.array(
            [
                [0.0, -0.1, 0.3, -0.4],
                [-0.1, 0.0, 0.2, 0.5],
                [0.3, 0.2, 0.0, -0.6],
                [-0.4, 0.5, -0.6, 0.0],
            ]
        )
        # scan oracle: count strictly negative off-diagonal entries (upper)
        expected_zeros = sum(
            1 for i in range(4) for j in range(i + 1, 4) if raw[i, j] < 0
        )
        assert expected_zeros == 3
        net = clamp_negative_weights(raw)
        introduced = sum(
            1
            for i in range(4)
            for j in range(i + 1, 4)
            if raw[i, j] < 0 and net.weights[i, j] == 0.0
        )
        assert introduced == 3
        assert (net.weights >= 0).all()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=2**31 - 1))
    def test_idempotent(self, n, seed):
        r = np.random.default_rng(seed)
        raw = r.uniform(-0.9, 0.9, size=(n, n))
        raw = (raw + raw.T) / 2
        np.fill_diagonal(raw, 0.0)
        once = clamp_negative_weights(raw)
        twice = clamp_negative_weights(once.weights)
        np.testing.assert_array_equal(once.weights, twice.weights)

    def test_weights_are_read_only(self):
        net = clamp_negative_weights(np.array([[0.0, 0.2], [0.2, 0.0]]))
        with pytest.raises(ValueError):
            net.weights[0, 1] = 0.5


class TestDistances:
    def test_unit_conversion_100mm_is_1dm(self):
        atlas = NodeAtlas(labels=("a", "b"),
                          coords_mm=np.array([[0.0, 0, 0], [100.0, 0, 0]]))
        d = compute_distances(atlas)
        assert d.values_dm[0, 1] == pytest.approx(1.0)

    def test_identical_coordinates(self):
        atlas = NodeAtlas(labels=("a", "b"),
                          coords_mm=np.array([[5.0, 5, 5], [5.0, 5, 5]]))
        assert compute_distances(atlas).values_dm[0, 1] == 0.0

    def test_three_four_five_triangle(self):
        atlas = NodeAtlas(labels=("a", "b"),
                          coords_mm=np.array([[0.0, 0, 0], [30.0, 40.0, 0]]))
        assert compute_distances(atlas).values_dm[0, 1] == pytest.approx(0.5)

    def test_translation_invariance(self, rng):
        coords = rng.uniform(-70, 70, size=(12, 3))
        shifted = coords + np.array([13.0, -40.0, 22.0])
        d1 = compute_distances(NodeAtlas(labels=tuple("n" * 12), coords_mm=coords))
        d2 = compute_distances(NodeAtlas(labels=tuple("n" * 12), coords_mm=shifted))
        assert np.max(np.abs(d1.values_dm - d2.values_dm)) < 1e-12

    def test_triangle_inequality(self, rng):
        coords = rng.uniform(-70, 70, size=(8, 3))
        d = compute_distances(NodeAtlas(labels=tuple("n" * 8), coords_mm=coords)).values_dm
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    assert d[i, j] <= d[i, k] + d[k, j] + 1e-12

    def test_non_finite_coordinate_rejected(self):
        atlas = NodeAtlas(labels=("a", "b"),
                          coords_mm=np.array([[0.0, 0, 0], [np.inf, 0, 0]]))
        with pytest.raises(DataError, match="non-finite"):
            compute_distances(atlas)


class TestTables:
    def test_load_study_roundtrip(self, small_study):
        d = small_study.directory
        study = load_study(d / "networks", d / "atlas.csv", d / "subjects.csv")
        assert len(study.networks) == 8
        assert study.n_nodes == 10
        np.testing.assert_allclose(
            study.networks[0].weights, small_study.networks[0].weights, atol=1e-15
        )

    def test_missing_atlas_column(self, tmp_path):
        f = tmp_path / "atlas.csv"
        f.write_text("node,label,x_mm,y_mm\n0,a,0,0\n")
        with pytest.raises(DataError, match="z_mm"):
            load_atlas(f)

    def test_subject_table_binary_validation(self, tmp_path):
        f = tmp_path / "subjects.csv"
        f.write_text("subject_id,group,sex,education_years\na,2,0,12\n")
        with pytest.raises(DataError, match="group"):
            load_subjects(f)

    def test_weak_cutoff_optional(self, small_study):
        net = small_study.networks[0]
        cut = apply_weak_cutoff(net, 0.3)
        w = cut.weights
        assert ((w == 0) | (w >= 0.3)).all()
        # default path leaves weights untouched
        same = apply_weak_cutoff(net, 0.0)
        np.testing.assert_array_equal(same.weights, net.weights)
