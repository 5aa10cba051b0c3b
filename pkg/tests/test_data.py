import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import trilinear_point
from volseq.data import (
    AffineTransform, DatasetManifest, ManifestRow, Volume, affine_resample, balance_dataset, default_templates,
    generate_synthetic_cohort, group_sequences, load_dataset, materialize, preprocess_volume, read_manifest,
    read_nifti, write_manifest,
)
from volseq.data.augment import _rot, lineage_violations, read_templates, write_templates
from volseq.data.manifest import visit_rank
from volseq.data.resample import flip_transform, resize_trilinear
from volseq.data.synthetic import patient_volumes, structure_radius
from volseq.errors import CapacityError, InputError, LabelError, SchemaError, ShapeError, TransformError
from volseq.tensor import flip


def smooth_phantom(shape=(20, 20, 20)):
    idx = np.indices(shape, dtype=float)
    c = (np.array(shape) - 1) / 2.0
    r2 = sum(((idx[a] - c[a]) / (shape[a] / 4.0)) ** 2 for a in range(3))
    return np.exp(-r2)


def counts_manifest(counts, visits=("BL", "V01")):
    rows = []
    for label, n in counts.items():
        for i in range(n):
            for v in visits:
                rows.append(ManifestRow(f"c{label}p{i}", v, f"c{label}p{i}_{v}.nii.gz", label))
    return DatasetManifest(rows, 0)


class TestPreprocess:
    def test_identity_shape_minmax(self, rng):
        g = rng.normal(size=(4, 5, 6))
        out = preprocess_volume(Volume.from_grid(g), (4, 5, 6))
        assert out.shape == (4, 5, 6, 1)
        assert out.min() == 0.0 and out.max() == 1.0
        np.testing.assert_allclose(out[..., 0], (g - g.min()) / (g.max() - g.min()), rtol=0, atol=1e-15)

    def test_ones_mask_is_noop(self, rng):
        v = Volume.from_grid(rng.normal(size=(6, 6, 6)))
        m = Volume.from_grid(np.ones((6, 6, 6)))
        np.testing.assert_array_equal(preprocess_volume(v, (4, 4, 4), m), preprocess_volume(v, (4, 4, 4)))

    def test_mask_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            preprocess_volume(Volume.from_grid(np.zeros((4, 4, 4))), (4, 4, 4), Volume.from_grid(np.ones((3, 4, 4))))

    def test_downsample_ramp_oracle(self):
        idx = np.indices((8, 8, 8), dtype=float)
        ramp = 1.0 * idx[0] + 2.0 * idx[1] - 0.5 * idx[2]
        out = resize_trilinear(ramp, (4, 4, 4))
        axis = np.linspace(0.0, 7.0, 4)
        for i, j, k in np.ndindex(4, 4, 4):
            p = (axis[i], axis[j], axis[k])
            assert abs(out[i, j, k] - trilinear_point(ramp, p)) <= 1e-9
            # trilinear reproduces a linear field exactly
            assert abs(out[i, j, k] - (p[0] + 2 * p[1] - 0.5 * p[2])) <= 1e-9

    def test_constant_volume(self):
        out = preprocess_volume(Volume.from_grid(np.full((4, 4, 4), 3.0)), (4, 4, 4))
        assert not out.any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.tuples(*[st.integers(2, 7)] * 3))
    def test_range(self, seed, target):
        g = np.random.default_rng(seed).normal(size=(5, 6, 4)) * 100
        out = preprocess_volume(Volume.from_grid(g), target)
        assert out.shape == target + (1,)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestAffineResample:
    def test_identity(self, rng):
        v = Volume(rng.normal(size=(5, 6, 7)), (2.0, 1.0, 1.5), np.diag([2.0, 1.0, 1.5, 1.0]))
        np.testing.assert_array_equal(affine_resample(v, AffineTransform.identity()).grid, v.grid)

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_flip_matches_tensor_flip(self, axis, rng):
        aff = np.diag([1.5, 2.0, 1.0, 1.0])
        aff[:3, 3] = [4.0, -3.0, 1.0]
        v = Volume(rng.normal(size=(5, 6, 7)), (1.5, 2.0, 1.0), aff)
        np.testing.assert_array_equal(affine_resample(v, flip_transform(v, axis)).grid, flip(v.grid, axis))

    def test_rotation_inverse_round_trip(self):
        v = Volume.from_grid(smooth_phantom())
        center = (np.array(v.shape) - 1) / 2.0
        t = AffineTransform(_rot(2, 7.0) @ _rot(0, -4.0), np.zeros(3)).centered(center)
        back = affine_resample(affine_resample(v, t), t.inverse())
        assert np.abs(back.grid - v.grid).max() <= 0.05

    def test_singular(self):
        v = Volume.from_grid(np.zeros((3, 3, 3)))
        with pytest.raises(TransformError):
            affine_resample(v, AffineTransform(np.diag([1.0, 0.0, 1.0]), np.zeros(3)))

    def test_pure_translation_shifts(self, rng):
        g = rng.normal(size=(6, 6, 6))
        out = affine_resample(Volume.from_grid(g), AffineTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))).grid
        np.testing.assert_array_equal(out[1:], g[:-1])
        assert not out[0].any()


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = counts_manifest({1: 2, 3: 1})
        m.rows.append(ManifestRow("c1p0", "BL", "x.nii.gz", 1, "template:2+flip:1", "2020-01-01", "mask.nii"))
        m = DatasetManifest(m.rows, 42)
        write_manifest(m, tmp_path / "m.tsv")
        back = read_manifest(tmp_path / "m.tsv")
        assert back.rows == m.rows and back.seed == 42 and back.root == tmp_path

    def test_missing_column(self, tmp_path):
        (tmp_path / "m.tsv").write_text("patient_id\tpath\tclass\n")
        with pytest.raises(SchemaError):
            read_manifest(tmp_path / "m.tsv")

    def test_bad_class(self):
        with pytest.raises(LabelError):
            DatasetManifest([ManifestRow("p", "BL", "a", 5)])

    def test_bad_provenance(self):
        with pytest.raises(SchemaError):
            DatasetManifest([ManifestRow("p", "BL", "a", 1, "rotate:3")])

    def test_visit_order(self):
        codes = ["V10", "BL", "V02", "SC", "V01"]
        assert sorted(codes, key=visit_rank) == ["SC", "BL", "V01", "V02", "V10"]

    def test_date_order_wins(self):
        rows = [ManifestRow("p", "BL", "a", 1, date="2021-05-01"), ManifestRow("p", "V01", "b", 2, date="2020-01-01")]
        (s,) = group_sequences(DatasetManifest(rows))
        assert [r.visit_code for r in s.visits] == ["V01", "BL"]
        assert s.label == 1

    def test_last_visit_label(self):
        rows = [ManifestRow("p", "V01", "b", 3), ManifestRow("p", "BL", "a", 2)]
        (s,) = group_sequences(DatasetManifest(rows))
        assert s.label == 3 and s.labels == [2, 3]

    def test_min_visits(self):
        with pytest.raises(InputError):
            group_sequences(DatasetManifest([ManifestRow("p", "BL", "a", 1)]))

    def test_repeated_visit(self):
        rows = [ManifestRow("p", "BL", "a", 1), ManifestRow("p", "BL", "b", 1)]
        with pytest.raises(InputError):
            group_sequences(DatasetManifest(rows))


class TestBalance:
    def test_reference_counts(self):
        m = counts_manifest({1: 43, 2: 124, 3: 42, 4: 22})
        out = balance_dataset(m, default_templates(), 375, seed=0)
        assert out.sequence_counts() == {1: 375, 2: 375, 3: 375, 4: 375}
        assert lineage_violations(out) == []

    def test_noop(self):
        m = counts_manifest({1: 3, 2: 3, 3: 3, 4: 3})
        out = balance_dataset(m, [], 3)
        assert out.rows == m.rows

    def test_templates_before_flips(self):
        out = balance_dataset(counts_manifest({1: 4, 2: 2}), default_templates(), 5)
        provs = sorted(s.provenance for s in group_sequences(out) if s.label == 2)
        # class 2 reaches the largest class (4) with templates, then a flip adds the fifth
        assert provs == ["flip:0", "original", "original", "template:0", "template:0"]

    def test_visits_share_transform(self):
        out = balance_dataset(counts_manifest({1: 5, 2: 1}), default_templates(), 5)
        for s in group_sequences(out):
            assert len({r.provenance for r in s.visits}) == 1 and len(s.visits) == 2

    def test_seeded(self):
        m = counts_manifest({1: 10, 2: 3})
        assert balance_dataset(m, default_templates(), 12, seed=4).rows == balance_dataset(m, default_templates(), 12, seed=4).rows

    def test_target_below_largest(self):
        with pytest.raises(CapacityError):
            balance_dataset(counts_manifest({1: 10, 2: 3}), default_templates(), 9)

    def test_deficit_reported(self):
        with pytest.raises(CapacityError, match="deficit 2"):
            balance_dataset(counts_manifest({1: 1, 2: 1}), [], 6)

    def test_template_file_round_trip(self, tmp_path):
        write_templates(default_templates(), tmp_path / "t.txt")
        back = read_templates(tmp_path / "t.txt")
        for a, b in zip(default_templates(), back):
            np.testing.assert_array_equal(a.linear, b.linear)
            np.testing.assert_array_equal(a.translation, b.translation)
            assert a.label == b.label

    def test_materialize(self, small_cohort, tmp_path):
        m = read_manifest(small_cohort)
        out = balance_dataset(m.with_rows(m.rows[:12] + m.rows[24:28]), default_templates(), 7, out_dir=tmp_path / "aug")
        n = materialize(out, default_templates())
        derived = [r for r in out.rows if not r.is_original]
        assert n == len(derived) > 0
        for r in derived:
            src = next(o for o in out.rows if o.is_original and (o.patient_id, o.visit_code) == (r.patient_id, r.visit_code))
            got = read_nifti(out.resolve(r.path)).grid
            if r.provenance.startswith("flip:"):
                axis = int(r.provenance.split(":")[1])
                ref = flip(read_nifti(out.resolve(src.path)).grid, axis)
                np.testing.assert_array_equal(got, ref.astype(np.float32))
            assert got.shape == (16, 16, 16)


class TestSynthetic:
    def test_counts(self, small_cohort):
        m = read_manifest(small_cohort)
        assert len(m.rows) == 48 and len(group_sequences(m)) == 24

    def test_deterministic(self, tmp_path):
        a = generate_synthetic_cohort(tmp_path / "a", 2, shape=(16, 16, 16), seed=9)
        generate_synthetic_cohort(tmp_path / "b", 2, shape=(16, 16, 16), seed=9)
        for r in a.rows:
            assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
        assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()

    def test_too_small(self, tmp_path):
        with pytest.raises(ShapeError):
            generate_synthetic_cohort(tmp_path, 1, shape=(8, 8, 8))

    def test_structure_intensity_decreases_with_class(self):
        shape = (32, 32, 16)
        means = []
        for label in (1, 2, 3, 4):
            vals = []
            for i in range(20):
                grids, geom = patient_volumes(label, i, shape, 1, seed=0)
                center, semi = geom[0]
                inside = structure_radius(shape, center, semi) <= 0.8
                vals.append(grids[0][inside].mean())
            means.append(np.mean(vals))
        assert all(a > b for a, b in zip(means, means[1:])), means

    def test_shrinks_across_visits(self):
        _, geom = patient_volumes(3, 0, (32, 32, 16), 3, seed=0)
        sizes = [np.prod(semi) for _, semi in geom]
        assert sizes[0] > sizes[1] > sizes[2]

    def test_loads_as_sequences(self, small_cohort):
        seqs, arrays, labels = load_dataset(read_manifest(small_cohort), (16, 16, 16))
        assert len(arrays) == 24 and arrays[0].shape == (2, 16, 16, 16, 1)
        assert sorted(set(labels.tolist())) == [0, 1, 2, 3]
