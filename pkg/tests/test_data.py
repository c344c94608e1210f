import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xcompat.data import (
    Dataset, LibsvmFormatError, SplitPlan, SynthSpec, dumps_libsvm, load_dataset, load_libsvm,
    make_splits, parse_libsvm, standardize, synth_classification, synth_regression, write_libsvm,
)
from xcompat.metrics import Task


class TestParse:
    def test_sparse_line(self):
        ds = parse_libsvm(["1 1:0.5 3:-2"], d=3, task="regression")
        assert ds.features.tolist() == [[0.5, 0.0, -2.0]]
        assert ds.labels.tolist() == [1.0]

    def test_empty_feature_list_and_label_map(self):
        ds = parse_libsvm(["-1", "+1 2:1"], d=2)
        assert ds.task is Task.CLASSIFICATION
        assert ds.features.tolist() == [[0.0, 0.0], [0.0, 1.0]]
        assert ds.labels.tolist() == [0.0, 1.0]

    def test_regression_detected(self):
        ds = parse_libsvm(["0.25 1:1", "3.5 2:1"])
        assert ds.task is Task.REGRESSION
        assert ds.d == 2

    def test_blank_lines_and_comments(self):
        ds = parse_libsvm(io.StringIO("\n1 1:2 # note\n\n-1 2:3\n"))
        assert ds.n == 2

    @pytest.mark.parametrize("text, lineno", [
        ("1 1:1\n1 3:1 2:1", 2),
        ("1 2:1 2:3", 1),
        ("1 0:1", 1),
        ("1 1:abc", 1),
        ("abc 1:1", 1),
        ("1 1:1\n\n1 4:1", 3),
        ("1 1-2", 1),
        ("1 1:nan", 1),
    ])
    def test_errors_report_line(self, text, lineno):
        with pytest.raises(LibsvmFormatError) as err:
            parse_libsvm(io.StringIO(text), d=3)
        assert err.value.lineno == lineno
        assert f"line {lineno}" in str(err.value)

    def test_no_samples(self):
        with pytest.raises(ValueError):
            parse_libsvm(["", "# only a comment"])

    def test_bad_classification_labels(self):
        with pytest.raises(ValueError):
            parse_libsvm(["2 1:1"], task="classification")

    @settings(max_examples=100)
    @given(st.integers(1, 6).flatmap(lambda d: arrays(
        np.float64, st.tuples(st.integers(1, 8), st.just(d)),
        elements=st.one_of(st.just(0.0), st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)))),
        st.booleans(), st.data())
    def test_round_trip(self, X, classification, data):
        n = X.shape[0]
        if classification:
            y = np.asarray(data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=n, max_size=n)))
            task = Task.CLASSIFICATION
        else:
            y = np.asarray(data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=n, max_size=n)))
            task = Task.REGRESSION
        ds = Dataset(X, y, task)
        back = parse_libsvm(io.StringIO(dumps_libsvm(ds)), d=X.shape[1], task=task)
        assert np.array_equal(back.features, X)
        assert np.array_equal(back.labels, y)

    def test_file_round_trip(self, tmp_path):
        ds = synth_classification(0, 50, 3)
        with open(tmp_path / "c.libsvm", "w") as fh:
            write_libsvm(ds, fh)
        back = load_libsvm(tmp_path / "c.libsvm", d=3)
        assert back.name == "c"
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 2)), np.zeros(0), "regression")
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), np.zeros(3), "regression")
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), np.zeros(1), "regression")
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 1)), np.array([2.0]), "classification")


class TestSplits:
    def _indexed(self, n=2500):
        # first feature carries the row id so splits can be traced back
        X = np.column_stack([np.arange(n, dtype=float), np.ones(n)])
        return Dataset(X, np.zeros(n), Task.REGRESSION)

    def test_sizes_and_nesting(self):
        d1, d2, de = make_splits(self._indexed(), SplitPlan(seed=3))
        assert (d1.n, d2.n, de.n) == (200, 1000, 1000)
        ids1, ids2, ide = (set(s.features[:, 0]) for s in (d1, d2, de))
        assert ids1 <= ids2
        assert not ids2 & ide
        assert len(ids2) == 1000 and len(ide) == 1000
        assert np.array_equal(d1.features, d2.features[:200])

    def test_seeded(self):
        ds = self._indexed()
        a, b = make_splits(ds, SplitPlan(seed=1)), make_splits(ds, SplitPlan(seed=1))
        c = make_splits(ds, SplitPlan(seed=2))
        assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
        assert not np.array_equal(a[1].features, c[1].features)

    def test_insufficient_samples(self):
        with pytest.raises(ValueError):
            make_splits(self._indexed(1999), SplitPlan())

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            SplitPlan(n_old=300, n_new=200)


class TestStandardize:
    def test_moments_and_constant_feature(self):
        rng = np.random.default_rng(0)
        X = rng.normal(3.0, 5.0, size=(400, 3))
        X[:, 2] = 7.0
        ref = Dataset(X, rng.normal(size=400), Task.REGRESSION)
        other = Dataset(X[:10] * 2, np.zeros(10), Task.REGRESSION)
        s_ref, (s_other,), stats = standardize(ref, [other])
        assert np.all(np.abs(s_ref.features[:, :2].mean(axis=0)) <= 1e-9)
        assert np.all(np.abs(s_ref.features[:, :2].var(axis=0) - 1) <= 1e-6)
        assert np.all(s_ref.features[:, 2] == 0) and np.all(s_other.features[:, 2] == 0)
        # same affine map everywhere
        np.testing.assert_allclose(s_other.features[:, :2], (X[:10, :2] * 2 - stats.mean[:2]) / stats.scale[:2])
        assert np.array_equal(s_ref.labels, ref.labels)

    def test_target(self):
        ds = synth_regression(1, 300, 2)
        s, _, stats = standardize(ds, target=True)
        assert abs(s.labels.mean()) <= 1e-12
        assert s.labels.std() == pytest.approx(1.0)
        assert stats.to_dict()["y_scale"] == pytest.approx(ds.labels.std())

    def test_classification_labels_untouched(self):
        ds = synth_classification(1, 100, 2)
        s, _, _ = standardize(ds, target=True)
        assert np.array_equal(s.labels, ds.labels)


class TestSynthetic:
    def test_reproducible(self):
        a, b = synth_regression(5, 100, 4), synth_regression(5, 100, 4)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.labels, synth_regression(6, 100, 4).labels)

    def test_mean_of_y(self):
        seed, n, d, noise = 2, 20_000, 8, 0.1
        ds = synth_regression(seed, n, d, noise)
        w = np.random.default_rng(seed).normal(size=d) / np.sqrt(d)
        e = np.exp(-1.0)
        var = w @ w + (1 - e ** 2) / 2 + 2 * w[0] * e / 2 + noise ** 2
        assert abs(ds.labels.mean()) <= 3 * np.sqrt(var / n)
        assert ds.labels.var() == pytest.approx(var, rel=0.05)

    def test_spec_parsing(self):
        spec = SynthSpec.parse("regression,n=50,d=3,seed=4,noise=0.0")
        assert (spec.kind, spec.n, spec.d, spec.seed, spec.noise) == ("regression", 50, 3, 4, 0.0)
        ds = load_dataset("synth:classification,n=40,d=2")
        assert ds.task is Task.CLASSIFICATION and ds.features.shape == (40, 2)
        for bad in ("cluster,n=3", "regression,n", "regression,m=3"):
            with pytest.raises(ValueError):
                SynthSpec.parse(bad)
        with pytest.raises(ValueError):
            synth_regression(0, 0, 3)
