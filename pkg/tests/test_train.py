import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volseq.data import DatasetManifest, ManifestRow, balance_dataset, default_templates, group_sequences
from volseq.errors import DivergenceError, InputError, SizeError, StratificationWarning
from volseq.model import build_architecture
from volseq.train import (
    Optimizer, TrainConfig, evaluate, kfold_cross_validate, kfold_indices, stratified_split, train_model,
)

SHAPE = (32, 32, 16, 1)


def toy_data(n, seed=0, visits=2):
    """Class ``k`` volumes are constant at level ``k`` plus noise."""
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 4
    arrays = [np.clip(0.2 * k + 0.1 + 0.02 * r.normal(size=(visits,) + SHAPE), 0, 1) for k in labels]
    return arrays, labels


def fast_cfg(**kw):
    base = dict(epochs=1, profile="reduced", seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1.0),
                                     dict(optimizer="rmsprop"), dict(dropout=1.0), dict(dtype="float16")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.learning_rate, c.optimizer) == (35, 4, 1e-3, "adam")


class TestStratifiedSplit:
    def test_proportions(self):
        labels = np.repeat([0, 1, 2, 3], [43, 124, 42, 22])
        s = stratified_split(labels, seed=1)
        assert len(np.intersect1d(s.train, s.test)) == 0
        np.testing.assert_array_equal(np.sort(np.r_[s.train, s.test]), np.arange(labels.size))
        for k, n in zip(range(4), (43, 124, 42, 22)):
            assert abs((labels[s.test] == k).sum() - 0.2 * n) <= 1

    def test_seeded(self):
        labels = np.repeat([0, 1], 20)
        a, b = stratified_split(labels, seed=3), stratified_split(labels, seed=3)
        np.testing.assert_array_equal(a.test, b.test)
        assert not np.array_equal(a.test, stratified_split(labels, seed=4).test)

    def test_patient_disjoint_with_augmentation(self):
        rows = [ManifestRow(f"c{k}p{i}", v, f"{k}{i}{v}", k) for k, n in ((1, 6), (2, 12), (3, 5), (4, 3))
                for i in range(n) for v in ("BL", "V01")]
        m = balance_dataset(DatasetManifest(rows), default_templates(), 14)
        seqs = group_sequences(m)
        labels = np.array([s.label for s in seqs])
        pids = [s.patient_id for s in seqs]
        sp = stratified_split(labels, pids, seed=0)
        assert not {pids[i] for i in sp.train} & {pids[i] for i in sp.test}

    def test_small_class_warns(self):
        labels = np.array([0, 0, 0, 0, 0, 1])
        with pytest.warns(StratificationWarning):
            s = stratified_split(labels, test_fraction=0.5)
        assert s.train.size + s.test.size == 6

    def test_patient_in_two_classes(self):
        with pytest.raises(InputError):
            stratified_split([0, 1], ["p", "p"])


class TestKFold:
    def test_sizes_n103(self):
        folds = kfold_indices(103, 10, seed=0)
        assert sorted((f.test.size for f in folds), reverse=True) == [11, 11, 11] + [10] * 7
        allv = np.concatenate([f.test for f in folds])
        np.testing.assert_array_equal(np.sort(allv), np.arange(103))
        for f in folds:
            assert len(np.intersect1d(f.train, f.test)) == 0 and f.train.size + f.test.size == 103

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 60), st.integers(2, 12), st.integers(0, 1000))
    def test_partition(self, n, k, seed):
        if n < k:
            with pytest.raises(SizeError):
                kfold_indices(n, k, seed)
            return
        folds = kfold_indices(n, k, seed)
        sizes = [f.test.size for f in folds]
        assert max(sizes) - min(sizes) <= 1
        np.testing.assert_array_equal(np.sort(np.concatenate([f.test for f in folds])), np.arange(n))

    def test_groups_kept_together(self):
        groups = [i // 3 for i in range(30)]
        for f in kfold_indices(30, 5, seed=2, groups=groups):
            assert not {groups[i] for i in f.train} & {groups[i] for i in f.test}

    def test_too_few(self):
        with pytest.raises(SizeError):
            kfold_indices(5, 10)
        with pytest.raises(SizeError):
            kfold_indices(10, 1)


class TestOptimizer:
    def test_adam_first_step(self):
        p = {"w": np.array([1.0, -2.0])}
        g = np.array([0.3, -4.0])
        Optimizer(p, TrainConfig(learning_rate=0.1)).step({"w": g})
        # bias-corrected first step moves each coordinate by lr * sign(g) (up to epsilon)
        expected = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"], expected, rtol=0, atol=1e-15)

    def test_sgd_momentum(self):
        p = {"w": np.array([0.0])}
        opt = Optimizer(p, TrainConfig(learning_rate=0.5, optimizer="sgd", momentum=0.9))
        opt.step({"w": np.array([1.0])})
        opt.step({"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(-0.5 - 0.5 * 1.9, abs=1e-15)


class TestTrain:
    def test_lr_zero_freezes_trainables(self):
        arrays, labels = toy_data(4)
        spec = build_architecture("gru", seed=0, profile="reduced")
        trained, _ = train_model(spec, arrays, labels, fast_cfg(learning_rate=0.0))
        before = dict(spec.named_params(trainable_only=True))
        for k, v in trained.named_params(trainable_only=True):
            np.testing.assert_array_equal(v, before[k], err_msg=k)
        # BN running statistics still move in train mode
        assert not np.array_equal(trained.layer("bn1").params["running_mean"], spec.layer("bn1").params["running_mean"])

    def test_does_not_mutate_input(self):
        arrays, labels = toy_data(4)
        spec = build_architecture("lstm", seed=0, profile="reduced")
        snap = {k: v.copy() for k, v in spec.named_params()}
        train_model(spec, arrays, labels, fast_cfg())
        for k, v in spec.named_params():
            np.testing.assert_array_equal(v, snap[k])

    def test_first_epoch_loss_near_chance(self):
        arrays, labels = toy_data(8)
        _, hist = train_model(build_architecture("lstm", seed=0, profile="reduced"), arrays, labels,
                              fast_cfg(learning_rate=1e-4))
        assert abs(hist[0]["loss"] - math.log(4)) <= 0.2

    def test_single_sample_overfit(self):
        arrays, labels = toy_data(1, visits=1)
        cfg = fast_cfg(epochs=200, batch_size=1)
        losses = []
        train_model(build_architecture("lstm", seed=0, profile="reduced"), arrays, labels, cfg,
                    log=lambda e: losses.append(e["loss"]))
        assert min(losses) < 0.01

    def test_deterministic(self):
        arrays, labels = toy_data(6)
        spec = build_architecture("sgru", seed=2, profile="reduced")
        a, ha = train_model(spec, arrays, labels, fast_cfg(epochs=2, seed=5))
        b, hb = train_model(spec, arrays, labels, fast_cfg(epochs=2, seed=5))
        assert ha == hb
        for (_, x), (_, y) in zip(a.named_params(), b.named_params()):
            assert x.tobytes() == y.tobytes()

    def test_float32(self):
        arrays, labels = toy_data(4)
        trained, hist = train_model(build_architecture("gru", seed=0, profile="reduced"), arrays, labels,
                                    fast_cfg(dtype="float32"))
        assert all(v.dtype == np.float32 for _, v in trained.named_params())
        assert math.isfinite(hist[0]["loss"])

    def test_divergence_named(self):
        arrays, labels = toy_data(4)
        arrays[2][:] = np.nan
        with pytest.raises(DivergenceError, match="epoch 1"):
            train_model(build_architecture("gru", seed=0, profile="reduced"), arrays, labels, fast_cfg(batch_size=2))

    def test_empty(self):
        with pytest.raises(InputError):
            train_model(build_architecture("gru", profile="reduced"), [], [], fast_cfg())


@pytest.fixture(scope="module")
def setup():
    arrays, labels = toy_data(8, seed=1)
    return build_architecture("lstm", seed=0, profile="reduced"), arrays, labels


class TestEvaluate:
    def test_idempotent(self, setup):
        spec, arrays, labels = setup
        a, b = evaluate(spec, arrays, labels), evaluate(spec, arrays, labels)
        assert a.flat() == b.flat()
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_keys(self, setup):
        spec, arrays, labels = setup
        flat = evaluate(spec, arrays, labels).flat()
        assert list(flat) == ["MAAccuracy", "MAPrecision", "MARecall", "MAF1", "AUC_class1", "AUC_class2",
                              "AUC_class3", "AUC_class4", "MacroOVR_AUC"]

    def test_absent_class_nan(self, setup):
        spec, arrays, labels = setup
        keep = labels != 3
        b = evaluate(spec, [a for a, k in zip(arrays, keep) if k], labels[keep])
        assert np.isnan(b.class_auc[3]) and math.isfinite(b.macro_auc)


def test_cross_validation_k2():
    arrays, labels = toy_data(8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = kfold_cross_validate("gru", arrays, labels, fast_cfg(), k=2)
    assert rep.k == 2 and len(rep.confusions) == 2
    assert sum(int(c.sum()) for c in rep.confusions) == 8
    assert set(rep.mean()) == set(rep.std()) and "MacroOVR_AUC" in rep.mean()
