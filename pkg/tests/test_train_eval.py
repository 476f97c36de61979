import numpy as np
import pytest

from modewise.models import Network, build_config
from modewise.pipeline import ChannelStack, Dataset
from modewise.train_eval import (
    EvalReport,
    TrainConfig,
    TrainingDiverged,
    best_epoch,
    cv_folds,
    evaluate,
    grid_search_dropout,
    train,
    train_ensemble,
)


def constant_dataset(n, label, m=16, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        data = np.zeros((4, m), dtype=np.float32)
        data[0] = scale + rng.normal(0, 0.01 * scale, m)
        samples.append(ChannelStack(data.astype(np.float32), label, m))
    return samples


def two_class_dataset(n_per_class=12, m=16, seed=0):
    # class 0: low speed channel; class 1: high speed channel
    samples = (constant_dataset(n_per_class, 0, m, 1.0, seed)
               + constant_dataset(n_per_class, 1, m, 5.0, seed + 1))
    return Dataset(samples, M=m)


class TestBestEpoch:
    def test_argmax(self):
        assert best_epoch([0.5, 0.7, 0.6]) == 2

    def test_monotone_takes_last(self):
        assert best_epoch([0.1, 0.2, 0.3, 0.4]) == 4

    def test_plateau_takes_earliest(self):
        assert best_epoch([0.7, 0.7]) == 1

    def test_patience_halts(self):
        # improvement at epoch 5 is never reached with patience 2
        assert best_epoch([0.5, 0.4, 0.4, 0.4, 0.9], patience=2) == 1

    def test_patience_sees_improvement_before_halt(self):
        assert best_epoch([0.5, 0.7, 0.6], patience=1) == 2

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            best_epoch([])


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(early_stop="maybe")


class TestTrain:
    def test_single_class_reaches_full_accuracy(self):
        ds = Dataset(constant_dataset(10, 3, m=16), M=16)
        net = Network.build(build_config("A", M=16), seed=0)
        cfg = TrainConfig(batch_size=4, max_epochs=5, early_stop="none", seed=0)
        result = train(net, ds, cfg)
        assert result.train_acc[-1] == 1.0
        assert len(result.train_acc) <= 5

    def test_two_separable_classes(self):
        ds = two_class_dataset()
        net = Network.build(build_config("A", M=16), seed=1)
        cfg = TrainConfig(batch_size=8, max_epochs=40, early_stop="val",
                          monitor_frac=0.25, seed=1)
        result = train(net, ds, cfg)
        assert max(result.monitor_acc) == 1.0
        assert result.best_epoch >= 1
        assert result.monitor_kind == "val"

    def test_early_stop_restores_best_epoch_weights(self):
        ds = two_class_dataset(8)
        net = Network.build(build_config("A", M=16), seed=2)
        cfg = TrainConfig(batch_size=8, max_epochs=6, early_stop="val",
                          monitor_frac=0.25, seed=2)
        result = train(net, ds, cfg)
        assert result.best_epoch == int(np.argmax(result.monitor_acc)) + 1

    def test_monitor_on_test_set(self):
        ds = two_class_dataset(8, seed=3)
        test = two_class_dataset(4, seed=4)
        net = Network.build(build_config("A", M=16), seed=3)
        cfg = TrainConfig(batch_size=8, max_epochs=4, early_stop="test", seed=3)
        result = train(net, ds, cfg, monitor_set=test)
        assert len(result.monitor_acc) == len(result.train_acc)
        assert result.monitor_kind == "test"

    def test_test_monitor_requires_set(self):
        ds = two_class_dataset(6)
        net = Network.build(build_config("A", M=16), seed=0)
        with pytest.raises(ValueError, match="monitor set"):
            train(net, ds, TrainConfig(early_stop="test", max_epochs=1))

    def test_patience_halts_early(self):
        ds = two_class_dataset(8, seed=5)
        net = Network.build(build_config("A", M=16), seed=5)
        cfg = TrainConfig(batch_size=8, max_epochs=40, early_stop="val",
                          monitor_frac=0.25, patience=2, seed=5)
        result = train(net, ds, cfg)
        assert len(result.train_acc) < 40

    def test_divergence_reports_epoch(self):
        ds = two_class_dataset(6, seed=6)
        net = Network.build(build_config("A", M=16), seed=6)
        net.named_params()[1][0][0, 0, 0] = np.nan  # poison one weight
        cfg = TrainConfig(batch_size=4, max_epochs=5, early_stop="none", seed=6)
        with pytest.raises(TrainingDiverged) as err:
            train(net, ds, cfg)
        assert err.value.epoch == 1

    def test_deterministic_given_seed(self):
        def run():
            ds = two_class_dataset(6, seed=7)
            net = Network.build(build_config("A", M=16), seed=7)
            cfg = TrainConfig(batch_size=4, max_epochs=3, early_stop="none", seed=7)
            train(net, ds, cfg)
            return net.get_weights()

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestEvaluate:
    def test_perfect_predictions(self):
        ds = Dataset(constant_dataset(6, 2, m=8), M=8)
        report = evaluate(lambda x: np.full(len(x), 2), ds)
        assert report.accuracy == 1.0
        assert report.confusion[2, 2] == 6
        assert report.recall[2] == 1.0 and report.precision[2] == 1.0

    def test_single_wrong_sample(self):
        ds = Dataset(constant_dataset(1, 0, m=8), M=8)
        report = evaluate(lambda x: np.full(len(x), 1), ds)
        assert report.accuracy == 0.0
        assert report.recall[0] == 0.0
        assert any("precision[0]" in f for f in report.flags)

    def test_rates_from_counts(self):
        # a walk row of (2014, 53, 40, 3, 2) gives recall 2014/2112
        ds = Dataset(constant_dataset(2112, 0, m=8), M=8)
        preds = np.concatenate([np.full(2014, 0), np.full(53, 1),
                                np.full(40, 2), np.full(3, 3), np.full(2, 4)])
        report = evaluate(lambda x: preds[:len(x)], ds)
        assert report.recall[0] == pytest.approx(2014 / 2112)
        assert report.confusion.sum() == 2112

    def test_total_equals_test_size_and_trace_accuracy(self):
        rng = np.random.default_rng(0)
        samples = []
        for _ in range(40):
            samples.append(ChannelStack(np.zeros((4, 8), np.float32),
                                        int(rng.integers(0, 5)), 8))
        ds = Dataset(samples, M=8)
        preds = rng.integers(0, 5, size=40)
        report = evaluate(lambda x: preds, ds)
        assert report.confusion.sum() == 40
        assert report.accuracy == report.confusion.trace() / 40

    def test_permutation_invariant_metrics(self):
        rng = np.random.default_rng(1)
        samples = [ChannelStack(np.zeros((4, 8), np.float32),
                                int(rng.integers(0, 5)), 8) for _ in range(30)]
        preds = rng.integers(0, 5, size=30)
        ds = Dataset(samples, M=8)
        r1 = evaluate(lambda x: preds, ds)
        perm = rng.permutation(30)
        ds2 = Dataset([samples[i] for i in perm], M=8)
        r2 = evaluate(lambda x: preds[perm], ds2)
        np.testing.assert_array_equal(r1.confusion, r2.confusion)
        assert r1.accuracy == r2.accuracy

    def test_format_table_contains_counts(self):
        ds = Dataset(constant_dataset(3, 1, m=8), M=8)
        report = evaluate(lambda x: np.full(len(x), 1), ds)
        text = report.format_table(["walk", "bike", "bus", "driving", "train"])
        assert "bike" in text and "accuracy: 100.00%" in text

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError):
            evaluate(lambda x: x, Dataset([], M=8))


class TestCvFolds:
    def test_partition_exact(self):
        folds = cv_folds(23, 5, seed=0)
        assert len(folds) == 5
        merged = np.sort(np.concatenate(folds))
        np.testing.assert_array_equal(merged, np.arange(23))

    def test_seeded(self):
        a = cv_folds(20, 4, seed=3)
        b = cv_folds(20, 4, seed=3)
        for f, g in zip(a, b):
            np.testing.assert_array_equal(f, g)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            cv_folds(10, 1, seed=0)
        with pytest.raises(ValueError):
            cv_folds(3, 5, seed=0)


class TestGridSearch:
    def test_singleton_grid(self):
        ds = two_class_dataset(10, m=16, seed=9)
        result = grid_search_dropout("G", ds, [0.5], k=2, epochs=1,
                                     batch_size=8, seed=0, filters=(2, 2, 2))
        assert result.best == (0.5, 0.5)
        assert set(result.table) == {(0.5, 0.5)}

    def test_tie_takes_lexicographic_smallest(self):
        ds = Dataset(constant_dataset(12, 0, m=16), M=16)
        # a single-class set: every cell scores 1.0, tie broken lexically
        result = grid_search_dropout("G", ds, [0.3, 0.5], k=2, epochs=1,
                                     batch_size=8, seed=0, filters=(2, 2, 2))
        assert result.best == (0.3, 0.3)
        assert len(result.table) == 4

    def test_empty_grid_rejected(self):
        ds = two_class_dataset(4)
        with pytest.raises(ValueError):
            grid_search_dropout("G", ds, [], k=2)


class TestEnsembleTraining:
    def test_members_differ_and_average(self):
        ds = two_class_dataset(10, m=16, seed=11)
        spec = build_config("A", M=16)
        cfg = TrainConfig(batch_size=8, max_epochs=2, early_stop="none", seed=11)
        ens, results = train_ensemble(spec, ds, cfg, n_members=3)
        assert len(ens.members) == 3
        assert len(results) == 3
        w0 = ens.members[0].get_weights()[0]
        w1 = ens.members[1].get_weights()[0]
        assert not np.array_equal(w0, w1)
        probs = ens.predict_proba(ds.stacked())
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_reproducible(self):
        ds = two_class_dataset(8, m=16, seed=12)
        spec = build_config("A", M=16)
        cfg = TrainConfig(batch_size=8, max_epochs=1, early_stop="none", seed=12)
        e1, _ = train_ensemble(spec, ds, cfg, n_members=2)
        e2, _ = train_ensemble(spec, ds, cfg, n_members=2)
        for m1, m2 in zip(e1.members, e2.members):
            for a, b in zip(m1.get_weights(), m2.get_weights()):
                np.testing.assert_array_equal(a, b)
