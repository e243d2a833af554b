import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hlstm_phish.corpus import Dataset, Email
from hlstm_phish.evaluation import (
    Metrics,
    cross_validate,
    fit_predict,
    mean_metrics,
    metrics_csv,
    pooled_metrics,
    score,
)
from hlstm_phish.train import TrainConfig

from oracles import CONFUSION_CASES
from synthetic import separable_corpus


class TestScore:
    def test_two_thirds(self):
        m = score([1, 1, 1, 0], [1, 1, 0, 1])
        assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 0)
        assert m.precision == pytest.approx(2 / 3)
        assert m.recall == pytest.approx(2 / 3)
        assert m.f1 == pytest.approx(2 / 3)

    def test_all_correct(self):
        m = score([1, 0, 1], [1, 0, 1])
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)

    def test_no_positive_predictions(self):
        m = score([0, 0, 0], [1, 0, 1])
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)

    def test_errors(self):
        with pytest.raises(ValueError, match="length"):
            score([1, 0], [1])
        with pytest.raises(ValueError):
            score([], [])

    @pytest.mark.parametrize("counts,preds,labels,expected", CONFUSION_CASES)
    def test_constructed_cases(self, counts, preds, labels, expected):
        m = score(preds, labels)
        assert (m.tp, m.fp, m.tn, m.fn) == counts
        for got, want in zip((m.precision, m.recall, m.f1), expected):
            assert abs(got - want) <= 1e-15

    @settings(max_examples=100, deadline=None)
    @given(pairs=st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50),
           seed=st.integers(0, 1000))
    def test_permutation_invariant(self, pairs, seed):
        preds, labels = map(list, zip(*pairs))
        order = np.random.default_rng(seed).permutation(len(pairs))
        assert score(preds, labels) == score([preds[i] for i in order], [labels[i] for i in order])

    @settings(max_examples=100, deadline=None)
    @given(st.tuples(*(st.integers(0, 30) for _ in range(4))))
    def test_recompute_from_counts(self, counts):
        tp, fp, tn, fn = counts
        m = Metrics(tp, fp, tn, fn)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        assert abs(m.precision - p) <= 1e-15 and abs(m.recall - r) <= 1e-15 and abs(m.f1 - f) <= 1e-15


def test_mean_and_pooled():
    folds = [Metrics(1, 1, 0, 0), Metrics(1, 0, 0, 1)]
    mean = mean_metrics(folds)
    assert mean.precision == pytest.approx(0.75)
    assert mean.recall == pytest.approx(0.75)
    pooled = pooled_metrics(folds)
    assert (pooled.tp, pooled.fp, pooled.tn, pooled.fn) == (2, 1, 0, 1)


def _labels_only(labels):
    return Dataset([Email(f"m{i}", f"body {i}", None, y) for i, y in enumerate(labels)])


def always_phishing(train_set, test_set):
    return [1] * len(test_set)


class TestCrossValidate:
    def test_constant_classifier(self):
        ds = _labels_only([1] * 20 + [0] * 80)
        res = cross_validate(ds, TrainConfig(), k=5, model=always_phishing)
        assert len(res.folds) == 5
        for m in res.folds:
            assert m.recall == 1.0
            assert m.precision == pytest.approx(0.2)
        assert res.model == "always_phishing"

    def test_leave_one_out(self):
        ds = _labels_only([1, 0, 0, 1, 0, 1, 0])
        res = cross_validate(ds, TrainConfig(), k=len(ds), model=always_phishing)
        assert [m.tp + m.fp + m.tn + m.fn for m in res.folds] == [1] * len(ds)

    @settings(max_examples=30, deadline=None)
    @given(labels=st.lists(st.integers(0, 1), min_size=4, max_size=40), k=st.integers(2, 4))
    def test_fold_sizes_sum(self, labels, k):
        ds = _labels_only(labels)
        res = cross_validate(ds, TrainConfig(), k=k, model=always_phishing)
        assert sum(m.tp + m.fp + m.tn + m.fn for m in res.folds) == len(ds)

    def test_k_below_two(self):
        with pytest.raises(ValueError):
            cross_validate(_labels_only([0, 1, 0]), TrainConfig(), k=1, model=always_phishing)

    def test_errors_name_fold(self):
        def broken(train_set, test_set):
            raise ValueError("boom")

        with pytest.raises(RuntimeError, match="fold 0: boom"):
            cross_validate(_labels_only([0, 1] * 5), TrainConfig(), k=2, model=broken)

    def test_unknown_model(self):
        ds = _labels_only([0, 1] * 5)
        with pytest.raises(ValueError, match="unknown model"):
            fit_predict("random-forest", ds, ds, TrainConfig())

    def test_svm_tfidf_on_separable_set(self):
        ds = separable_corpus(100, seed=3)
        res = cross_validate(ds, TrainConfig(min_count=1), k=5, model="svm-tfidf")
        assert res.mean.precision == 1.0
        assert res.mean.f1 > 0.9

    def test_hlstm_runs(self):
        ds = separable_corpus(40, seed=3)
        cfg = TrainConfig(embed_dim=8, cell=4, att=4, L=4, K=12, patience=None, max_epochs=1)
        res = cross_validate(ds, cfg, k=2, model="hlstm-supervised")
        assert len(res.folds) == 2


def test_metrics_csv():
    text = metrics_csv([("svm-tfidf", 0, Metrics(2, 1, 0, 1)), ("svm-tfidf", "mean", mean_metrics([Metrics(1, 0, 1, 0)]))])
    lines = text.splitlines()
    assert lines[0] == "model,fold,precision,recall,f1"
    assert lines[1] == "svm-tfidf,0,0.666667,0.666667,0.666667"
    assert lines[2] == "svm-tfidf,mean,1.000000,1.000000,1.000000"
