import csv
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gazeattn.datasets import AttentionSample, DatasetManifest
from gazeattn.errors import EmptyInput, EmptyMatrix, LengthMismatch, TooFewSubjects
from gazeattn.eval import (
    ConfusionMatrix,
    FoldReport,
    LosoReport,
    accuracy_from_recalls,
    aggregate_scores,
    confusion_matrix,
    fold_metrics,
    format_table,
    render_report,
    round_half_up,
    run_loso,
)
from gazeattn.types import AttentionClass as C

from oracles import brute_force_metrics

labels3 = st.lists(st.integers(0, 2), min_size=1, max_size=60)


class TestConfusionMatrix:
    def test_perfect(self):
        cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2])
        assert cm.to_list() == [[1, 0, 0], [0, 1, 0], [0, 0, 2]]

    def test_single_off_diagonal(self):
        cm = confusion_matrix([C.TABLE], [C.COBOT])
        assert cm.to_list() == [[0, 1, 0], [0, 0, 0], [0, 0, 0]]

    def test_accepts_names(self):
        assert confusion_matrix(["Table"], ["cobot"]).counts[0, 1] == 1

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            confusion_matrix([0, 1], [0])

    def test_empty(self):
        with pytest.raises(EmptyInput):
            confusion_matrix([], [])

    def test_row_sums_on_random_pairs(self, rng):
        labels = rng.integers(0, 3, 1000)
        preds = rng.integers(0, 3, 1000)
        cm = confusion_matrix(preds, labels)
        assert cm.row_totals() == [int((labels == k).sum()) for k in range(3)]
        assert int(np.trace(cm.counts)) + int(cm.counts.sum() - np.trace(cm.counts)) == 1000


class TestFoldMetrics:
    def test_all_correct(self):
        m = fold_metrics(ConfusionMatrix(np.diag([3, 4, 5])))
        assert m.recalls == (1.0, 1.0, 1.0) and m.accuracy == 1.0 and m.f1 == 1.0

    def test_hand_computed(self):
        m = fold_metrics(ConfusionMatrix(np.array([[1, 1, 0], [0, 2, 0], [0, 0, 2]])))
        assert m.recalls == (0.5, 1.0, 1.0)
        assert m.accuracy == 5 / 6
        # F1: cobot 2*1/(2+1)=2/3, table 2*2/(2+3)=4/5, distracted 1 -> mean 37/45
        assert m.f1 == pytest.approx(37 / 45, abs=1e-15)

    def test_empty_class_row(self):
        with pytest.warns(RuntimeWarning):
            m = fold_metrics(ConfusionMatrix(np.array([[2, 0, 0], [0, 0, 0], [1, 0, 1]])))
        assert m.recalls[1] == 0.0 and m.empty_classes == (1,)

    def test_empty_matrix(self):
        with pytest.raises(EmptyMatrix):
            fold_metrics(ConfusionMatrix(np.zeros((3, 3), int)))

    @given(labels3, st.data())
    def test_matches_brute_force(self, labels, data):
        preds = data.draw(st.lists(st.integers(0, 2), min_size=len(labels), max_size=len(labels)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m = fold_metrics(confusion_matrix(preds, labels))
        ref = brute_force_metrics(preds, labels)
        assert m.recalls == ref["recalls"]
        assert m.accuracy == ref["accuracy"]
        assert m.f1 == ref["f1"]
        assert 0.0 <= m.f1 <= 1.0 and 0.0 <= m.accuracy <= 1.0


class TestPublishedAggregates:
    LOSO_ACC = [0.97, 0.91, 0.99, 0.98, 0.96, 0.93, 0.83, 0.97]
    LOSO_F1 = [0.97, 0.91, 0.99, 0.98, 0.95, 0.93, 0.82, 0.97]
    ASSEMBLY_ACC = [0.81, 0.82, 0.82, 0.81, 0.82, 0.81, 0.82, 0.82]
    ASSEMBLY_F1 = [0.81, 0.82, 0.82, 0.82, 0.82, 0.81, 0.82, 0.82]

    def test_loso_average(self):
        acc, f1 = aggregate_scores(self.LOSO_ACC, self.LOSO_F1)
        assert acc == pytest.approx(0.9425, abs=1e-12)
        assert round_half_up(acc, 3) == 0.943
        assert round_half_up(f1, 2) == 0.94

    def test_assembly_average(self):
        acc, f1 = aggregate_scores(self.ASSEMBLY_ACC, self.ASSEMBLY_F1)
        assert acc == pytest.approx(0.81625, abs=1e-12)
        assert round_half_up(acc, 3) == 0.816
        assert round_half_up(f1, 3) == 0.818

    def test_model7_accuracy_from_recalls(self):
        # round(.87*833)=725, round(.96*940)=902, round(.63*962)=606 -> 2233/2735
        acc = accuracy_from_recalls((0.87, 0.96, 0.63), (833, 940, 962))
        assert acc == 2233 / 2735
        assert round_half_up(acc, 3) == 0.816

    def test_mismatched_lengths(self):
        with pytest.raises(LengthMismatch):
            aggregate_scores([0.5], [])


def report_fixture():
    cms = [
        [[9, 1, 0], [0, 10, 0], [1, 2, 7]],
        [[10, 0, 0], [0, 10, 0], [0, 0, 10]],
        [[8, 1, 1], [1, 9, 0], [0, 3, 7]],
    ]
    return LosoReport.from_folds(
        FoldReport.from_confusion(f"Model{i + 1}", ConfusionMatrix(np.array(c))) for i, c in enumerate(cms))


# Hand-derived: Model1 acc 26/30, F1 mean(18/20, 20/23, 14/17)=0.8644;
# Model3 acc 24/30, F1 mean(16/19, 18/23, 14/18)=0.8008;
# averages acc 80/90=0.8889, F1 (0.8644+1+0.8008)/3=0.8884.
GOLDEN_TABLE = """\
Model    Recall Cobot  Recall Table  Recall Distracted  Accuracy  F1-score
--------------------------------------------------------------------------
Model1           0.90          1.00               0.70      0.87      0.86
Model2           1.00          1.00               1.00      1.00      1.00
Model3           0.80          0.90               0.70      0.80      0.80
--------------------------------------------------------------------------
Average                                                    0.889     0.888
"""


class TestReports:
    def test_golden_text_table(self):
        assert format_table(report_fixture()) == GOLDEN_TABLE

    def test_averages_are_means(self):
        rep = report_fixture()
        assert rep.average_accuracy == pytest.approx(np.mean([f.accuracy for f in rep.folds]), abs=1e-9)
        assert rep.average_f1 == pytest.approx(np.mean([f.f1 for f in rep.folds]), abs=1e-9)

    def test_metrics_recomputable_from_matrix(self):
        for f in report_fixture().folds:
            m = fold_metrics(f.confusion)
            assert abs(m.accuracy - f.accuracy) < 1e-9 and abs(m.f1 - f.f1) < 1e-9

    def test_json_round_trip(self, tmp_path):
        rep = report_fixture()
        back = LosoReport.load_json(rep.save_json(tmp_path / "r.json"))
        assert back.average_accuracy == rep.average_accuracy
        assert [f.confusion for f in back.folds] == [f.confusion for f in rep.folds]

    def test_render_files(self, tmp_path):
        files = render_report(report_fixture(), tmp_path)
        rows = list(csv.reader(files["csv"].open()))
        assert rows[0] == ["model", "recall_cobot", "recall_table", "recall_distracted", "accuracy", "f1"]
        assert len(rows) == 1 + 3 + 1 and rows[-1][0] == "Average"
        assert files["table"].read_text() == GOLDEN_TABLE
        for i in range(1, 4):
            png = tmp_path / f"confusion_Model{i}.png"
            assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class _Oracle:
    """Stand-in model that predicts the class encoded in the image's first pixel."""

    class backbone:
        side = 8


def test_run_loso_with_stub_trainer(tmp_path, monkeypatch):
    from gazeattn import eval as ev
    from gazeattn.vision import write_image

    recs = []
    for s in ("b", "a", "c"):
        for k in range(3):
            name = f"{s}_{k}.png"
            write_image(tmp_path / name, np.full((8, 8, 3), k * 50, np.uint8))
            recs.append(AttentionSample(name, s, C(k)))
    manifest = DatasetManifest("attention", tuple(recs), tmp_path)
    seen = []

    def trainer(train, seed):
        seen.append((tuple(train.subjects), seed))
        return _Oracle()

    monkeypatch.setattr(ev, "predict_classes", lambda model, X: [C(int(x[0, 0, 0]) // 50) for x in X])
    rep = run_loso(manifest, trainer, seed=5)
    assert [f.fold for f in rep.folds] == ["a", "b", "c"]
    assert seen == [(("b", "c"), 5), (("a", "c"), 5), (("a", "b"), 5)]
    assert rep.average_accuracy == 1.0

    with pytest.raises(TooFewSubjects):
        run_loso(manifest.with_records(recs[:3]), trainer)
